"""Command-line entry point: ``visitflow <subcommand> ...``.

Configuration is a YAML (or JSON) file with these top-level keys, all optional::

    seed: 0
    period: {start_year: 2020, end_year: 2023}
    exclude: [zone ids]                 # origins dropped after aggregation
    model: {family: ols, ...}           # family hyperparameters
    protocol: {mode: kfold, k: 10, runs: 10, test_fraction: 0.1, grouped: false}
    interpret: {n_permutations: 2000, method: auto, max_rows: 100, mode: at_means,
                feature: drive_time_min, grid: [start, stop, step], attribute: rating,
                levels: [max, mean, min], groups: {name: [features]}}
    synth: {n_zones: 200, ...}          # generator settings

Command-line flags override the file.  Every run writes ``config.resolved.json``
and ``manifest.json`` (version, resolved config, seed, output hashes) next to
its outputs.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .domain import FEATURE_NAMES, assemble_candidates, assemble_features
from .errors import ConfigError, VisitflowError
from .ingest import PeriodConfig, ValidationFailed, load_dataset
from .interpret import (
    DEFAULT_DRIVE_GRID,
    FeatureGrouping,
    decay_scenarios,
    default_grouping,
    find_inflection,
    inflections_json,
    pdp_csv,
    pdp_curve,
    read_curves,
    scenario_inflections,
    shap_summary,
)
from .evaluation import cross_validate, loss_curve_csv
from .models import CONFIG_TYPES, ModelArtifact, ModelSpec, predict
from .synth import SynthConfig, write_city, write_region_fixture

DEFAULTS = {
    "seed": 0,
    "period": {"start_year": 2020, "end_year": 2023},
    "exclude": [],
    "model": {"family": "ols"},
    "protocol": {"mode": "kfold", "k": 10, "runs": 10, "test_fraction": 0.1, "grouped": False},
    "interpret": {
        "n_permutations": 2000,
        "method": "auto",
        "max_rows": 100,
        "mode": "at_means",
        "feature": "drive_time_min",
        "grid": None,
        "attribute": None,
        "levels": ["max", "mean", "min"],
        "groups": None,
    },
    "synth": {},
}
_SYNTH_KEYS = {f.name for f in fields(SynthConfig)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _check_keys(given: dict, allowed, prefix: str):
    for key in given:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}: unknown configuration key")


def load_config(path=None) -> dict:
    """Defaults merged with the file at ``path``; unknown keys raise :class:`ConfigError` naming the key path."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing config file {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: malformed config: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    _check_keys(data, DEFAULTS, "")
    for key, value in data.items():
        if isinstance(DEFAULTS[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a mapping")
            if key == "synth":
                _check_keys(value, _SYNTH_KEYS, "synth.")
            elif key == "model":
                family = value.get("family", cfg["model"]["family"])
                if family not in CONFIG_TYPES:
                    raise ConfigError(f"model.family: unknown family {family!r}")
                allowed = {"family"} | {f.name for f in fields(CONFIG_TYPES[family])}
                _check_keys(value, allowed, "model.")
                cfg["model"] = {}
            else:
                _check_keys(value, DEFAULTS[key], f"{key}.")
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def _model_spec(cfg) -> ModelSpec:
    params = {k: v for k, v in cfg["model"].items() if k != "family"}
    return ModelSpec(cfg["model"]["family"], params)


class _Outputs:
    """Collects output files and writes the manifest."""

    def __init__(self, out_dir, cfg, command):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command
        self.files = []

    def text(self, name, content):
        (self.dir / name).write_text(content, encoding="utf-8", newline="\n")
        self.files.append(name)

    def adopt(self, name):
        self.files.append(name)

    def finish(self):
        self.text("config.resolved.json", _dumps(self.cfg))
        digest = {}
        for name in sorted(set(self.files)):
            digest[name] = hashlib.sha256((self.dir / name).read_bytes()).hexdigest()
        manifest = {
            "tool": "visitflow",
            "version": __version__,
            "command": self.command,
            "seed": self.cfg["seed"],
            "config": self.cfg,
            "files": digest,
        }
        (self.dir / "manifest.json").write_text(_dumps(manifest), encoding="utf-8", newline="\n")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def _dataset(args, cfg):
    period = PeriodConfig(**cfg["period"])
    dataset, report = load_dataset(args.data, period, tuple(cfg["exclude"]))
    return dataset, report


def _rows_for(artifact, dataset, which):
    if which == "auto":
        which = "candidates" if artifact.simplex else "observed"
    return assemble_candidates(dataset) if which == "candidates" else assemble_features(dataset)


def _table_csv(table, values) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["origin_zone_id", "hospital_id", "prediction"])
    for o, h, v in zip(table.origin_ids, table.hospital_ids, values):
        w.writerow([o, h, repr(float(v))])
    return buf.getvalue()


def _grid(spec):
    if spec is None:
        return None
    if isinstance(spec, str):
        spec = [float(x) for x in spec.split(":")]
    if len(spec) != 3:
        raise ConfigError("interpret.grid: expected start, stop, step")
    start, stop, step = (float(v) for v in spec)
    if step <= 0:
        raise ConfigError("interpret.grid: step must be positive")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg):
    out = _Outputs(args.out, cfg, "synth")
    if args.fixture == "region":
        info = write_region_fixture(out.dir, seed=cfg["seed"])
        for name in ("zones.csv", "hospitals.csv", "flows.csv", "drivetime.csv"):
            out.adopt(name)
        print(f"wrote region-scale fixture: {info['flows']} flows")
    else:
        synth = SynthConfig(**{**cfg["synth"], "seed": cfg["seed"]})
        oracle = write_city(synth, out.dir)
        for name in ("zones.csv", "hospitals.csv", "flows.csv", "drivetime.csv", "truth.csv", "oracle.json"):
            out.adopt(name)
        print(f"achievable CPC {oracle['cpc']:.4f}, NRMSE {oracle['nrmse']:.4f}, SMAPE {oracle['smape']:.2f}")
    out.finish()
    return 0


def cmd_validate(args, cfg):
    try:
        dataset, report = _dataset(args, cfg)
        status = 0
    except ValidationFailed as exc:
        report, status = exc.report, 1
    for line in report.errors:
        print(f"error: {line}", file=sys.stderr)
    for line in report.warnings:
        print(f"warning: {line}")
    print(json.dumps(report.counts, sort_keys=True))
    if args.out:
        out = _Outputs(args.out, cfg, "validate")
        out.text("validation.json", _dumps(report.to_dict()))
        out.finish()
    return status


def cmd_train(args, cfg):
    dataset, _ = _dataset(args, cfg)
    spec = _model_spec(cfg)
    rows = assemble_candidates(dataset) if spec.simplex else assemble_features(dataset)
    artifact = spec.fit(rows, seed=cfg["seed"])
    out = _Outputs(args.out, cfg, "train")
    out.text("model.json", artifact.to_json())
    if artifact.metadata.get("loss_curve"):
        out.text("loss_curve.csv", loss_curve_csv(artifact))
    out.finish()
    print(f"trained {spec.family} on {len(rows)} rows")
    return 0


def cmd_evaluate(args, cfg):
    dataset, _ = _dataset(args, cfg)
    p = cfg["protocol"]
    report = cross_validate(
        _model_spec(cfg), dataset, k=p["k"], runs=p["runs"], base_seed=cfg["seed"],
        mode=p["mode"], test_fraction=p["test_fraction"], grouped=p["grouped"],
    )
    out = _Outputs(args.out, cfg, "evaluate")
    out.text("eval.json", report.to_json() + "\n")
    out.text("eval.csv", report.to_csv())
    if report.loss_curves:
        out.text("loss_curves.csv", report.curves_csv())
    rendered = report.render()
    out.text("eval.txt", rendered + "\n")
    out.finish()
    print(rendered)
    return 0 if report.ok_cells else 1


def _load_model(path) -> ModelArtifact:
    if not Path(path).is_file():
        raise FileNotFoundError(f"missing model file {path}")
    return ModelArtifact.load(path)


def cmd_predict(args, cfg):
    artifact = _load_model(args.model)
    dataset, _ = _dataset(args, cfg)
    rows = _rows_for(artifact, dataset, args.rows)
    out = _Outputs(args.out, cfg, "predict")
    out.text("predictions.csv", _table_csv(rows, predict(artifact, rows)))
    out.finish()
    return 0


def _grouping(cfg):
    groups = cfg["interpret"]["groups"]
    return default_grouping() if groups is None else FeatureGrouping.from_mapping(groups)


def cmd_explain(args, cfg):
    artifact = _load_model(args.model)
    dataset, _ = _dataset(args, cfg)
    rows = assemble_features(dataset)
    ic = cfg["interpret"]
    n = min(int(ic["max_rows"]), len(rows))
    pick = np.sort(np.random.default_rng(cfg["seed"]).choice(len(rows), size=n, replace=False))
    summary = shap_summary(
        artifact, rows.subset(pick), _grouping(cfg), int(ic["n_permutations"]), cfg["seed"], method=ic["method"]
    )
    out = _Outputs(args.out, cfg, "explain")
    out.text("shap_summary.csv", summary.summary_csv())
    out.text("shap_rows.csv", summary.rows_csv())
    out.finish()
    for name, rank, value in summary.ranked()[:5]:
        print(f"{rank:>2} {name} {value:.6g}")
    return 0


def cmd_pdp(args, cfg):
    artifact = _load_model(args.model)
    ic = cfg["interpret"]
    out = _Outputs(args.out, cfg, "pdp")
    if ic["attribute"] is not None:
        grid = _grid(ic["grid"])
        curves = decay_scenarios(
            artifact, ic["attribute"], DEFAULT_DRIVE_GRID if grid is None else grid, tuple(ic["levels"]), _grouping(cfg)
        )
        result = scenario_inflections(curves)
        out.text("inflections.json", inflections_json(result) + "\n")
        for key, rep in result.items():
            print(key, " ".join(repr(c["at"]) for c in rep["crossings"]) or "no crossing")
    else:
        grid = _grid(ic["grid"])
        if grid is None and ic["feature"] == "drive_time_min":
            grid = DEFAULT_DRIVE_GRID
        elif grid is None:
            raise ConfigError("interpret.grid: required when sweeping a single feature")
        rows = None
        if ic["mode"] == "averaged":
            if args.data is None:
                raise ConfigError("interpret.mode: averaged partial dependence needs a data directory")
            rows = _rows_for(artifact, _dataset(args, cfg)[0], "observed")
        curves = [pdp_curve(artifact, ic["feature"], grid, ic["mode"], rows=rows)]
    out.text("pdp.csv", pdp_csv(curves))
    out.finish()
    return 0


def _single_curve(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"missing curve file {path}")
    curves = read_curves(path)
    if len(curves) != 1:
        raise ConfigError(f"{path}: expected one curve, found {len(curves)} scenarios")
    return next(iter(curves.values()))


def cmd_inflect(args, cfg):
    report = find_inflection(_single_curve(args.curve_a), _single_curve(args.curve_b))
    if report.degenerate:
        print("degenerate: curves coincide")
    for t in report.abscissas:
        print(repr(round(t, 10)))
    if args.out:
        out = _Outputs(args.out, cfg, "inflect")
        out.text("inflections.json", inflections_json(report.to_dict()) + "\n")
        out.finish()
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--seed", type=int, help="single source of randomness (overrides config)")
    common.add_argument("--out", help="output directory")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("data", help="directory with zones.csv, hospitals.csv, flows.csv, drivetime.csv")
    family = argparse.ArgumentParser(add_help=False)
    family.add_argument("--family", choices=sorted(CONFIG_TYPES), help="model family (overrides config)")

    parser = _Parser(prog="visitflow", description="Hospital visitation flow modelling toolkit.")
    parser.add_argument("--version", action="version", version=f"visitflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic city")
    p.add_argument("--fixture", choices=["city", "region"], default="city", help="what to generate")
    p.set_defaults(func=cmd_synth, needs_out=True)

    p = sub.add_parser("validate", parents=[common, data], help="ingest and report problems")
    p.set_defaults(func=cmd_validate, needs_out=False)

    p = sub.add_parser("train", parents=[common, data, family], help="fit one model family")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("evaluate", parents=[common, data, family], help="repeated cross-validation")
    p.set_defaults(func=cmd_evaluate, needs_out=True)

    p = sub.add_parser("predict", parents=[common], help="score rows with a trained model")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--rows", choices=["auto", "observed", "candidates"], default="auto")
    p.set_defaults(func=cmd_predict, needs_out=True)

    p = sub.add_parser("explain", parents=[common], help="grouped Shapley summary")
    p.add_argument("model")
    p.add_argument("data")
    p.set_defaults(func=cmd_explain, needs_out=True)

    p = sub.add_parser("pdp", parents=[common], help="partial dependence or decay scenarios")
    p.add_argument("model")
    p.add_argument("data", nargs="?", help="needed only for averaged partial dependence")
    p.add_argument("--feature", choices=FEATURE_NAMES)
    p.add_argument("--attribute", help="hospital attribute (or group) for decay scenarios")
    p.add_argument("--grid", help="start:stop:step")
    p.add_argument("--mode", choices=["at_means", "averaged"])
    p.set_defaults(func=cmd_pdp, needs_out=True)

    p = sub.add_parser("inflect", parents=[common], help="crossings between two curve files")
    p.add_argument("curve_a")
    p.add_argument("curve_b")
    p.set_defaults(func=cmd_inflect, needs_out=False)
    return parser


def _apply_flags(cfg, args):
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "family", None) and args.family != cfg["model"].get("family"):
        cfg["model"] = {"family": args.family}
    for flag, key in (("feature", "feature"), ("attribute", "attribute"), ("grid", "grid"), ("mode", "mode")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg["interpret"][key] = value
    if isinstance(cfg["interpret"]["grid"], str):
        cfg["interpret"]["grid"] = [float(x) for x in cfg["interpret"]["grid"].split(":")]
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("seed: must be an integer")
    return cfg


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        if args.needs_out and not args.out:
            print(f"visitflow {args.command}: error: --out is required", file=sys.stderr)
            return 2
        return args.func(args, cfg)
    except ValidationFailed as exc:
        for line in exc.report.errors:
            print(f"error: {line}", file=sys.stderr)
        return 1
    except (VisitflowError, FileNotFoundError, ValueError) as exc:
        print(f"visitflow {args.command}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
