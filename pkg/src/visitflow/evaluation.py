"""Flow-prediction metrics and the cross-validation protocol."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    MetricDomainError,
    ProtocolError,
    ShapeError,
    UndefinedOverlapError,
    UndefinedRangeError,
    VisitflowError,
)

log = logging.getLogger(__name__)


def _pair(y, y_hat, min_len):
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.shape != y_hat.shape:
        raise ShapeError(f"length mismatch: {len(y)} observed vs {len(y_hat)} predicted")
    if len(y) < min_len:
        raise ShapeError(f"need at least {min_len} values, got {len(y)}")
    return y, y_hat


def nrmse(y, y_hat) -> float:
    """Root mean squared error divided by the range of the observed values."""
    y, y_hat = _pair(y, y_hat, 2)
    span = y.max() - y.min()
    if span <= 0:
        raise UndefinedRangeError("observed values are constant; NRMSE is undefined")
    d = y - y_hat
    return float(np.sqrt(np.dot(d, d) / len(y)) / span)


def smape(y, y_hat) -> float:
    """Symmetric mean absolute percentage error in percent; 0/0 terms count as 0."""
    y, y_hat = _pair(y, y_hat, 1)
    num = np.abs(y - y_hat)
    den = (np.abs(y_hat) + np.abs(y)) / 2
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(terms.mean() * 100)


def cpc(y, y_hat) -> float:
    """Common part of commuters: ``2 sum(min) / sum(y + y_hat)``."""
    y, y_hat = _pair(y, y_hat, 1)
    if (y < 0).any() or (y_hat < 0).any():
        raise MetricDomainError("CPC requires nonnegative flows")
    total = y.sum() + y_hat.sum()
    if total <= 0:
        raise UndefinedOverlapError("both flow vectors sum to zero")
    return float(2 * np.minimum(y, y_hat).sum() / total)


@dataclass(frozen=True)
class MetricTriple:
    nrmse: float
    smape: float
    cpc: float

    def to_dict(self):
        return asdict(self)


def metric_triple(y, y_hat) -> MetricTriple:
    return MetricTriple(nrmse(y, y_hat), smape(y, y_hat), cpc(y, y_hat))


METRICS = ("nrmse", "smape", "cpc")


def format_mean_std(mean, std) -> str:
    return f"{mean:.2f} ± {std:.4f}"


def kfold_split(n: int, k: int = 10, seed: int = 0) -> np.ndarray:
    """Fold label for each of ``n`` items; fold sizes differ by at most one."""
    if k < 2 or k > n:
        raise ProtocolError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.intp)
    folds[perm] = np.arange(n) % k
    return folds


def holdout_split(n: int, test_fraction: float = 0.1, seed: int = 0):
    """Seeded (train, test) index arrays for the single-split protocol."""
    if not 0 < test_fraction < 1:
        raise ProtocolError("test_fraction must lie in (0, 1)")
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n_test >= n:
        raise ProtocolError(f"cannot hold out {test_fraction:.0%} of {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def cell_seed(base_seed: int, run: int, fold: int) -> int:
    return int(np.random.SeedSequence([base_seed, run, fold]).generate_state(1)[0])


def aggregate(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    mean = math.fsum(v) / len(v)
    if len(v) < 2:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((x - mean) ** 2 for x in v) / (len(v) - 1))


@dataclass
class EvalReport:
    family: str
    protocol: dict
    cells: list = field(default_factory=list)
    loss_curves: dict = field(default_factory=dict)

    @property
    def ok_cells(self):
        return [c for c in self.cells if c["status"] == "ok"]

    @property
    def complete(self) -> bool:
        return all(c["status"] == "ok" for c in self.cells)

    @property
    def aggregate(self) -> dict:
        ok = self.ok_cells
        return {m: aggregate([c[m] for c in ok]) for m in METRICS}

    def render(self) -> str:
        agg = self.aggregate
        mode = self.protocol["mode"]
        lines = [f"{self.family} ({mode}, {len(self.ok_cells)}/{len(self.cells)} cells)"]
        for m in METRICS:
            lines.append(f"{m.upper():<6} {format_mean_std(*agg[m])}")
        if not self.complete:
            lines.append(f"INCOMPLETE: {len(self.cells) - len(self.ok_cells)} cell(s) failed")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        agg = self.aggregate
        return {
            "family": self.family,
            "protocol": self.protocol,
            "cells": [_finite(c) for c in self.cells],
            "aggregate": {
                m: {"mean": agg[m][0], "std": agg[m][1], "text": format_mean_std(*agg[m])} for m in METRICS
            },
            "complete": self.complete,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, ensure_ascii=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "fold", *METRICS])
        for c in self.cells:
            if c["status"] == "ok":
                w.writerow([c["run"], c["fold"], *(repr(c[m]) for m in METRICS)])
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "fold", "epoch", "train_loss", "val_loss"])
        for key in sorted(self.loss_curves, key=lambda s: tuple(int(x) for x in s.split(":"))):
            run, fold = key.split(":")
            curve = self.loss_curves[key]
            for e, (t, v) in enumerate(zip(curve["train"], curve["val"]), start=1):
                w.writerow([run, fold, e, repr(t), "" if v is None else repr(v)])
        return buf.getvalue()


def _finite(cell):
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in cell.items()}


def loss_curve_csv(artifact) -> str:
    """``epoch,train_loss,val_loss`` for a trained neural artifact."""
    curve = artifact.metadata.get("loss_curve")
    if not curve:
        raise VisitflowError(f"{artifact.family} artifacts carry no loss curve")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for e, (t, v) in enumerate(zip(curve["train"], curve["val"]), start=1):
        w.writerow([e, repr(t), "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(v)])
    return buf.getvalue()


def cross_validate(
    model_config,
    dataset,
    k: int = 10,
    runs: int = 10,
    base_seed: int = 0,
    mode: str = "kfold",
    test_fraction: float = 0.1,
    grouped: bool = False,
) -> EvalReport:
    """Repeated k-fold (or repeated holdout) evaluation of one model family.

    ``model_config`` is a :class:`visitflow.models.ModelSpec`.  Run ``r``
    shuffles with seed ``base_seed + r``; each cell trains with a seed derived
    from ``(base_seed, run, fold)``.  Point-prediction families train on the
    observed flows outside the test fold; softmax families train on the
    closed candidate sets with the test pairs removed and are scored on the
    full candidate sets.  Negative point predictions are clipped to 0 before
    scoring.  Failed cells are kept in the report and left out of the
    aggregates.
    """
    from .domain import assemble_candidates, assemble_features
    from .models import ModelSpec, predict

    spec = model_config if isinstance(model_config, ModelSpec) else ModelSpec(**model_config)
    if mode not in ("kfold", "holdout"):
        raise ProtocolError(f"unknown protocol mode {mode!r}")
    if runs < 1:
        raise ProtocolError("runs must be >= 1")
    flows = assemble_features(dataset)
    n = len(flows)
    if mode == "kfold" and n < k:
        raise ProtocolError(f"dataset has {n} rows, fewer than k={k}")
    softmax = spec.simplex
    if softmax:
        cand = assemble_candidates(dataset)
        cand_pos = {pair: i for i, pair in enumerate(cand.pair_keys())}
        flow_in_cand = np.array([cand_pos[p] for p in flows.pair_keys()], dtype=np.intp)

    origin_codes = None
    if grouped:
        _, origin_codes = np.unique(flows.origin_ids.astype(str), return_inverse=True)

    report = EvalReport(
        spec.family,
        {
            "mode": mode,
            "k": k if mode == "kfold" else None,
            "runs": runs,
            "base_seed": base_seed,
            "test_fraction": test_fraction if mode == "holdout" else None,
            "grouped_by_origin": grouped,
            "n_rows": n,
            "model": spec.to_dict(),
        },
    )
    for run in range(runs):
        seed = base_seed + run
        for fold, test in enumerate(_test_sets(n, k, seed, mode, test_fraction, origin_codes)):
            train_mask = np.ones(n, dtype=bool)
            train_mask[test] = False
            cseed = cell_seed(base_seed, run, fold)
            cell = {"run": run, "fold": fold, "seed": cseed, "n_test": int(len(test))}
            try:
                if softmax:
                    keep = np.ones(len(cand), dtype=bool)
                    keep[flow_in_cand[test]] = False
                    art = spec.fit(cand.subset(np.flatnonzero(keep)), seed=cseed)
                    y_hat = predict(art, cand)[flow_in_cand[test]]
                else:
                    art = spec.fit(flows.subset(np.flatnonzero(train_mask)), seed=cseed)
                    y_hat = np.clip(predict(art, flows.subset(test)), 0.0, None)
                triple = metric_triple(flows.y[test], y_hat)
                cell.update(status="ok", **triple.to_dict())
                curve = art.metadata.get("loss_curve")
                if curve:
                    report.loss_curves[f"{run}:{fold}"] = curve
            except (VisitflowError, FloatingPointError, np.linalg.LinAlgError) as exc:
                log.warning("run %d fold %d failed: %s", run, fold, exc)
                cell.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            report.cells.append(cell)
    return report


def _test_sets(n, k, seed, mode, test_fraction, origin_codes):
    if origin_codes is None:
        if mode == "holdout":
            return [holdout_split(n, test_fraction, seed)[1]]
        folds = kfold_split(n, k, seed)
        return [np.flatnonzero(folds == f) for f in range(k)]
    n_groups = int(origin_codes.max()) + 1
    if mode == "holdout":
        _, test_groups = holdout_split(n_groups, test_fraction, seed)
        return [np.flatnonzero(np.isin(origin_codes, test_groups))]
    gfolds = kfold_split(n_groups, k, seed)
    row_folds = gfolds[origin_codes]
    return [np.flatnonzero(row_folds == f) for f in range(k)]
