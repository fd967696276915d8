"""Grouped Shapley attribution, partial dependence, decay scenarios and curve crossings."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .domain import (
    DRIVE_TIME,
    FEATURE_NAMES,
    HOSPITAL_SLICE,
    N_FEATURES,
    PERCENT_FEATURES,
    FeatureTable,
    feature_index,
)
from .errors import ConfigError, GridError, ScopeError
from .models.artifact import ModelArtifact, pair_response

ALL_BEDS = "All beds"
EXACT_MAX_GROUPS = 12


@dataclass(frozen=True)
class FeatureGrouping:
    """Named groups partitioning the 22 feature indices."""

    groups: tuple  # ((name, (idx, ...)), ...)

    def __post_init__(self):
        seen = []
        for name, members in self.groups:
            if not members:
                raise ConfigError(f"group {name!r} is empty")
            seen.extend(members)
        if sorted(seen) != list(range(N_FEATURES)):
            dup = sorted({i for i in seen if seen.count(i) > 1})
            missing = sorted(set(range(N_FEATURES)) - set(seen))
            raise ConfigError(f"groups must partition the features (duplicates {dup}, missing {missing})")
        names = [n for n, _ in self.groups]
        if len(set(names)) != len(names):
            raise ConfigError("group names must be unique")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.groups]

    def __len__(self):
        return len(self.groups)

    def membership(self) -> np.ndarray:
        """Boolean ``(n_groups, n_features)`` matrix."""
        m = np.zeros((len(self.groups), N_FEATURES), dtype=bool)
        for g, (_, members) in enumerate(self.groups):
            m[g, list(members)] = True
        return m

    @classmethod
    def from_mapping(cls, mapping) -> FeatureGrouping:
        """Named groups from ``{name: [feature names or indices]}``; other features become singletons."""
        claimed = {}
        groups = []
        for name, members in mapping.items():
            idx = tuple(sorted(m if isinstance(m, int) else feature_index(m) for m in members))
            for i in idx:
                if i in claimed:
                    raise ConfigError(f"feature {FEATURE_NAMES[i]!r} is in groups {claimed[i]!r} and {name!r}")
                claimed[i] = name
            groups.append((name, idx))
        first = {idx[0]: (name, idx) for name, idx in groups}
        out = []
        for i in range(N_FEATURES):
            if i in first:
                out.append(first[i])
            elif i not in claimed:
                out.append((FEATURE_NAMES[i], (i,)))
        return cls(tuple(out))

    @classmethod
    def singletons(cls) -> FeatureGrouping:
        return cls(tuple((n, (i,)) for i, n in enumerate(FEATURE_NAMES)))


def default_grouping() -> FeatureGrouping:
    """Staffed and licensed bed counts merged into one "All beds" group."""
    return FeatureGrouping.from_mapping({ALL_BEDS: ["staffed_all_beds", "licensed_all_beds"]})


def _response(model):
    if isinstance(model, ModelArtifact):
        return lambda X: pair_response(model, X)
    if callable(model):
        return lambda X: np.asarray(model(X), dtype=float).reshape(-1)
    raise ConfigError("model must be a ModelArtifact or a callable on feature rows")


def _background(model, background):
    if background is not None:
        b = np.asarray(background, dtype=float)
    elif isinstance(model, ModelArtifact):
        b = model.stats.mean
    else:
        raise ConfigError("a background vector is required for callable models")
    if b.shape != (N_FEATURES,):
        raise ConfigError(f"background must have {N_FEATURES} entries")
    return b


def _evaluate_unique(f, X):
    """Evaluate ``f`` once per distinct row so identical inputs share one output."""
    uniq, inverse = np.unique(X, axis=0, return_inverse=True)
    return f(uniq)[inverse.reshape(-1)]


@dataclass
class ShapResult:
    groups: list
    phi: np.ndarray
    base_value: float
    prediction: float
    n_permutations: int
    seed: int
    exact: bool

    def as_dict(self) -> dict:
        return dict(zip(self.groups, self.phi.tolist()))


def shapley_values(
    model,
    instance,
    background=None,
    grouping: FeatureGrouping | None = None,
    n_permutations: int = 2000,
    seed: int = 0,
    method: str = "auto",
) -> ShapResult:
    """Group Shapley values of one instance.

    Features outside a coalition take their background values (training
    means by default).  ``method`` is ``"exact"`` (all coalitions),
    ``"sampling"`` (random group orderings) or ``"auto"``: exact up to 12
    groups.
    """
    if n_permutations < 1:
        raise ConfigError("n_permutations must be >= 1")
    grouping = grouping or default_grouping()
    f = _response(model)
    b = _background(model, background)
    x = np.asarray(instance, dtype=float).reshape(-1)
    if x.shape != (N_FEATURES,):
        raise ConfigError(f"instance must have {N_FEATURES} features")
    member = grouping.membership()
    G = len(grouping)
    if method == "auto":
        method = "exact" if G <= EXACT_MAX_GROUPS else "sampling"
    if method == "exact":
        phi, base, pred = _exact(f, x, b, member)
    elif method == "sampling":
        phi, base, pred = _sampled(f, x, b, member, n_permutations, np.random.default_rng(seed))
    else:
        raise ConfigError(f"unknown method {method!r}")
    return ShapResult(grouping.names, phi, base, pred, n_permutations, seed, method == "exact")


def _exact(f, x, b, member):
    G = member.shape[0]
    masks = np.arange(2**G)
    in_coalition = ((masks[:, None] >> np.arange(G)) & 1).astype(bool)  # (2^G, G)
    feat_on = (in_coalition.astype(int) @ member.astype(int)) > 0
    X = np.where(feat_on, x, b)
    v = _evaluate_unique(f, X)
    size = in_coalition.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(G - s - 1) / math.factorial(G) if s < G else 0.0 for s in range(G + 1)])
    phi = np.empty(G)
    for g in range(G):
        without = masks[~in_coalition[:, g]]
        phi[g] = math.fsum(weight[size[without]] * (v[without | (1 << g)] - v[without]))
    return phi, float(v[0]), float(v[-1])


def _sampled(f, x, b, member, n_perm, rng):
    G = member.shape[0]
    perms = np.stack([rng.permutation(G) for _ in range(n_perm)])  # (P, G)
    position = np.argsort(perms, axis=1)  # position[p, g] = step at which g joins
    steps = np.arange(G + 1)
    joined = position[:, None, :] < steps[None, :, None]  # (P, G+1, G)
    feat_on = (joined.reshape(-1, G).astype(int) @ member.astype(int)) > 0
    X = np.where(feat_on, x, b)
    v = _evaluate_unique(f, X).reshape(n_perm, G + 1)
    marginal = np.diff(v, axis=1)  # marginal[p, j] belongs to group perms[p, j]
    contrib = np.zeros((n_perm, G))
    np.put_along_axis(contrib, perms, marginal, axis=1)
    phi = contrib.mean(axis=0)
    return phi, float(v[0, 0]), float(v[0, -1])


def _display(feature_idx, values):
    values = np.asarray(values, dtype=float)
    if len(feature_idx) == 1 and FEATURE_NAMES[feature_idx[0]] in PERCENT_FEATURES:
        return values * 100
    return values


@dataclass
class ShapSummary:
    groups: list
    phi: np.ndarray  # (n_rows, n_groups)
    feature_values: np.ndarray  # (n_rows, n_groups), raw units, group mean for multi-feature groups
    mean_abs: np.ndarray
    rank: np.ndarray
    n_permutations: int
    seed: int

    def ranked(self) -> list[tuple[str, int, float]]:
        order = sorted(range(len(self.groups)), key=lambda g: (self.rank[g], g))
        return [(self.groups[g], int(self.rank[g]), float(self.mean_abs[g])) for g in order]

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "rank", "mean_abs_phi"])
        for name, rank, value in self.ranked():
            w.writerow([name, rank, repr(value)])
        return buf.getvalue()

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "group", "phi", "feature_value"])
        for r in range(self.phi.shape[0]):
            for g, name in enumerate(self.groups):
                w.writerow([r, name, repr(float(self.phi[r, g])), repr(float(self.feature_values[r, g]))])
        return buf.getvalue()


def rank_groups(mean_abs) -> np.ndarray:
    """Competition ranking by descending mean |phi|; equal values share a rank."""
    mean_abs = np.asarray(mean_abs, dtype=float)
    return np.array([1 + int(np.sum(mean_abs > v)) for v in mean_abs])


def shap_summary(
    model,
    rows,
    grouping: FeatureGrouping | None = None,
    n_permutations: int = 2000,
    seed: int = 0,
    background=None,
    method: str = "auto",
) -> ShapSummary:
    """Attributions for many rows, ranked by mean absolute value."""
    grouping = grouping or default_grouping()
    X = rows.X if isinstance(rows, FeatureTable) else np.asarray(rows, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ConfigError("shap_summary needs at least one row")
    seeds = np.random.SeedSequence(seed).generate_state(len(X))
    phi = np.empty((len(X), len(grouping)))
    for r, x in enumerate(X):
        phi[r] = shapley_values(model, x, background, grouping, n_permutations, int(seeds[r]), method).phi
    values = np.empty_like(phi)
    for g, (_, members) in enumerate(grouping.groups):
        values[:, g] = _display(members, X[:, list(members)].mean(axis=1))
    mean_abs = np.abs(phi).mean(axis=0)
    return ShapSummary(grouping.names, phi, values, mean_abs, rank_groups(mean_abs), n_permutations, seed)


@dataclass
class PdpCurve:
    feature: str
    grid: np.ndarray
    values: np.ndarray
    scenario: str = ""
    background: str = "training means"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.shape != self.values.shape or self.grid.ndim != 1:
            raise GridError("grid and values must be 1-D and equally long")


def _check_grid(grid):
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if len(grid) == 0:
        raise ConfigError("grid is empty")
    if len(grid) > 1 and not np.all(np.diff(grid) > 0):
        raise ConfigError("grid must be strictly increasing")
    return grid


def _resolve_feature(feature):
    if isinstance(feature, (int, np.integer)):
        if not 0 <= feature < N_FEATURES:
            raise ConfigError(f"feature index {feature} out of range")
        return int(feature)
    return feature_index(feature)


def pdp_curve(
    model,
    feature,
    grid,
    mode: str = "at_means",
    rows=None,
    base=None,
    scenario: str = "",
) -> PdpCurve:
    """Model response while one feature sweeps ``grid``.

    ``at_means``: a single profile with every other feature at ``base``
    (training means by default).  ``averaged``: classical partial dependence,
    averaging the response over ``rows``.
    """
    j = _resolve_feature(feature)
    grid = _check_grid(grid)
    f = _response(model)
    if mode == "at_means":
        b = _background(model, base)
        X = np.tile(b, (len(grid), 1))
        X[:, j] = grid
        values = f(X)
        bg = "training means" if base is None else "fixed profile"
    elif mode == "averaged":
        if rows is None:
            raise ConfigError("averaged partial dependence needs rows")
        R = rows.X if isinstance(rows, FeatureTable) else np.asarray(rows, dtype=float)
        stacked = np.repeat(R[None, :, :], len(grid), axis=0)
        stacked[:, :, j] = grid[:, None]
        values = f(stacked.reshape(-1, N_FEATURES)).reshape(len(grid), len(R)).mean(axis=1)
        bg = f"average over {len(R)} rows"
    else:
        raise ConfigError(f"unknown pdp mode {mode!r}")
    return PdpCurve(FEATURE_NAMES[j], grid, values, scenario, bg)


DEFAULT_DRIVE_GRID = np.round(np.arange(0, 141) * 0.5, 1)  # 0 .. 70 minutes


def _hospital_members(attribute, grouping):
    if isinstance(attribute, str) and attribute in grouping.names:
        members = dict(grouping.groups)[attribute]
    else:
        members = (_resolve_feature(attribute),)
    hosp = range(HOSPITAL_SLICE.start, HOSPITAL_SLICE.stop)
    if any(m not in hosp for m in members):
        raise ScopeError(f"{attribute!r} is not a hospital attribute")
    return members


def decay_scenarios(
    model: ModelArtifact,
    attribute,
    drive_grid=None,
    levels=("max", "mean", "min"),
    grouping: FeatureGrouping | None = None,
) -> list[PdpCurve]:
    """Drive-time decay curves with one hospital attribute (or group) at its training min / mean / max."""
    grouping = grouping or default_grouping()
    members = _hospital_members(attribute, grouping)
    grid = _check_grid(DEFAULT_DRIVE_GRID if drive_grid is None else drive_grid)
    stats = model.stats
    pick = {"min": stats.minimum, "mean": stats.mean, "max": stats.maximum}
    label = attribute if isinstance(attribute, str) else FEATURE_NAMES[attribute]
    curves = []
    for level in levels:
        if level not in pick:
            raise ConfigError(f"unknown level {level!r}")
        base = stats.mean.copy()
        base[list(members)] = pick[level][list(members)]
        c = pdp_curve(model, DRIVE_TIME, grid, "at_means", base=base, scenario=f"{label}={level}")
        c.background = "training means"
        curves.append(c)
    return curves


@dataclass
class InflectionReport:
    crossings: list = field(default_factory=list)  # [(abscissa, sign of a-b after crossing)]
    degenerate: bool = False

    @property
    def abscissas(self) -> list[float]:
        return [t for t, _ in self.crossings]

    def to_dict(self) -> dict:
        return {
            "crossings": [{"at": t, "sign_after": s} for t, s in self.crossings],
            "degenerate": self.degenerate,
        }


def _curve_arrays(c):
    if isinstance(c, PdpCurve):
        return c.grid, c.values
    grid, values = c
    return np.asarray(grid, dtype=float), np.asarray(values, dtype=float)


def find_inflection(curve_a, curve_b, atol: float = 0.0) -> InflectionReport:
    """Locate every sign change of ``a - b`` on their shared grid.

    Between adjacent grid points the crossing is placed by linear
    interpolation; zeros on grid points are reported there (a run of zeros
    at its midpoint) when the sign differs on either side.  Curves equal
    everywhere are flagged degenerate.  ``|a - b| <= atol`` counts as zero.
    """
    ga, va = _curve_arrays(curve_a)
    gb, vb = _curve_arrays(curve_b)
    if ga.shape != gb.shape or not np.array_equal(ga, gb):
        raise GridError("curves are defined on different grids")
    d = va - vb
    s = np.where(np.abs(d) <= atol, 0, np.sign(d)).astype(int)
    if np.all(s == 0):
        return InflectionReport([], True)
    crossings = []
    nz = np.flatnonzero(s)
    for i, j in zip(nz[:-1], nz[1:]):
        if s[i] == s[j]:
            continue
        if j == i + 1:
            t = ga[i] + (ga[j] - ga[i]) * d[i] / (d[i] - d[j])
        else:
            t = 0.5 * (ga[i + 1] + ga[j - 1])
        crossings.append((float(t), int(s[j])))
    return InflectionReport(crossings, False)


def scenario_inflections(curves, atol: float = 0.0) -> dict:
    """Crossings between every pair of scenario curves, keyed ``"a|b"``."""
    out = {}
    for i in range(len(curves)):
        for j in range(i + 1, len(curves)):
            key = f"{curves[i].scenario}|{curves[j].scenario}"
            out[key] = find_inflection(curves[i], curves[j], atol).to_dict()
    return out


def pdp_csv(curves) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "grid_value", "prediction"])
    for c in curves:
        for g, v in zip(c.grid, c.values):
            w.writerow([c.scenario or c.feature, repr(float(g)), repr(float(v))])
    return buf.getvalue()


def read_curves(path) -> dict[str, PdpCurve]:
    """Curves from a ``scenario,grid_value,prediction`` (or ``grid_value,prediction``) CSV."""
    curves = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "grid_value" not in cols or "prediction" not in cols:
            raise GridError(f"{path}: expected columns grid_value,prediction")
        for row in reader:
            name = row.get("scenario") or ""
            curves.setdefault(name, ([], []))
            curves[name][0].append(float(row["grid_value"]))
            curves[name][1].append(float(row["prediction"]))
    return {k: PdpCurve("drive_time_min", g, v, k) for k, (g, v) in curves.items()}


def inflections_json(result: dict) -> str:
    return json.dumps(result, indent=1, sort_keys=True)
