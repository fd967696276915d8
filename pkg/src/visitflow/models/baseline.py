"""Least-squares baseline and gradient-boosted regression trees."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..domain import FeatureStats, FeatureTable, standardize
from ..errors import ConfigError, InsufficientDataError
from .artifact import ModelArtifact, register


@dataclass
class OlsConfig:
    ridge_eps: float = 1e-8


def fit_ols(rows: FeatureTable, ridge_eps: float = 1e-8) -> ModelArtifact:
    """Ordinary least squares on standardized features plus an intercept.

    Constant features are left out of the solve (coefficient 0).  When the
    normal matrix is rank deficient or badly conditioned, ``ridge_eps * n`` is
    added to its diagonal and ``metadata["singular"]`` is set.
    """
    if len(rows) < 2:
        raise InsufficientDataError(f"OLS needs at least 2 rows, got {len(rows)}")
    stats = FeatureStats.fit(rows.X)
    Z = standardize(rows.X, stats)
    active = np.flatnonzero(~stats.constant)
    y = rows.y
    y_mean = y.mean()
    Za = Z[:, active]
    gram = Za.T @ Za
    rhs = Za.T @ (y - y_mean)
    singular = False
    if len(active):
        rank = np.linalg.matrix_rank(gram)
        singular = rank < len(active) or np.linalg.cond(gram) > 1e12
    if singular:
        gram = gram + ridge_eps * len(y) * np.eye(len(active))
    coef = np.zeros(Z.shape[1])
    if len(active):
        coef[active] = np.linalg.solve(gram, rhs)
    meta = {
        "ridge_eps": ridge_eps,
        "ridge_applied": bool(singular),
        "singular": bool(singular),
        "n_rows": len(y),
        "constant_features": np.flatnonzero(stats.constant).tolist(),
    }
    return ModelArtifact("ols", {"coef": coef, "intercept": np.array([y_mean])}, stats, meta)


def ols_coefficients(artifact: ModelArtifact) -> tuple[float, np.ndarray]:
    """Intercept and slopes expressed in raw feature units."""
    coef = artifact.params["coef"]
    scale = np.where(artifact.stats.constant, 1.0, artifact.stats.std)
    raw = np.where(artifact.stats.constant, 0.0, coef / scale)
    intercept = float(artifact.params["intercept"][0] - np.dot(raw, artifact.stats.mean))
    return intercept, raw


def _score_ols(artifact, table_std):
    return table_std.X @ artifact.params["coef"] + artifact.params["intercept"][0]


register("ols", _score_ols)


@dataclass
class GbtConfig:
    n_stages: int = 300
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 5

    def validate(self):
        if self.n_stages < 1:
            raise ConfigError("n_stages must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")
        return self


def _node_split(Xt, r, sorted_idx, min_leaf):
    """Exact greedy search over one node.

    ``sorted_idx[f]`` lists the node's rows in ascending order of feature
    ``f``.  Returns ``(gain, feature, threshold)`` or ``None`` when no split
    has positive gain.  Ties resolve to the lowest feature index, then the
    lowest threshold.
    """
    n = len(sorted_idx[0])
    if n < 2 * min_leaf:
        return None
    total = r[sorted_idx[0]].sum()
    lo, hi = min_leaf - 1, n - min_leaf  # split after positions lo..hi-1
    n_left = np.arange(lo + 1, hi + 1, dtype=float)
    n_right = n - n_left
    base = total * total / n
    best = None
    for f, idx in enumerate(sorted_idx):
        xs = Xt[f, idx]
        csum = np.cumsum(r[idx])
        sl = csum[lo:hi]
        valid = xs[lo + 1 : hi + 1] > xs[lo:hi]
        if not valid.any():
            continue
        sr = total - sl
        gain = np.where(valid, sl * sl / n_left + sr * sr / n_right - base, -np.inf)
        j = int(np.argmax(gain))
        g = gain[j]
        if g > 0 and (best is None or g > best[0]):
            best = (float(g), f, 0.5 * (xs[lo + j] + xs[lo + j + 1]))
    return best


def _fit_tree(Xt, r, orders, max_depth, min_leaf):
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    node_of_row = np.zeros(len(r), dtype=np.intp)
    frontier = {0: orders}
    for _ in range(max_depth):
        new_frontier = {}
        for node, sorted_idx in frontier.items():
            split = _node_split(Xt, r, sorted_idx, min_leaf)
            if split is None:
                continue
            _, f, t = split
            lc, rc = len(feature), len(feature) + 1
            feature += [-1, -1]
            threshold += [0.0, 0.0]
            left += [-1, -1]
            right += [-1, -1]
            value += [0.0, 0.0]
            feature[node], threshold[node], left[node], right[node] = f, t, lc, rc
            rows = sorted_idx[0]
            goes_left = Xt[f, rows] <= t
            node_of_row[rows[goes_left]] = lc
            node_of_row[rows[~goes_left]] = rc
            mask = node_of_row == lc
            new_frontier[lc] = [idx[mask[idx]] for idx in sorted_idx]
            new_frontier[rc] = [idx[~mask[idx]] for idx in sorted_idx]
        if not new_frontier:
            break
        frontier = new_frontier
    leaf_sum = np.bincount(node_of_row, weights=r, minlength=len(feature))
    leaf_n = np.bincount(node_of_row, minlength=len(feature))
    vals = np.array(value)
    has = leaf_n > 0
    vals[has] = leaf_sum[has] / leaf_n[has]
    return (
        np.array(feature, dtype=np.int64),
        np.array(threshold),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        vals,
        node_of_row,
    )


def fit_gbt(rows: FeatureTable, config: GbtConfig = GbtConfig(), seed: int = 0) -> ModelArtifact:
    """Stagewise boosting of squared-error regression trees.

    Trees are grown depth by depth with exact greedy axis-aligned splits; no
    row or column subsampling is used, so ``seed`` only labels the artifact.
    """
    config = GbtConfig(**asdict(config)).validate()
    if len(rows) < 1:
        raise InsufficientDataError("GBT needs at least 1 row")
    stats = FeatureStats.fit(rows.X)
    X = standardize(rows.X, stats)
    y = rows.y
    init = float(y.mean())
    pred = np.full(len(y), init)
    Xt = np.ascontiguousarray(X.T)
    orders = [np.argsort(Xt[f], kind="stable") for f in range(X.shape[1])]
    trees = []
    mse = []
    for _ in range(config.n_stages):
        r = y - pred
        feat, thr, lc, rc, val, leaf_of_row = _fit_tree(Xt, r, orders, config.max_depth, config.min_samples_leaf)
        val = config.learning_rate * val
        pred = pred + val[leaf_of_row]
        trees.append((feat, thr, lc, rc, val))
        d = y - pred
        mse.append(float(np.dot(d, d) / len(d)))
    offsets = np.cumsum([0] + [len(t[0]) for t in trees])
    params = {
        "init": np.array([init]),
        "feature": np.concatenate([t[0] for t in trees]),
        "threshold": np.concatenate([t[1] for t in trees]),
        "left": np.concatenate([t[2] for t in trees]),
        "right": np.concatenate([t[3] for t in trees]),
        "value": np.concatenate([t[4] for t in trees]),
        "offsets": offsets.astype(np.int64),
    }
    meta = {"config": asdict(config), "seed": seed, "train_mse": mse, "max_depth": config.max_depth}
    return ModelArtifact("gbt", params, stats, meta)


def _score_gbt(artifact, table_std):
    p = artifact.params
    X = table_std.X
    out = np.full(len(X), p["init"][0])
    rows = np.arange(len(X))
    depth = int(artifact.metadata["max_depth"])
    offsets = p["offsets"]
    for t in range(len(offsets) - 1):
        base = offsets[t]
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(depth):
            f = p["feature"][base + node]
            internal = f >= 0
            if not internal.any():
                break
            go_left = X[rows, np.where(internal, f, 0)] <= p["threshold"][base + node]
            nxt = np.where(go_left, p["left"][base + node], p["right"][base + node])
            node = np.where(internal, nxt, node)
        out += p["value"][base + node]
    return out


register("gbt", _score_gbt)
