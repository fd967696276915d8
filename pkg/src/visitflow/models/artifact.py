"""Trained-model container, serialization, and family dispatch."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..domain import (
    DRIVE_TIME,
    HOSPITAL_SLICE,
    N_FEATURES,
    FeatureStats,
    FeatureTable,
    origin_groups,
    standardize,
)
from ..errors import ConfigError, ShapeError
from ..nn import grouped_softmax

FORMAT = "visitflow-model"
FORMAT_VERSION = 1

FAMILIES = ("ols", "gbt", "mlp", "deep_gravity", "hgnn")
SOFTMAX = "per_origin_softmax_ce"


@dataclass(eq=False)
class ModelArtifact:
    family: str
    params: dict
    stats: FeatureStats
    metadata: dict = field(default_factory=dict)

    @property
    def simplex(self) -> bool:
        """True when predictions are shares normalized within each origin."""
        return self.metadata.get("objective") == SOFTMAX

    def to_json(self) -> str:
        payload = {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "family": self.family,
            "params": {
                k: {"dtype": str(v.dtype), "shape": list(v.shape), "data": v.reshape(-1).tolist()}
                for k, v in sorted(self.params.items())
            },
            "stats": self.stats.to_dict(),
            "metadata": _clean(self.metadata),
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text) -> ModelArtifact:
        payload = json.loads(text)
        if payload.get("format") != FORMAT:
            raise ConfigError("not a visitflow model file")
        if payload.get("version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported model format version {payload.get('version')}")
        params = {
            k: np.asarray(v["data"], dtype=v["dtype"]).reshape(v["shape"]) for k, v in payload["params"].items()
        }
        return cls(payload["family"], params, FeatureStats.from_dict(payload["stats"]), payload["metadata"])

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> ModelArtifact:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# family -> scorer(artifact, standardized table) returning raw per-row outputs
_SCORERS = {}


def register(family, scorer):
    _SCORERS[family] = scorer


def _raw_scores(artifact, table_std):
    try:
        scorer = _SCORERS[artifact.family]
    except KeyError:
        raise ConfigError(f"unknown model family {artifact.family!r}") from None
    return scorer(artifact, table_std)


def _as_table(rows):
    if isinstance(rows, FeatureTable):
        return rows
    X = np.asarray(rows, dtype=float)
    if X.ndim == 1:
        X = X[None, :] if X.size else X.reshape(0, N_FEATURES)
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise ShapeError(f"expected rows with {N_FEATURES} features, got shape {X.shape}")
    n = len(X)
    ids = np.array([f"row{i}" for i in range(n)], dtype=object)
    return FeatureTable(ids, ids.copy(), X, np.zeros(n))


def predict(artifact: ModelArtifact, rows) -> np.ndarray:
    """Predicted shares, one per row, in input order.

    For simplex families the shares are normalized over the rows of each
    origin present in ``rows``, so pass each origin's full candidate set.
    A bare array is treated as rows sharing no origin.
    """
    table = _as_table(rows)
    if table.X.shape[1] != N_FEATURES:
        raise ShapeError(f"expected {N_FEATURES} features, got {table.X.shape[1]}")
    if len(table) == 0:
        return np.zeros(0)
    table_std = standardize(table, artifact.stats)
    scores = _raw_scores(artifact, table_std)
    if not artifact.simplex:
        return scores
    order, starts = origin_groups(table.origin_ids)
    out = np.empty_like(scores)
    out[order] = grouped_softmax(scores[order], starts)
    return out


def reference_competitors(X_raw, stats: FeatureStats) -> np.ndarray:
    """Average competing hospital at average drive time, seen from each row's zone."""
    C = np.array(X_raw, dtype=float, copy=True)
    C[:, HOSPITAL_SLICE] = stats.mean[HOSPITAL_SLICE]
    C[:, DRIVE_TIME] = stats.mean[DRIVE_TIME]
    return C


def pair_response(artifact: ModelArtifact, X_raw) -> np.ndarray:
    """Row-wise model response used by Shapley and partial-dependence analysis.

    Point-prediction families return their prediction.  Simplex families
    return the share a pair would win against ``K`` average competitors
    (:func:`reference_competitors`), ``K`` being the mean choice-set size seen
    in training minus one: ``1 / (1 + K exp(s_ref - s))``.
    """
    X_raw = np.asarray(X_raw, dtype=float)
    if X_raw.ndim == 1:
        X_raw = X_raw[None, :]
    if X_raw.shape[1] != N_FEATURES:
        raise ShapeError(f"expected {N_FEATURES} features, got {X_raw.shape[1]}")
    n = len(X_raw)
    if n == 0:
        return np.zeros(0)
    if not artifact.simplex:
        return _raw_scores(artifact, _as_table(standardize(X_raw, artifact.stats)))
    competitors = reference_competitors(X_raw, artifact.stats)
    both = np.vstack([X_raw, competitors])
    ids = np.array([f"q{i}" for i in range(n)] * 2, dtype=object)
    hids = np.array([f"x{i}" for i in range(n)] + [f"ref{i}" for i in range(n)], dtype=object)
    table = FeatureTable(ids, hids, standardize(both, artifact.stats), np.zeros(2 * n))
    s = _raw_scores(artifact, table)
    k = float(artifact.metadata.get("reference_competitors", 0.0))
    if k <= 0:
        return np.ones(n)
    gap = np.clip(s[n:] - s[:n], -700.0, 700.0)
    return 1.0 / (1.0 + k * np.exp(gap))
