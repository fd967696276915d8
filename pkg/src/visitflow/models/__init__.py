"""Model families sharing one artifact type and one ``predict`` entry point."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..errors import ConfigError
from .artifact import FAMILIES, SOFTMAX, ModelArtifact, pair_response, predict
from .baseline import GbtConfig, OlsConfig, fit_gbt, fit_ols, ols_coefficients
from .hgnn import HeteroGraph, HgnnConfig, build_graph, fit_hgnn, fit_hgnn_table, graph_from_table
from .neural import DeepGravityConfig, MlpConfig, fit_deep_gravity, fit_mlp, recompute_training_loss

CONFIG_TYPES = {
    "ols": OlsConfig,
    "gbt": GbtConfig,
    "mlp": MlpConfig,
    "deep_gravity": DeepGravityConfig,
    "hgnn": HgnnConfig,
}


def make_config(family: str, overrides: dict | None = None):
    """Family config with ``overrides`` applied; unknown keys are rejected."""
    try:
        cls = CONFIG_TYPES[family]
    except KeyError:
        raise ConfigError(f"unknown model family {family!r}; choose from {', '.join(FAMILIES)}") from None
    overrides = dict(overrides or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"model.{unknown[0]}: unknown hyperparameter for {family}")
    for k, v in overrides.items():
        if isinstance(v, list):
            overrides[k] = tuple(v)
    cfg = cls(**overrides)
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg


@dataclass
class ModelSpec:
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.config = make_config(self.family, self.params)

    @property
    def simplex(self) -> bool:
        return getattr(self.config, "objective", None) == SOFTMAX

    def to_dict(self) -> dict:
        return {"family": self.family, "config": asdict(self.config)}

    def fit(self, rows, seed: int | None = None) -> ModelArtifact:
        cfg = self.config
        if seed is not None and hasattr(cfg, "seed"):
            cfg = type(cfg)(**{**asdict(cfg), "seed": seed})
        if self.family == "ols":
            return fit_ols(rows, cfg.ridge_eps)
        if self.family == "gbt":
            return fit_gbt(rows, cfg, seed=0 if seed is None else seed)
        if self.family == "mlp":
            return fit_mlp(rows, cfg)
        if self.family == "deep_gravity":
            return fit_deep_gravity(rows, None, cfg)
        return fit_hgnn_table(rows, cfg)


__all__ = [
    "FAMILIES",
    "ModelArtifact",
    "ModelSpec",
    "make_config",
    "predict",
    "pair_response",
    "fit_ols",
    "fit_gbt",
    "fit_mlp",
    "fit_deep_gravity",
    "fit_hgnn",
    "fit_hgnn_table",
    "build_graph",
    "graph_from_table",
    "HeteroGraph",
    "OlsConfig",
    "GbtConfig",
    "MlpConfig",
    "DeepGravityConfig",
    "HgnnConfig",
    "ols_coefficients",
    "recompute_training_loss",
]
