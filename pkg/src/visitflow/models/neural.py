"""Multilayer perceptron and Deep Gravity encoder-decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..domain import (
    DRIVE_TIME,
    HOSPITAL_FEATURES,
    HOSPITAL_SLICE,
    ZONE_FEATURES,
    ZONE_SLICE,
    FeatureStats,
    FeatureTable,
    origin_groups,
    standardize,
)
from ..errors import CandidateError, ConfigError, InsufficientDataError
from ..nn import MLP, Adam, grouped_softmax_ce, mse_loss, train_epochs
from .artifact import SOFTMAX, ModelArtifact, register

OBJECTIVES = (SOFTMAX, "mse")


@dataclass
class MlpConfig:
    hidden_sizes: tuple = (64, 32)
    activation: str = "relu"
    epochs: int = 800
    batch_size: int = 256
    learning_rate: float = 1e-3
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        return self


@dataclass
class DeepGravityConfig:
    origin_encoder: tuple = (32,)
    destination_encoder: tuple = (32,)
    distance_encoder: tuple = (8,)
    decoder: tuple = (64, 32)
    activation: str = "relu"
    epochs: int = 400
    batch_origins: int = 32
    learning_rate: float = 1e-3
    objective: str = SOFTMAX
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        for name in ("origin_encoder", "destination_encoder", "distance_encoder"):
            if len(getattr(self, name)) < 1:
                raise ConfigError(f"{name} needs at least one layer")
        if self.batch_origins < 1:
            raise ConfigError("batch_origins must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        return self


def validation_split(n, fraction, seed):
    """Seeded (train, val) index split; the validation part is never empty unless ``fraction`` is 0."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n))
    if fraction > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    else:
        n_val = 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class MlpNet:
    def __init__(self, cfg: MlpConfig, n_in):
        self.body = MLP("mlp", [n_in, *cfg.hidden_sizes, 1], cfg.activation)

    def init(self, rng):
        return self.body.init(rng, {})

    def forward(self, params, Z, trace=None):
        out, cache = self.body.forward(params, Z, trace)
        return out[:, 0], cache

    def backward(self, params, cache, dscore):
        grads = {}
        self.body.backward(params, cache, dscore[:, None], grads)
        return grads


class DeepGravityNet:
    """Separate encoders for zone, hospital and drive time; concatenation; decoder to a score."""

    def __init__(self, cfg: DeepGravityConfig):
        act = cfg.activation
        self.enc_o = MLP("enc_origin", [len(ZONE_FEATURES), *cfg.origin_encoder], act, final_activation=True)
        self.enc_d = MLP("enc_dest", [len(HOSPITAL_FEATURES), *cfg.destination_encoder], act, final_activation=True)
        self.enc_t = MLP("enc_dist", [1, *cfg.distance_encoder], act, final_activation=True)
        width = self.enc_o.out_dim + self.enc_d.out_dim + self.enc_t.out_dim
        self.dec = MLP("decoder", [width, *cfg.decoder, 1], act)
        self.widths = (self.enc_o.out_dim, self.enc_d.out_dim, self.enc_t.out_dim)

    def init(self, rng):
        params = {}
        for block in (self.enc_o, self.enc_d, self.enc_t, self.dec):
            block.init(rng, params)
        return params

    def forward(self, params, Z, trace=None):
        eo, co = self.enc_o.forward(params, Z[:, ZONE_SLICE], trace)
        ed, cd = self.enc_d.forward(params, Z[:, HOSPITAL_SLICE], trace)
        et, ct = self.enc_t.forward(params, Z[:, DRIVE_TIME : DRIVE_TIME + 1], trace)
        out, cdec = self.dec.forward(params, np.hstack([eo, ed, et]), trace)
        return out[:, 0], (co, cd, ct, cdec)

    def backward(self, params, cache, dscore):
        co, cd, ct, cdec = cache
        grads = {}
        dh = self.dec.backward(params, cdec, dscore[:, None], grads)
        a, b, _ = self.widths
        self.enc_o.backward(params, co, dh[:, :a], grads)
        self.enc_d.backward(params, cd, dh[:, a : a + b], grads)
        self.enc_t.backward(params, ct, dh[:, a + b :], grads)
        return grads


def _curves_meta(train_curve, val_curve):
    return {
        "loss_curve": {"train": train_curve, "val": val_curve},
        "final_train_loss": train_curve[-1],
        "final_val_loss": val_curve[-1],
    }


def fit_mlp(rows: FeatureTable, config: MlpConfig = MlpConfig()) -> ModelArtifact:
    """Fully connected regressor of share on all 22 standardized features (MSE, Adam)."""
    config = MlpConfig(**asdict(config)).validate()
    if len(rows) == 0:
        raise InsufficientDataError("MLP needs at least one row")
    stats = FeatureStats.fit(rows.X)
    Z = standardize(rows.X, stats)
    y = rows.y
    tr, va = validation_split(len(y), config.val_fraction, config.seed)
    rng = np.random.default_rng(config.seed)
    net = MlpNet(config, Z.shape[1])
    params = net.init(rng)

    def step(params, idx):
        pred, cache = net.forward(params, Z[idx])
        loss, d = mse_loss(pred, y[idx])
        return loss, net.backward(params, cache, d)

    def batches(rng):
        perm = tr[rng.permutation(len(tr))]
        for i in range(0, len(perm), config.batch_size):
            yield perm[i : i + config.batch_size]

    def full_loss(idx):
        return lambda p: mse_loss(net.forward(p, Z[idx])[0], y[idx])[0]

    train_curve, val_curve = train_epochs(
        params, step, batches, config.epochs, Adam(config.learning_rate), full_loss(tr),
        full_loss(va) if len(va) else None, rng,
    )
    meta = {
        "config": asdict(config),
        "seed": config.seed,
        "objective": "mse",
        "n_train": len(tr),
        "n_val": len(va),
        "assumptions": ["optimizer, batch size and hidden widths are free choices, recorded here"],
        **_curves_meta(train_curve, val_curve),
    }
    return ModelArtifact("mlp", params, stats, meta)


def _score_mlp(artifact, table_std):
    cfg = MlpConfig(**_tuples(artifact.metadata["config"]))
    return MlpNet(cfg, table_std.X.shape[1]).forward(artifact.params, table_std.X)[0]


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


register("mlp", _score_mlp)


class _GroupedData:
    """Rows ordered so that each origin forms a contiguous segment."""

    def __init__(self, Z, y, origin_ids):
        order, starts = origin_groups(origin_ids)
        self.Z = Z[order]
        self.y = y[order]
        self.starts = starts
        self.ends = np.r_[starts[1:], len(order)]
        self.n_groups = len(starts)

    def rows_for(self, groups):
        """Row indices and segment starts for a subset of groups (in the order given)."""
        lengths = self.ends[groups] - self.starts[groups]
        idx = np.concatenate([np.arange(self.starts[g], self.ends[g]) for g in groups]) if len(groups) else np.zeros(0, int)
        seg_starts = np.r_[0, np.cumsum(lengths)[:-1]].astype(np.intp) if len(groups) else np.zeros(0, np.intp)
        return idx, seg_starts


def objective_loss(objective, scores, y, starts):
    if objective == SOFTMAX:
        return grouped_softmax_ce(scores, y, starts)
    return mse_loss(scores, y)


def fit_deep_gravity(
    rows: FeatureTable, candidates=None, config: DeepGravityConfig = DeepGravityConfig()
) -> ModelArtifact:
    """Deep Gravity: encode zone, hospital and drive time separately, decode a pair score.

    In softmax mode each origin's scores are turned into shares over the rows
    present for that origin, which must cover its candidate destinations
    (``candidates``: mapping origin -> iterable of hospital ids; defaults to
    the rows given).  Targets are renormalized within each origin.  In mse mode
    the raw score regresses the share directly.
    """
    config = DeepGravityConfig(**asdict(config)).validate()
    if len(rows) == 0:
        raise CandidateError("no rows to train on")
    present = {}
    for o, h in zip(rows.origin_ids.tolist(), rows.hospital_ids.tolist()):
        present.setdefault(o, set()).add(h)
    if candidates is not None:
        for o, cand in candidates.items():
            cand = set(cand)
            if not cand:
                raise CandidateError(f"origin {o!r} has an empty candidate set")
            missing = cand - present.get(o, set())
            if config.objective == SOFTMAX and missing:
                raise CandidateError(f"origin {o!r} rows miss {len(missing)} candidate destination(s)")
    set_sizes = np.array([len(v) for v in present.values()])
    trivial = int((set_sizes == 1).sum())

    stats = FeatureStats.fit(rows.X)
    Z = standardize(rows.X, stats)
    data = _GroupedData(Z, rows.y, rows.origin_ids)
    tr, va = validation_split(data.n_groups, config.val_fraction, config.seed)
    rng = np.random.default_rng(config.seed)
    net = DeepGravityNet(config)
    params = net.init(rng)

    def step(params, groups):
        idx, starts = data.rows_for(groups)
        scores, cache = net.forward(params, data.Z[idx])
        loss, d = objective_loss(config.objective, scores, data.y[idx], starts)
        return loss, net.backward(params, cache, d)

    def batches(rng):
        perm = tr[rng.permutation(len(tr))]
        for i in range(0, len(perm), config.batch_origins):
            yield perm[i : i + config.batch_origins]

    def full_loss(groups):
        idx, starts = data.rows_for(groups)

        def f(p):
            return objective_loss(config.objective, net.forward(p, data.Z[idx])[0], data.y[idx], starts)[0]

        return f

    train_curve, val_curve = train_epochs(
        params, step, batches, config.epochs, Adam(config.learning_rate), full_loss(tr),
        full_loss(va) if len(va) else None, rng,
    )
    meta = {
        "config": asdict(config),
        "seed": config.seed,
        "objective": config.objective,
        "n_train_origins": len(tr),
        "n_val_origins": len(va),
        "reference_competitors": float(set_sizes.mean()) - 1.0,
        "single_candidate_origins": trivial,
        "assumptions": [
            "loss, encoder widths and optimizer are free choices, recorded here",
            "unobserved candidate pairs enter softmax training with share 0",
        ],
        **_curves_meta(train_curve, val_curve),
    }
    return ModelArtifact("deep_gravity", params, stats, meta)


def _score_deep_gravity(artifact, table_std):
    cfg = DeepGravityConfig(**_tuples(artifact.metadata["config"]))
    return DeepGravityNet(cfg).forward(artifact.params, table_std.X)[0]


register("deep_gravity", _score_deep_gravity)


def recompute_training_loss(artifact: ModelArtifact, rows: FeatureTable) -> float:
    """Full-batch loss of a frozen neural artifact on the training portion of ``rows``."""
    cfg = artifact.metadata["config"]
    Z = standardize(rows.X, artifact.stats)
    if artifact.family == "mlp":
        tr, _ = validation_split(len(rows), cfg["val_fraction"], cfg["seed"])
        net = MlpNet(MlpConfig(**_tuples(cfg)), Z.shape[1])
        pred = net.forward(artifact.params, Z[tr])[0]
        return mse_loss(pred, rows.y[tr])[0]
    data = _GroupedData(Z, rows.y, rows.origin_ids)
    tr, _ = validation_split(data.n_groups, cfg["val_fraction"], cfg["seed"])
    idx, starts = data.rows_for(tr)
    net = DeepGravityNet(DeepGravityConfig(**_tuples(cfg)))
    scores = net.forward(artifact.params, data.Z[idx])[0]
    return objective_loss(cfg["objective"], scores, data.y[idx], starts)[0]
