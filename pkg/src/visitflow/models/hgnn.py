"""Heterogeneous bipartite graph network over zones and hospitals.

Zones and hospitals are two node types; every candidate pair contributes a
zone->hospital edge and its mirror, both carrying the drive time.  Per-type
encoders produce initial embeddings, mean-aggregation (GraphSAGE-style)
convolutions mix them across the bipartite graph, and each pair is scored by
a head applied to ``[w_B * zone, w_H * hospital, w_D * enc(drive time)]``.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from ..domain import (
    DRIVE_TIME,
    HOSPITAL_FEATURES,
    HOSPITAL_SLICE,
    N_FEATURES,
    ZONE_FEATURES,
    ZONE_SLICE,
    FeatureStats,
    FeatureTable,
    ODDataset,
)
from ..errors import ConfigError, CoverageError, InsufficientDataError, ShapeError
from ..nn import MLP, Adam, train_epochs
from .artifact import SOFTMAX, ModelArtifact, register
from .neural import OBJECTIVES, _tuples, objective_loss, validation_split


@dataclass
class HgnnConfig:
    zone_encoder: tuple = (32,)
    hospital_encoder: tuple = (32,)
    distance_encoder: tuple = (8,)
    conv_size: int = 32
    n_conv_layers: int = 2
    weight_B: float = 1.0
    weight_H: float = 1.0
    weight_D: float = 4.0
    head: tuple = (32,)
    activation: str = "relu"
    epochs: int = 400
    batch_origins: int = 32
    learning_rate: float = 1e-3
    objective: str = SOFTMAX
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        w = (self.weight_B, self.weight_H, self.weight_D)
        if min(w) < 0 or max(w) == 0:
            raise ConfigError("fusion weights must be >= 0 and not all zero")
        if self.n_conv_layers < 1:
            raise ConfigError("n_conv_layers must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.conv_size < 1:
            raise ConfigError("conv_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        return self


@dataclass(eq=False)
class HeteroGraph:
    """Bipartite zone/hospital graph.

    Edge ``e`` joins zone ``edge_zone[e]`` and hospital ``edge_hospital[e]``
    in both directions; ``edge_weight`` is its multiplicity in mean
    aggregation.
    """

    zone_ids: np.ndarray
    hospital_ids: np.ndarray
    zone_X: np.ndarray
    hospital_X: np.ndarray
    edge_zone: np.ndarray
    edge_hospital: np.ndarray
    edge_time: np.ndarray
    edge_weight: np.ndarray = None

    def __post_init__(self):
        if self.edge_weight is None:
            self.edge_weight = np.ones(len(self.edge_zone))
        nz, nh = len(self.zone_ids), len(self.hospital_ids)
        if self.zone_X.shape != (nz, len(ZONE_FEATURES)) or self.hospital_X.shape != (nh, len(HOSPITAL_FEATURES)):
            raise ShapeError("node feature matrices do not match node counts")
        e = len(self.edge_zone)
        if not (len(self.edge_hospital) == len(self.edge_time) == len(self.edge_weight) == e):
            raise ShapeError("edge arrays differ in length")
        if e and (
            self.edge_zone.min() < 0 or self.edge_zone.max() >= nz
            or self.edge_hospital.min() < 0 or self.edge_hospital.max() >= nh
        ):
            raise ShapeError("edge endpoint out of range")

    @property
    def n_edges(self):
        return len(self.edge_zone)

    def adjacency(self):
        """Row-normalized mean-aggregation operators (zone<-hospital, hospital<-zone)."""
        nz, nh = len(self.zone_ids), len(self.hospital_ids)
        w = self.edge_weight
        a_zh = sp.csr_matrix((w, (self.edge_zone, self.edge_hospital)), shape=(nz, nh))
        a_hz = sp.csr_matrix((w, (self.edge_hospital, self.edge_zone)), shape=(nh, nz))
        return _row_normalize(a_zh), _row_normalize(a_hz)

    def edge_rows(self) -> np.ndarray:
        """Raw 22-feature rows implied by each edge."""
        return np.hstack(
            [self.hospital_X[self.edge_hospital], self.zone_X[self.edge_zone], self.edge_time[:, None]]
        ).reshape(-1, N_FEATURES)

    def dump(self, nodes_path, edges_path):
        with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "type"])
            w.writerows([z, "zone"] for z in self.zone_ids)
            w.writerows([h, "hospital"] for h in self.hospital_ids)
        with open(edges_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["src", "dst", "drive_time_min"])
            for zi, hi, t in zip(self.edge_zone, self.edge_hospital, self.edge_time):
                w.writerow([self.zone_ids[zi], self.hospital_ids[hi], repr(float(t))])
            for zi, hi, t in zip(self.edge_zone, self.edge_hospital, self.edge_time):
                w.writerow([self.hospital_ids[hi], self.zone_ids[zi], repr(float(t))])


def _row_normalize(a):
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
    return sp.diags(inv) @ a


def build_graph(dataset: ODDataset, candidate_rule="all_pairs") -> HeteroGraph:
    """Graph over every zone and hospital of ``dataset``.

    ``candidate_rule`` is ``"all_pairs"``, ``"observed"`` (flow pairs only) or
    a predicate ``(zone_id, hospital_id) -> bool``.
    """
    zone_ids = [z.zone_id for z in dataset.zones]
    hospital_ids = [h.hospital_id for h in dataset.hospitals]
    if candidate_rule == "all_pairs":
        pairs = [(i, j) for i in range(len(zone_ids)) for j in range(len(hospital_ids))]
    elif candidate_rule == "observed":
        zi, hi = dataset.zone_index, dataset.hospital_index
        pairs = [(zi[f.origin_zone_id], hi[f.hospital_id]) for f in dataset.flows]
    elif callable(candidate_rule):
        pairs = [
            (i, j)
            for i, z in enumerate(zone_ids)
            for j, h in enumerate(hospital_ids)
            if candidate_rule(z, h)
        ]
    else:
        raise ConfigError(f"unknown candidate rule {candidate_rule!r}")
    times = np.empty(len(pairs))
    for k, (i, j) in enumerate(pairs):
        key = (zone_ids[i], hospital_ids[j])
        if key not in dataset.drive_time:
            raise CoverageError(*key)
        times[k] = dataset.drive_time[key]
    e = np.array(pairs, dtype=np.intp).reshape(-1, 2)
    return HeteroGraph(
        np.array(zone_ids, dtype=object),
        np.array(hospital_ids, dtype=object),
        dataset.zone_matrix,
        dataset.hospital_matrix,
        e[:, 0],
        e[:, 1],
        times,
    )


def graph_from_table(table: FeatureTable) -> HeteroGraph:
    """One edge per row, nodes in order of first appearance; edge ``k`` is row ``k``."""
    zone_codes, zone_first = _first_codes(table.origin_ids)
    hosp_codes, hosp_first = _first_codes(table.hospital_ids)
    return HeteroGraph(
        table.origin_ids[zone_first],
        table.hospital_ids[hosp_first],
        table.X[zone_first][:, ZONE_SLICE],
        table.X[hosp_first][:, HOSPITAL_SLICE],
        zone_codes,
        hosp_codes,
        table.X[:, DRIVE_TIME].copy(),
    )


def _first_codes(ids):
    seen = {}
    codes = np.empty(len(ids), dtype=np.intp)
    first = []
    for k, v in enumerate(ids.tolist()):
        c = seen.get(v)
        if c is None:
            c = seen[v] = len(first)
            first.append(k)
        codes[k] = c
    return codes, np.array(first, dtype=np.intp)


def _standardized_parts(graph, stats):
    scale = np.where(stats.constant, 1.0, stats.std)

    def z(block, sl):
        out = (block - stats.mean[sl]) / scale[sl]
        return np.where(stats.constant[sl], 0.0, out)

    t = (graph.edge_time - stats.mean[DRIVE_TIME]) / scale[DRIVE_TIME]
    t = np.zeros_like(t) if stats.constant[DRIVE_TIME] else t
    return z(graph.zone_X, ZONE_SLICE), z(graph.hospital_X, HOSPITAL_SLICE), t


class HgnnNet:
    def __init__(self, cfg: HgnnConfig):
        act = cfg.activation
        self.cfg = cfg
        self.enc_z = MLP("enc_zone", [len(ZONE_FEATURES), *cfg.zone_encoder], act, final_activation=True)
        self.enc_h = MLP("enc_hosp", [len(HOSPITAL_FEATURES), *cfg.hospital_encoder], act, final_activation=True)
        self.enc_t = MLP("enc_dist", [1, *cfg.distance_encoder], act, final_activation=True)
        c = cfg.conv_size
        self.head = MLP("head", [2 * c + self.enc_t.out_dim, *cfg.head, 1], act)
        self.dims = []
        dz, dh = self.enc_z.out_dim, self.enc_h.out_dim
        for _ in range(cfg.n_conv_layers):
            self.dims.append((dz, dh))
            dz = dh = c
        self.fusion = (cfg.weight_B, cfg.weight_H, cfg.weight_D)

    def init(self, rng):
        params = {}
        for block in (self.enc_z, self.enc_h, self.enc_t, self.head):
            block.init(rng, params)
        c = self.cfg.conv_size
        for l, (dz, dh) in enumerate(self.dims):
            params[f"conv{l}.zs"] = rng.normal(0, np.sqrt(1.0 / dz), size=(dz, c))
            params[f"conv{l}.zn"] = rng.normal(0, np.sqrt(1.0 / dh), size=(dh, c))
            params[f"conv{l}.zb"] = np.zeros(c)
            params[f"conv{l}.hs"] = rng.normal(0, np.sqrt(1.0 / dh), size=(dh, c))
            params[f"conv{l}.hn"] = rng.normal(0, np.sqrt(1.0 / dz), size=(dz, c))
            params[f"conv{l}.hb"] = np.zeros(c)
        return params

    def _act(self, a, trace):
        if self.cfg.activation == "relu":
            if trace is not None:
                trace.append(a > 0)
            return np.maximum(a, 0.0)
        if self.cfg.activation == "tanh":
            return np.tanh(a)
        return a

    def _dact(self, g, out):
        if self.cfg.activation == "relu":
            return g * (out > 0)
        if self.cfg.activation == "tanh":
            return g * (1.0 - out * out)
        return g

    def forward_nodes(self, params, Zz, Zh, a_zh, a_hz, trace=None):
        z, cz = self.enc_z.forward(params, Zz, trace)
        h, ch = self.enc_h.forward(params, Zh, trace)
        layers = []
        for l in range(len(self.dims)):
            mz = a_zh @ h
            mh = a_hz @ z
            z_new = self._act(z @ params[f"conv{l}.zs"] + mz @ params[f"conv{l}.zn"] + params[f"conv{l}.zb"], trace)
            h_new = self._act(h @ params[f"conv{l}.hs"] + mh @ params[f"conv{l}.hn"] + params[f"conv{l}.hb"], trace)
            layers.append((z, h, mz, mh, z_new, h_new))
            z, h = z_new, h_new
        return z, h, (cz, ch, layers)

    def forward_edges(self, params, z, h, e_z, e_h, t, trace=None):
        T, ct = self.enc_t.forward(params, t[:, None], trace)
        wb, wh, wd = self.fusion
        rep = np.hstack([wb * z[e_z], wh * h[e_h], wd * T])
        out, chead = self.head.forward(params, rep, trace)
        return out[:, 0], (ct, chead, e_z, e_h, z.shape, h.shape)

    def backward_edges(self, params, cache, dscore, grads):
        ct, chead, e_z, e_h, zshape, hshape = cache
        drep = self.head.backward(params, chead, dscore[:, None], grads)
        wb, wh, wd = self.fusion
        c1, c2 = zshape[1], zshape[1] + hshape[1]
        dz = _scatter(e_z, wb * drep[:, :c1], zshape[0])
        dh = _scatter(e_h, wh * drep[:, c1:c2], hshape[0])
        self.enc_t.backward(params, ct, wd * drep[:, c2:], grads)
        return dz, dh

    def backward_nodes(self, params, cache, dz, dh, a_zh, a_hz, grads):
        cz, ch, layers = cache
        for l in reversed(range(len(self.dims))):
            z, h, mz, mh, z_new, h_new = layers[l]
            gz = self._dact(dz, z_new)
            gh = self._dact(dh, h_new)
            _acc(grads, f"conv{l}.zs", z.T @ gz)
            _acc(grads, f"conv{l}.zn", mz.T @ gz)
            _acc(grads, f"conv{l}.zb", gz.sum(axis=0))
            _acc(grads, f"conv{l}.hs", h.T @ gh)
            _acc(grads, f"conv{l}.hn", mh.T @ gh)
            _acc(grads, f"conv{l}.hb", gh.sum(axis=0))
            dz = gz @ params[f"conv{l}.zs"].T + a_hz.T @ (gh @ params[f"conv{l}.hn"].T)
            dh = gh @ params[f"conv{l}.hs"].T + a_zh.T @ (gz @ params[f"conv{l}.zn"].T)
        self.enc_z.backward(params, cz, dz, grads)
        self.enc_h.backward(params, ch, dh, grads)
        return grads


def _acc(grads, key, value):
    grads[key] = grads[key] + value if key in grads else value


def _scatter(index, values, n):
    out = np.zeros((n, values.shape[1]))
    if len(index):
        inc = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index)))
        out += inc @ values
    return out


class _GraphProblem:
    """A graph, its standardized inputs and per-edge targets, with zone-wise batching."""

    def __init__(self, graph, stats, targets):
        self.Zz, self.Zh, self.t = _standardized_parts(graph, stats)
        self.a_zh, self.a_hz = graph.adjacency()
        self.e_z, self.e_h = graph.edge_zone, graph.edge_hospital
        self.y = np.asarray(targets, dtype=float)
        labelled = np.flatnonzero(~np.isnan(self.y))
        order = labelled[np.argsort(self.e_z[labelled], kind="stable")]
        zones = self.e_z[order]
        starts = np.flatnonzero(np.r_[True, zones[1:] != zones[:-1]]) if len(order) else np.zeros(0, np.intp)
        self.order = order
        self.starts = starts
        self.ends = np.r_[starts[1:], len(order)]
        self.n_groups = len(starts)

    def edges_for(self, groups):
        if len(groups) == 0:
            return np.zeros(0, np.intp), np.zeros(0, np.intp)
        lengths = self.ends[groups] - self.starts[groups]
        idx = np.concatenate([self.order[self.starts[g] : self.ends[g]] for g in groups])
        seg = np.r_[0, np.cumsum(lengths)[:-1]].astype(np.intp)
        return idx, seg

    def loss_and_grads(self, net, params, objective, edges, seg, trace=None, need_grads=True):
        z, h, ncache = net.forward_nodes(params, self.Zz, self.Zh, self.a_zh, self.a_hz, trace)
        scores, ecache = net.forward_edges(params, z, h, self.e_z[edges], self.e_h[edges], self.t[edges], trace)
        loss, d = objective_loss(objective, scores, self.y[edges], seg)
        if not need_grads:
            return loss, None
        grads = {}
        dz, dh = net.backward_edges(params, ecache, d, grads)
        net.backward_nodes(params, ncache, dz, dh, self.a_zh, self.a_hz, grads)
        return loss, grads


def fit_hgnn(graph: HeteroGraph, targets, config: HgnnConfig = HgnnConfig(), stats: FeatureStats = None) -> ModelArtifact:
    """Train on per-edge target shares (``nan`` marks edges outside the objective).

    Feature statistics default to those of the edge rows of ``graph``.
    """
    config = HgnnConfig(**asdict(config)).validate()
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (graph.n_edges,):
        raise ShapeError(f"expected {graph.n_edges} edge targets, got {targets.shape}")
    if np.all(np.isnan(targets)):
        raise InsufficientDataError("no labelled edges")
    if stats is None:
        stats = FeatureStats.fit(graph.edge_rows())
    problem = _GraphProblem(graph, stats, targets)
    tr, va = validation_split(problem.n_groups, config.val_fraction, config.seed)
    rng = np.random.default_rng(config.seed)
    net = HgnnNet(config)
    params = net.init(rng)

    def step(params, groups):
        edges, seg = problem.edges_for(groups)
        return problem.loss_and_grads(net, params, config.objective, edges, seg)

    def batches(rng):
        perm = tr[rng.permutation(len(tr))]
        for i in range(0, len(perm), config.batch_origins):
            yield perm[i : i + config.batch_origins]

    def full_loss(groups):
        edges, seg = problem.edges_for(groups)
        return lambda p: problem.loss_and_grads(net, p, config.objective, edges, seg, need_grads=False)[0]

    train_curve, val_curve = train_epochs(
        params, step, batches, config.epochs, Adam(config.learning_rate), full_loss(tr),
        full_loss(va) if len(va) else None, rng,
    )
    labelled = ~np.isnan(targets)
    set_sizes = np.bincount(graph.edge_zone[labelled])
    set_sizes = set_sizes[set_sizes > 0]
    meta = {
        "config": asdict(config),
        "seed": config.seed,
        "objective": config.objective,
        "fusion_weights": [config.weight_B, config.weight_H, config.weight_D],
        "n_train_zones": len(tr),
        "n_val_zones": len(va),
        "reference_competitors": float(set_sizes.mean()) - 1.0,
        "loss_curve": {"train": train_curve, "val": val_curve},
        "final_train_loss": train_curve[-1],
        "final_val_loss": val_curve[-1],
        "assumptions": [
            "fusion weights scale the concatenated zone, hospital and drive-time blocks",
            "two mean-aggregation convolution layers; depth and aggregator are free choices, recorded here",
        ],
    }
    return ModelArtifact("hgnn", params, stats, meta)


def fit_hgnn_table(rows: FeatureTable, config: HgnnConfig = HgnnConfig()) -> ModelArtifact:
    """Build the graph from the rows themselves (one edge per row) and train on their shares."""
    graph = graph_from_table(rows)
    return fit_hgnn(graph, rows.y, config, FeatureStats.fit(rows.X))


def _score_hgnn(artifact, table_std):
    cfg = HgnnConfig(**_tuples(artifact.metadata["config"]))
    net = HgnnNet(cfg)
    graph = graph_from_table(table_std)
    identity = FeatureStats(
        np.zeros(N_FEATURES), np.ones(N_FEATURES), np.zeros(N_FEATURES), np.zeros(N_FEATURES)
    )
    Zz, Zh, t = _standardized_parts(graph, identity)
    a_zh, a_hz = graph.adjacency()
    z, h, _ = net.forward_nodes(artifact.params, Zz, Zh, a_zh, a_hz)
    return net.forward_edges(artifact.params, z, h, graph.edge_zone, graph.edge_hospital, t)[0]


register("hgnn", _score_hgnn)
