import csv

import numpy as np
import pytest

from visitflow.domain import FeatureStats, FeatureTable, ODDataset, assemble_candidates, origin_groups
from visitflow.errors import CoverageError
from visitflow.models import HgnnConfig, build_graph, fit_hgnn, fit_hgnn_table, predict
from visitflow.models.hgnn import HgnnNet, _standardized_parts

from conftest import make_dataset
from probes import hgnn_probe, worst

SMALL = dict(zone_encoder=(6,), hospital_encoder=(6,), distance_encoder=(3,), conv_size=5, head=(6,), epochs=4)


@pytest.fixture(scope="module")
def candidates():
    return assemble_candidates(make_dataset(10, 4, seed=11, observed=0.7))


@pytest.fixture(scope="module")
def trained(candidates):
    return fit_hgnn_table(candidates, HgnnConfig(**SMALL))


class TestGraph:
    def test_all_pairs_counts(self, tmp_path):
        graph = build_graph(make_dataset(4, 3), "all_pairs")
        assert graph.n_edges == 12
        graph.dump(tmp_path / "nodes.csv", tmp_path / "edges.csv")
        with open(tmp_path / "edges.csv", newline="") as fh:
            edges = list(csv.DictReader(fh))
        assert len(edges) == 24
        assert sum(e["src"].startswith("Z") for e in edges) == 12
        with open(tmp_path / "nodes.csv", newline="") as fh:
            assert len(list(csv.DictReader(fh))) == 7

    def test_isolated_zone_retained(self):
        ds = make_dataset(5, 3, seed=2)
        lonely = ds.zones[0].zone_id
        ds = ODDataset(ds.zones, ds.hospitals, tuple(f for f in ds.flows if f.origin_zone_id != lonely), ds.drive_time)
        graph = build_graph(ds, "observed")
        assert len(graph.zone_ids) == 5
        assert 0 not in set(graph.edge_zone.tolist())
        a_zh, _ = graph.adjacency()
        assert a_zh[0].nnz == 0

    def test_missing_drive_time(self):
        ds = make_dataset(3, 2)
        drive = dict(ds.drive_time)
        drive.pop((ds.zones[1].zone_id, ds.hospitals[1].hospital_id))
        with pytest.raises(CoverageError):
            build_graph(ODDataset(ds.zones, ds.hospitals, ds.flows, drive))

    def test_isolated_node_uses_self_path_only(self):
        ds = make_dataset(5, 3, seed=4)
        graph = build_graph(ds, lambda z, h: z != ds.zones[0].zone_id)
        stats = FeatureStats.fit(graph.edge_rows())
        net = HgnnNet(HgnnConfig(**SMALL))
        params = net.init(np.random.default_rng(0))
        Zz, Zh, _ = _standardized_parts(graph, stats)
        a_zh, a_hz = graph.adjacency()
        z1, _, _ = net.forward_nodes(params, Zz, Zh, a_zh, a_hz)
        z2, _, _ = net.forward_nodes(params, Zz, Zh + 3.0, a_zh, a_hz)
        assert np.array_equal(z1[0], z2[0])
        assert not np.array_equal(z1[1], z2[1])


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("objective", ["per_origin_softmax_ce", "mse"])
    def test_finite_differences(self, seed, objective):
        result = hgnn_probe(seed, objective)
        rel, n = worst(result)
        assert rel < 1e-4 and n > 100
        prefixes = {name.split(".")[0] for name in result}
        assert {"enc_zone", "enc_hosp", "enc_dist", "conv0", "conv1", "head"} <= prefixes


class TestHgnn:
    def test_fusion_defaults(self, trained):
        assert trained.metadata["fusion_weights"] == [1, 1, 4]
        assert tuple(trained.metadata["fusion_weights"]) == (HgnnConfig().weight_B, HgnnConfig().weight_H,
                                                             HgnnConfig().weight_D)

    def test_shares_sum_to_one(self, trained, candidates):
        p = predict(trained, candidates)
        _, starts = origin_groups(candidates.origin_ids)
        assert np.all(p >= 0)
        np.testing.assert_allclose(np.add.reduceat(p, starts), 1, atol=1e-9)

    def test_relabeling_invariance(self, trained, candidates):
        perm = np.random.default_rng(0).permutation(len(candidates))
        base = predict(trained, candidates)
        np.testing.assert_allclose(predict(trained, candidates.subset(perm)), base[perm], rtol=1e-12, atol=1e-15)

    def test_identical_equidistant_hospitals_uniform(self, trained, candidates):
        X = np.tile(candidates.X[0], (4, 1))
        rows = FeatureTable(np.array(["Z"] * 4, dtype=object), np.array(list("ABCD"), dtype=object), X,
                            np.full(4, 0.25))
        assert np.all(predict(trained, rows) == 0.25)

    def test_unlabelled_edges_ignored(self, candidates):
        graph = build_graph(make_dataset(10, 4, seed=11, observed=0.7))
        y = np.full(graph.n_edges, np.nan)
        y[: 2 * 4] = 0.25
        art = fit_hgnn(graph, y, HgnnConfig(**SMALL, val_fraction=0.0))
        assert art.metadata["n_train_zones"] == 2

    def test_bit_reproducible(self, candidates):
        a = fit_hgnn_table(candidates, HgnnConfig(**SMALL, seed=9))
        b = fit_hgnn_table(candidates, HgnnConfig(**SMALL, seed=9))
        assert a.to_json() == b.to_json()
