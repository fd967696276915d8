import json
import re

import numpy as np
import pytest

from visitflow.errors import MetricDomainError, ProtocolError, ShapeError, UndefinedOverlapError, UndefinedRangeError
from visitflow.evaluation import (
    EvalReport,
    aggregate,
    cell_seed,
    cpc,
    cross_validate,
    format_mean_std,
    holdout_split,
    kfold_split,
    metric_triple,
    nrmse,
    smape,
)
from visitflow.models import ModelSpec

from conftest import make_dataset
from oracles import cpc_ref, mean_std_ref, nrmse_ref, random_pairs, smape_ref


class TestNrmse:
    def test_perfect(self):
        assert nrmse([0, 1, 5], [0, 1, 5]) == 0.0

    def test_hand_case(self):
        assert nrmse([0, 1, 2], [0, 1, 1]) == pytest.approx(0.288675, abs=1e-6)
        assert nrmse([0, 1, 2], [0, 1, 1]) == np.sqrt(1 / 3) / 2

    def test_constant_target(self):
        with pytest.raises(UndefinedRangeError):
            nrmse([5, 5, 5], [1, 2, 3])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            nrmse([1, 2], [1, 2, 3])


class TestSmape:
    def test_perfect(self):
        assert smape([1, 0, 3], [1, 0, 3]) == 0.0

    def test_hand_case(self):
        assert smape([1], [3]) == 100.0

    def test_zero_zero_convention(self):
        assert smape([0], [0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            smape([1], [1, 2])


class TestCpc:
    def test_identical(self):
        assert cpc([1, 2, 3], [1, 2, 3]) == 1.0

    def test_disjoint(self):
        assert cpc([1, 0], [0, 1]) == 0.0

    def test_hand_case(self):
        assert cpc([2, 2], [1, 3]) == 0.75

    def test_both_zero(self):
        with pytest.raises(UndefinedOverlapError):
            cpc([0, 0], [0, 0])

    def test_negative(self):
        with pytest.raises(MetricDomainError):
            cpc([1, -1], [1, 1])


class TestMetricOracle:
    def test_brute_force_agreement(self):
        for y, yh in random_pairs(np.random.default_rng(0), 200):
            yl, yhl = y.tolist(), yh.tolist()
            assert nrmse(y, yh) == pytest.approx(nrmse_ref(yl, yhl), rel=1e-10)
            assert smape(y, yh) == pytest.approx(smape_ref(yl, yhl), rel=1e-10)
            assert cpc(y, yh) == pytest.approx(cpc_ref(yl, yhl), rel=1e-10, abs=1e-300)

    def test_power_of_two_scaling_exact(self):
        for y, yh in random_pairs(np.random.default_rng(1), 100):
            for c in (0.25, 8.0):
                assert metric_triple(c * y, c * yh) == metric_triple(y, yh)

    def test_general_scaling(self):
        for y, yh in random_pairs(np.random.default_rng(2), 100):
            a, b = metric_triple(y, yh), metric_triple(3.7 * y, 3.7 * yh)
            for m in ("nrmse", "smape", "cpc"):
                assert getattr(b, m) == pytest.approx(getattr(a, m), rel=1e-12, abs=1e-15)

    def test_cpc_symmetry_and_identity(self):
        for y, yh in random_pairs(np.random.default_rng(3), 100):
            assert cpc(y, yh) == cpc(yh, y)
            assert cpc(y, y) == 1.0
            assert (cpc(y, yh) == 1.0) == bool(np.array_equal(y, yh))


class TestSplits:
    def test_partition(self):
        folds = kfold_split(100, 10, seed=0)
        members = [np.flatnonzero(folds == f) for f in range(10)]
        assert all(len(m) == 10 for m in members)
        assert sorted(np.concatenate(members).tolist()) == list(range(100))

    def test_uneven_sizes(self):
        sizes = sorted(np.bincount(kfold_split(105, 10, seed=3)).tolist())
        assert sizes == [10] * 5 + [11] * 5

    def test_deterministic(self):
        assert np.array_equal(kfold_split(57, 7, 4), kfold_split(57, 7, 4))
        assert not np.array_equal(kfold_split(57, 7, 4), kfold_split(57, 7, 5))

    @pytest.mark.parametrize("n,k", [(5, 6), (5, 1)])
    def test_invalid_k(self, n, k):
        with pytest.raises(ProtocolError):
            kfold_split(n, k)

    def test_holdout(self):
        train, test = holdout_split(50, 0.1, seed=1)
        assert len(test) == 5 and not set(train) & set(test)

    def test_cell_seed_distinct(self):
        seeds = {cell_seed(0, r, f) for r in range(10) for f in range(10)}
        assert len(seeds) == 100


class TestAggregate:
    def test_matches_reference(self):
        vals = np.random.default_rng(0).uniform(size=100).tolist()
        m, s = aggregate(vals)
        rm, rs = mean_std_ref(vals)
        assert abs(m - rm) < 1e-12 and abs(s - rs) < 1e-12

    def test_format_shape(self):
        assert format_mean_std(0.62, 0.0036) == "0.62 ± 0.0036"
        assert re.fullmatch(r"\d+\.\d{2} ± \d+\.\d{4}", format_mean_std(59.71, 1.0256))


@pytest.fixture(scope="module")
def ols_report():
    return cross_validate(ModelSpec("ols"), make_dataset(30, 6, seed=1, observed=0.7), k=5, runs=2, base_seed=7)


class TestCrossValidate:
    def test_minimal_protocol(self):
        report = cross_validate(ModelSpec("ols"), make_dataset(2, 2, seed=0), k=2, runs=1)
        assert len(report.cells) == 2

    def test_cell_grid_and_aggregate(self, ols_report):
        assert len(ols_report.cells) == 10 and ols_report.complete
        for m in ("nrmse", "smape", "cpc"):
            vals = [c[m] for c in ols_report.cells]
            rm, rs = mean_std_ref(vals)
            m_, s_ = ols_report.aggregate[m]
            assert abs(m_ - rm) < 1e-12 and abs(s_ - rs) < 1e-12

    def test_render(self, ols_report):
        lines = ols_report.render().splitlines()
        assert [l.split()[0] for l in lines[1:4]] == ["NRMSE", "SMAPE", "CPC"]
        for line in lines[1:4]:
            assert re.search(r"\d+\.\d{2} ± \d+\.\d{4}$", line)

    def test_byte_identical(self, ols_report):
        again = cross_validate(ModelSpec("ols"), make_dataset(30, 6, seed=1, observed=0.7), k=5, runs=2, base_seed=7)
        assert again.to_json() == ols_report.to_json()
        assert again.to_csv() == ols_report.to_csv()

    def test_serializations(self, ols_report):
        payload = json.loads(ols_report.to_json())
        assert len(payload["cells"]) == 10
        assert ols_report.to_csv().splitlines()[0] == "run,fold,nrmse,smape,cpc"

    def test_failed_cells_excluded(self):
        report = EvalReport("x", {"mode": "kfold"})
        report.cells = [
            {"run": 0, "fold": 0, "status": "ok", "nrmse": 0.1, "smape": 10.0, "cpc": 0.8},
            {"run": 0, "fold": 1, "status": "failed", "error": "DivergenceError"},
            {"run": 0, "fold": 2, "status": "ok", "nrmse": 0.3, "smape": 30.0, "cpc": 0.6},
        ]
        assert not report.complete
        assert report.aggregate["nrmse"][0] == pytest.approx(0.2)
        assert "INCOMPLETE" in report.render()

    def test_softmax_family(self):
        spec = ModelSpec("deep_gravity", {"epochs": 2, "origin_encoder": [4], "destination_encoder": [4],
                                          "distance_encoder": [2], "decoder": [4]})
        report = cross_validate(spec, make_dataset(12, 4, seed=2, observed=0.7), k=3, runs=1)
        assert report.complete and len(report.loss_curves) == 3
        assert report.curves_csv().startswith("run,fold,epoch,train_loss,val_loss\n")

    def test_grouped_and_holdout(self):
        ds = make_dataset(20, 5, seed=3, observed=0.7)
        grouped = cross_validate(ModelSpec("ols"), ds, k=4, runs=1, grouped=True)
        assert grouped.complete
        hold = cross_validate(ModelSpec("gbt", {"n_stages": 5}), ds, runs=3, mode="holdout")
        assert len(hold.cells) == 3

    def test_bad_mode(self):
        with pytest.raises(ProtocolError):
            cross_validate(ModelSpec("ols"), make_dataset(), mode="bootstrap")
