import numpy as np
import pytest

from visitflow.domain import (
    DRIVE_TIME,
    FEATURE_NAMES,
    HOSPITAL_SLICE,
    N_FEATURES,
    ZONE_SLICE,
    FeatureStats,
    FlowRecord,
    HospitalAttributes,
    ODDataset,
    ZoneAttributes,
    assemble_candidates,
    assemble_features,
    destandardize,
    feature_index,
    normalize_per_origin,
    origin_groups,
    standardize,
)
from visitflow.errors import CoverageError, DegenerateOriginError, RangeError, ShapeError

from conftest import make_dataset


def _flows(origin, visits):
    return [FlowRecord(origin, f"H{i}", float(v), 10.0) for i, v in enumerate(visits)]


class TestFeatureLayout:
    def test_twenty_two_features_in_blocks(self):
        assert N_FEATURES == 22
        assert len(FEATURE_NAMES) == len(set(FEATURE_NAMES))
        assert FEATURE_NAMES[HOSPITAL_SLICE][0] == "staffed_all_beds"
        assert FEATURE_NAMES[ZONE_SLICE][0] == "total_population"
        assert FEATURE_NAMES[DRIVE_TIME] == "drive_time_min"

    def test_feature_index_roundtrip(self):
        for i, name in enumerate(FEATURE_NAMES):
            assert feature_index(name) == i
        with pytest.raises(KeyError):
            feature_index("nonsense")


class TestRecords:
    def test_rating_ceiling(self):
        base = dict(hospital_id="H", staffed_all_beds=10, staffed_icu_beds=1, licensed_all_beds=12,
                    all_bed_occupancy=0.5, icu_occupancy=0.5, n_reviews=3, lon=-95.0, lat=29.0)
        HospitalAttributes(rating=4.8, **base)
        with pytest.raises(RangeError):
            HospitalAttributes(rating=5.7, **base)

    def test_fraction_and_count_checks(self):
        with pytest.raises(RangeError):
            ZoneAttributes("Z", 10, 1.2, 0, 0, 0, 0, 0, 0, 1000, 0.5, -95, 29)
        with pytest.raises(RangeError):
            HospitalAttributes("H", 10.5, 1, 12, 0.5, 0.5, 3, 4.0, -95, 29)

    def test_flow_checks(self):
        with pytest.raises(RangeError):
            FlowRecord("Z", "H", -1.0, 10.0)
        with pytest.raises(RangeError):
            FlowRecord("Z", "H", 1.0, 0.0)


class TestNormalizePerOrigin:
    def test_forced_arithmetic(self):
        shares = normalize_per_origin(_flows("Z", [10, 30, 60]))
        assert [shares[("Z", f"H{i}")] for i in range(3)] == [0.1, 0.3, 0.6]

    def test_single_destination(self):
        assert normalize_per_origin(_flows("Z", [7])) == {("Z", "H0"): 1.0}

    def test_zero_total_origin(self):
        with pytest.raises(DegenerateOriginError) as err:
            normalize_per_origin(_flows("Zdead", [0, 0]))
        assert "Zdead" in str(err.value)

    def test_probability_vectors(self):
        rng = np.random.default_rng(1)
        flows = []
        for o in range(20):
            flows += _flows(f"Z{o}", rng.integers(1, 1000, size=rng.integers(1, 30)))
        shares = normalize_per_origin(flows)
        for o in range(20):
            vals = [v for (z, _), v in shares.items() if z == f"Z{o}"]
            assert min(vals) >= 0
            assert abs(sum(vals) - 1) < 1e-12


class TestAssemble:
    def test_full_grid_counts(self):
        ds = make_dataset(2, 3, observed=1.0)
        table = assemble_features(ds)
        assert len(table) == 6
        assert table.X.shape == (6, 22)

    def test_drive_time_verbatim(self, small_dataset):
        table = assemble_features(small_dataset)
        for k, f in enumerate(small_dataset.flows):
            assert table.X[k, DRIVE_TIME] == f.drive_time_min

    def test_shares_sum_to_one(self, small_dataset):
        table = assemble_features(make_dataset(10, 6, observed=0.5, seed=3))
        _, starts = origin_groups(table.origin_ids)
        sums = np.add.reduceat(table.y, starts)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)

    def test_missing_drive_time(self, small_dataset):
        ds = small_dataset
        drive = dict(ds.drive_time)
        f = ds.flows[0]
        del drive[(f.origin_zone_id, f.hospital_id)]
        with pytest.raises(CoverageError) as err:
            assemble_features(ODDataset(ds.zones, ds.hospitals, ds.flows, drive))
        assert f.origin_zone_id in str(err.value)

    def test_deterministic(self):
        a = assemble_features(make_dataset(seed=5))
        b = assemble_features(make_dataset(seed=5))
        assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
        assert a.pair_keys() == b.pair_keys()

    def test_candidates_cover_all_hospitals(self):
        ds = make_dataset(5, 4, observed=0.5, seed=2)
        cand = assemble_candidates(ds)
        assert len(cand) == 20
        obs = dict(zip(assemble_features(ds).pair_keys(), assemble_features(ds).y))
        for key, y in zip(cand.pair_keys(), cand.y):
            assert y == obs.get(key, 0.0)


class TestStandardize:
    def test_fitting_set_moments(self):
        X = np.random.default_rng(0).normal(5, 3, size=(200, 22))
        stats = FeatureStats.fit(X)
        Z = standardize(X, stats)
        np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-10)
        np.testing.assert_allclose(Z.std(axis=0), 1, atol=1e-10)

    def test_constant_column(self):
        X = np.random.default_rng(0).normal(size=(50, 22))
        X[:, 4] = 3.25
        stats = FeatureStats.fit(X)
        assert stats.constant[4] and stats.constant.sum() == 1
        assert np.all(standardize(X, stats)[:, 4] == 0)

    def test_mean_maps_to_zero(self):
        X = np.random.default_rng(2).uniform(size=(30, 22))
        stats = FeatureStats.fit(X)
        assert np.all(standardize(stats.mean[None, :], stats) == 0)

    def test_roundtrip(self):
        X = np.random.default_rng(3).lognormal(size=(40, 22)) * 100
        stats = FeatureStats.fit(X)
        np.testing.assert_allclose(destandardize(standardize(X, stats), stats), X, rtol=1e-10)

    def test_dimension_mismatch(self):
        stats = FeatureStats.fit(np.ones((3, 22)) + np.arange(3)[:, None])
        with pytest.raises(ShapeError):
            standardize(np.ones((2, 21)), stats)
        with pytest.raises(ShapeError):
            destandardize(np.ones((2, 23)), stats)

    def test_stats_serialization(self):
        stats = FeatureStats.fit(np.random.default_rng(4).normal(size=(10, 22)))
        back = FeatureStats.from_dict(stats.to_dict())
        assert np.array_equal(back.mean, stats.mean) and np.array_equal(back.std, stats.std)
