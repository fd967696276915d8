import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from visitflow.errors import ConfigError, GenerationError, PairingError
from visitflow.ingest import load_dataset, validate_dataset
from visitflow.synth import SynthConfig, generate_city, oracle_report, rating_switch, utility, write_city

SMALL = dict(n_zones=40, n_hospitals=8)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(beta=-0.1), dict(n_zones=0), dict(threshold_min=-1), dict(noise="poisson")])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            SynthConfig(**bad).validate()

    def test_coincident_points(self):
        with pytest.raises(GenerationError):
            generate_city(SynthConfig(n_zones=3, n_hospitals=2, extent_km=0.0))


class TestGroundTruth:
    def test_uniform_without_preferences(self):
        cfg = SynthConfig(**SMALL, beta=0.0, theta_size=0.0, theta_rating=0.0, theta_occupancy=0.0)
        _, truth = generate_city(cfg)
        np.testing.assert_allclose(truth.shares, 1 / 8, rtol=1e-15)

    def test_identical_attributes_uniform(self):
        cfg = SynthConfig(beta=0.0)
        u = utility(np.full(5, 300.0), np.full(5, 3.5), np.full(5, 0.6), np.full(5, 25.0), cfg)
        assert np.all(u == u[0])

    def test_strong_decay_nearest_dominates(self):
        cfg = SynthConfig(n_zones=200, n_hospitals=20, beta=10.0, noise="none")
        ds, truth = generate_city(cfg)
        drive = np.array([[ds.drive_time[(z, h)] for h in truth.hospital_ids] for z in truth.zone_ids])
        ordered = np.sort(drive, axis=1)
        clear = ordered[:, 1] - ordered[:, 0] >= 1.5
        assert clear.sum() > 20
        nearest = np.argmin(drive, axis=1)
        assert np.all(truth.shares[np.arange(200), nearest][clear] > 0.99)

    @given(seed=st.integers(0, 2**16), beta=st.floats(0, 0.5))
    @settings(max_examples=15, deadline=None)
    def test_rows_are_probability_vectors(self, seed, beta):
        _, truth = generate_city(SynthConfig(n_zones=15, n_hospitals=6, beta=beta, seed=seed, noise="none"))
        assert np.all(truth.shares >= 0)
        np.testing.assert_allclose(truth.shares.sum(axis=1), 1, atol=1e-12)

    def test_entropy_decreases_with_beta(self):
        base = dict(**SMALL, seed=5, noise="none", theta_size=0.0, theta_rating=0.0, theta_occupancy=0.0)
        ent = [generate_city(SynthConfig(**base, beta=b))[1].entropy() for b in (0.0, 0.05, 0.2, 1.0)]
        for lo, hi in zip(ent[1:], ent[:-1]):
            assert np.all(lo <= hi + 1e-12)

    def test_switch_changes_sign_at_threshold(self):
        d = np.array([10.0, 19.0, 30.0])
        s = rating_switch(d, 19.0, 2.0)
        assert s[0] < 0 and s[1] == 0 and s[2] > 0


class TestDataset:
    def test_passes_validation(self):
        ds, _ = generate_city(SynthConfig(**SMALL))
        assert validate_dataset(ds).ok

    def test_same_seed_byte_identical(self, tmp_path):
        write_city(SynthConfig(**SMALL, seed=3), tmp_path / "a")
        write_city(SynthConfig(**SMALL, seed=3), tmp_path / "b")
        for name in ("zones.csv", "hospitals.csv", "flows.csv", "drivetime.csv", "truth.csv", "oracle.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_written_city_reloads_identically(self, tmp_path):
        cfg = SynthConfig(**SMALL, seed=4)
        write_city(cfg, tmp_path)
        loaded, _ = load_dataset(tmp_path)
        generated, _ = generate_city(cfg)
        assert loaded.zones == generated.zones and loaded.hospitals == generated.hospitals
        key = lambda f: (f.origin_zone_id, f.hospital_id)
        assert sorted(loaded.flows, key=key) == sorted(generated.flows, key=key)

    def test_truth_csv_header(self, tmp_path):
        write_city(SynthConfig(**SMALL), tmp_path)
        assert (tmp_path / "truth.csv").read_text().splitlines()[0] == "origin_zone_id,hospital_id,true_share"
        assert set(json.loads((tmp_path / "oracle.json").read_text())["achievable"]) == {"nrmse", "smape", "cpc"}


class TestOracle:
    def test_noiseless_is_perfect(self):
        ds, truth = generate_city(SynthConfig(**SMALL, noise="none"))
        r = oracle_report(truth, ds)
        assert r.cpc == pytest.approx(1.0, abs=1e-12)
        assert r.nrmse == pytest.approx(0.0, abs=1e-12)
        assert r.smape == pytest.approx(0.0, abs=1e-9)

    def test_noiseless_seeds_agree(self):
        r1 = oracle_report(*_swap(generate_city(SynthConfig(**SMALL, noise="none", seed=1))))
        r2 = oracle_report(*_swap(generate_city(SynthConfig(**SMALL, noise="none", seed=2))))
        for m in ("nrmse", "smape", "cpc"):
            assert getattr(r1, m) == pytest.approx(getattr(r2, m), abs=1e-9)

    def test_multinomial_below_one_and_reproducible(self):
        cfg = SynthConfig(**SMALL, noise="multinomial", sample_count=50, seed=8)
        r1 = oracle_report(*_swap(generate_city(cfg)))
        r2 = oracle_report(*_swap(generate_city(cfg)))
        assert r1.cpc < 1 and r1 == r2

    def test_mismatched_pairing(self):
        ds, _ = generate_city(SynthConfig(**SMALL, seed=1))
        _, other = generate_city(SynthConfig(n_zones=5, n_hospitals=8, seed=1))
        with pytest.raises(PairingError):
            oracle_report(other, ds)


def _swap(pair):
    ds, truth = pair
    return truth, ds
