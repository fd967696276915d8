import numpy as np
import pytest

from visitflow.domain import FeatureTable
from visitflow.errors import ConfigError, InsufficientDataError
from visitflow.models import GbtConfig, ModelArtifact, fit_gbt, fit_ols, ols_coefficients, predict


def table(X, y):
    n = len(y)
    return FeatureTable(np.array([f"Z{i}" for i in range(n)], dtype=object),
                        np.array(["H"] * n, dtype=object), np.asarray(X, float), np.asarray(y, float))


@pytest.fixture(scope="module")
def exact_linear():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 22))
    y = 2 * X[:, 0] - X[:, 1] + 3
    return table(X, y)


class TestOls:
    def test_recovers_coefficients(self, exact_linear):
        intercept, coef = ols_coefficients(fit_ols(exact_linear))
        expected = np.zeros(22)
        expected[:2] = [2, -1]
        assert abs(intercept - 3) < 1e-8
        assert np.max(np.abs(coef - expected)) < 1e-8

    def test_training_predictions(self, exact_linear):
        art = fit_ols(exact_linear)
        assert np.max(np.abs(predict(art, exact_linear) - exact_linear.y)) < 1e-8

    def test_residuals_orthogonal(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(300, 22))
        t = table(X, X @ rng.normal(size=22) + rng.normal(size=300))
        r = t.y - predict(fit_ols(t), t)
        assert np.max(np.abs(X.T @ r)) < 1e-8 * len(r)
        assert abs(r.sum()) < 1e-8

    def test_constant_target(self):
        X = np.random.default_rng(2).normal(size=(50, 22))
        art = fit_ols(table(X, np.full(50, 0.25)))
        intercept, coef = ols_coefficients(art)
        assert intercept == pytest.approx(0.25, abs=1e-12)
        assert np.max(np.abs(coef)) < 1e-12

    def test_duplicated_column_flags_singular(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(80, 22))
        X[:, 5] = X[:, 4]
        art = fit_ols(table(X, X[:, 4] + rng.normal(scale=0.1, size=80)))
        assert art.metadata["singular"]
        assert np.all(np.isfinite(art.params["coef"]))

    def test_too_few_rows(self):
        with pytest.raises(InsufficientDataError):
            fit_ols(table(np.ones((1, 22)), [1.0]))

    def test_empty_prediction(self, exact_linear):
        art = fit_ols(exact_linear)
        assert predict(art, exact_linear.subset(np.array([], dtype=int))).shape == (0,)

    def test_bit_identical_repeat(self, exact_linear):
        art = fit_ols(exact_linear)
        assert np.array_equal(predict(art, exact_linear), predict(art, exact_linear))

    def test_row_order_invariance(self, exact_linear):
        perm = np.random.default_rng(4).permutation(len(exact_linear))
        a = ols_coefficients(fit_ols(exact_linear))[1]
        b = ols_coefficients(fit_ols(exact_linear.subset(perm)))[1]
        np.testing.assert_allclose(a, b, atol=1e-10)


class TestGbt:
    def test_seed_stage_is_mean(self):
        rng = np.random.default_rng(0)
        t = table(rng.normal(size=(60, 22)), rng.uniform(size=60))
        art = fit_gbt(t, GbtConfig(n_stages=1, max_depth=0, learning_rate=1.0))
        pred = predict(art, t)
        assert np.all(pred == pred[0])
        assert pred[0] == pytest.approx(t.y.mean(), rel=1e-15)

    def test_plateaus(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(200, 22))
        y = np.digitize(X[:, 3], [-0.7, 0.0, 0.6]).astype(float) * 1.5
        art = fit_gbt(table(X, y), GbtConfig(n_stages=50, max_depth=2, learning_rate=1.0, min_samples_leaf=1))
        assert np.mean((predict(art, table(X, y)) - y) ** 2) < 1e-6

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_training_mse_nonincreasing(self, seed):
        rng = np.random.default_rng(seed)
        t = table(rng.normal(size=(150, 22)), rng.uniform(size=150))
        mse = np.array(fit_gbt(t, GbtConfig(n_stages=60), seed=seed).metadata["train_mse"])
        assert np.all(np.diff(mse) <= 1e-15 * mse[:-1])

    def test_row_order_invariance(self):
        rng = np.random.default_rng(5)
        t = table(rng.normal(size=(120, 22)), rng.uniform(size=120))
        perm = rng.permutation(120)
        a = predict(fit_gbt(t, GbtConfig(n_stages=20)), t)
        b = predict(fit_gbt(t.subset(perm), GbtConfig(n_stages=20)), t)
        np.testing.assert_allclose(a, b, rtol=1e-12)

    @pytest.mark.parametrize("bad", [dict(n_stages=0), dict(learning_rate=1.5), dict(max_depth=-1)])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            GbtConfig(**bad).validate()

    def test_artifact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        t = table(rng.normal(size=(80, 22)), rng.uniform(size=80))
        art = fit_gbt(t, GbtConfig(n_stages=10))
        art.save(tmp_path / "m.json")
        back = ModelArtifact.load(tmp_path / "m.json")
        assert np.array_equal(predict(art, t), predict(back, t))
