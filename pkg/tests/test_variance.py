"""Variance estimation and interval tests."""

import numpy as np
import pytest
from scipy import stats

from funcalib.calibrate import build_problem, rate_lambdas
from funcalib.data import TwoSampleData
from funcalib.errors import ConfigError, InputError
from funcalib.variance import (
    VarianceResult,
    bootstrap_variance,
    confidence_interval,
    normal_quantile,
    plugin_variance_poisson,
)
from tests.conftest import make_sim_data


def census_like_data(n=10, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 2))
    return TwoSampleData(
        x_a=x, y_a=rng.standard_normal(n), x_b=x,
        d_b=np.ones(n), n_pop=float(n),
    )


class TestPluginVariance:
    def test_census_design_part_zero(self):
        data = census_like_data()
        res = plugin_variance_poisson(
            data, lambda x: np.ones(np.atleast_2d(x).shape[0]),
            np.ones(data.n_a), 1.0,
        )
        assert res.components[0] == 0.0
        assert res.variance == res.components[1]

    def test_zero_sigma_residual_part_zero(self, sim_data):
        res = plugin_variance_poisson(
            sim_data, lambda x: np.ones(np.atleast_2d(x).shape[0]),
            np.ones(sim_data.n_a), 0.0,
        )
        assert res.components[1] == 0.0
        assert res.variance == res.components[0]

    def test_components_sum_exactly(self, sim_data):
        rng = np.random.default_rng(1)
        w = rng.uniform(1.0, 6.0, sim_data.n_a)
        res = plugin_variance_poisson(
            sim_data, lambda x: np.atleast_2d(x)[:, 0], w, 0.8
        )
        assert res.variance == res.components[0] + res.components[1]
        assert res.variance >= 0

    def test_matches_direct_formula(self, sim_data):
        m_hat = lambda x: 2.0 + np.atleast_2d(x) @ np.array([1.0, -0.5])
        w = np.full(sim_data.n_a, 3.0)
        res = plugin_variance_poisson(sim_data, m_hat, w, 0.5)
        d = sim_data.d_b
        pi = 1.0 / d
        m_b = m_hat(sim_data.x_b)
        design = float((d * d * (1 - pi) * m_b**2).sum() / sim_data.n_pop**2)
        resid = float(0.5 * (w**2).sum() / sim_data.n_pop**2)
        assert res.components == pytest.approx((design, resid), rel=1e-14)

    def test_rejects_small_design_weights(self):
        rng = np.random.default_rng(2)
        x = rng.random((5, 1))
        data = TwoSampleData(
            x_a=x, y_a=np.zeros(5), x_b=x, d_b=np.full(5, 0.5), n_pop=10.0
        )
        with pytest.raises(InputError):
            plugin_variance_poisson(
                data, lambda q: np.zeros(np.atleast_2d(q).shape[0]),
                np.ones(5), 0.0,
            )

    def test_variance_shrinks_as_inclusion_grows(self, sim_data):
        m_hat = lambda x: 1.0 + np.atleast_2d(x)[:, 0]
        w = np.full(sim_data.n_a, 2.0)
        base = plugin_variance_poisson(sim_data, m_hat, w, 0.0)
        tighter = TwoSampleData(
            x_a=sim_data.x_a, y_a=sim_data.y_a, x_b=sim_data.x_b,
            d_b=1.0 + 0.25 * (sim_data.d_b - 1.0), n_pop=sim_data.n_pop,
        )
        closer = plugin_variance_poisson(tighter, m_hat, w, 0.0)
        assert closer.variance <= base.variance


class TestBootstrapVariance:
    def test_census_gives_zero_variance(self):
        data = census_like_data(n=12, seed=3)
        res = bootstrap_variance(
            data, b_reps=20, seed=1, lambdas=(1e-3, 1e-4)
        )
        assert res.variance == pytest.approx(0.0, abs=1e-20)

    def test_seed_determinism(self, sim_data):
        lam = rate_lambdas(sim_data.n_b)
        a = bootstrap_variance(sim_data, b_reps=12, seed=9, lambdas=lam,
                               max_iter=60)
        b = bootstrap_variance(sim_data, b_reps=12, seed=9, lambdas=lam,
                               max_iter=60)
        assert a.variance == b.variance
        np.testing.assert_array_equal(a.replicates, b.replicates)

    def test_replicate_weight_means_track_design_weights(self, sim_data):
        pi = 1.0 / sim_data.d_b
        sd = np.sqrt(1.0 - pi) / pi
        rng = np.random.default_rng(4)
        draws = rng.normal(sim_data.d_b, sd, size=(2000, sim_data.n_b))
        se = sd / np.sqrt(2000)
        assert np.all(
            np.abs(draws.mean(axis=0) - sim_data.d_b) < 3.5 * se + 1e-12
        )

    def test_clamping_option(self, sim_data):
        lam = rate_lambdas(sim_data.n_b)
        with pytest.warns(UserWarning, match="clamped"):
            res = bootstrap_variance(
                sim_data, b_reps=10, seed=2, lambdas=lam,
                max_iter=40, clamp_negative=True,
            )
        assert res.n_clamped > 0
        assert res.variance >= 0

    def test_requires_two_reps(self, sim_data):
        with pytest.raises(ConfigError):
            bootstrap_variance(sim_data, b_reps=1, lambdas=(1e-3, 1e-4))

    def test_unknown_estimator(self, sim_data):
        with pytest.raises(ConfigError):
            bootstrap_variance(sim_data, estimator="nsm", b_reps=5,
                               lambdas=(1e-3, 1e-4))

    def test_reuses_prebuilt_problem(self, sim_data):
        lam = rate_lambdas(sim_data.n_b)
        problem = build_problem(sim_data, *lam)
        a = bootstrap_variance(sim_data, b_reps=8, seed=5, problem=problem,
                               max_iter=40)
        b = bootstrap_variance(sim_data, b_reps=8, seed=5, lambdas=lam,
                               max_iter=40)
        assert a.variance == pytest.approx(b.variance, rel=1e-12)


class TestNormalQuantile:
    def test_matches_scipy_grid(self):
        ps = np.concatenate([
            np.linspace(1e-6, 0.02, 40),
            np.linspace(0.021, 0.979, 200),
            np.linspace(0.98, 1 - 1e-6, 40),
        ])
        for p in ps:
            assert normal_quantile(float(p)) == pytest.approx(
                stats.norm.ppf(p), abs=1e-8
            )

    def test_symmetry(self):
        assert normal_quantile(0.975) == pytest.approx(
            -normal_quantile(0.025), abs=1e-12
        )

    def test_domain(self):
        with pytest.raises(ConfigError):
            normal_quantile(0.0)
        with pytest.raises(ConfigError):
            normal_quantile(1.0)


class TestConfidenceInterval:
    def test_degenerate_at_zero_variance(self):
        assert confidence_interval(3.2, 0.0) == (3.2, 3.2)

    def test_standard_normal_095(self):
        lo, hi = confidence_interval(0.0, 1.0, 0.95)
        # oracle: scipy.stats.norm.ppf(0.975) = 1.959963984540054
        assert hi == pytest.approx(1.959964, abs=1e-6)
        assert lo == pytest.approx(-1.959964, abs=1e-6)

    def test_symmetric_around_estimate(self):
        lo, hi = confidence_interval(5.0, 2.7, 0.9)
        assert lo + hi == pytest.approx(10.0, abs=1e-12)

    def test_level_validated(self):
        with pytest.raises(ConfigError):
            confidence_interval(0.0, 1.0, level=1.0)

    def test_negative_variance_rejected(self):
        with pytest.raises(InputError):
            confidence_interval(0.0, -1.0)


class TestVarianceResult:
    def test_nonnegative(self):
        with pytest.raises(InputError):
            VarianceResult(variance=-1e-9)
