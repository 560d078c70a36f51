"""Population generation, sampling, and Monte Carlo harness tests."""

import numpy as np
import pytest

from funcalib.errors import ConfigError, InputError, RescaleOverflowError
from funcalib.simulate import (
    FinitePopulation,
    PopulationSpec,
    beta33,
    draw_samples,
    gen_population,
    monte_carlo,
    summarize,
    truncated_normal,
)

# quadrature oracle for the [-3, 3] truncated standard normal spread:
# sqrt(int z^2 phi / int phi) evaluated with scipy.integrate.quad
TRUNCNORM_SD = 0.9865783925581086


class TestPopulationSpec:
    def test_size_ordering_enforced(self):
        with pytest.raises(ConfigError):
            PopulationSpec("linear", 100, 100, 10)
        with pytest.raises(ConfigError):
            PopulationSpec("linear", 100, 10, 10)

    def test_setup_validated(self):
        with pytest.raises(ConfigError):
            PopulationSpec("quadratic", 100, 50, 10)


class TestGenPopulation:
    @pytest.mark.parametrize("setup", ["linear", "nonlinear"])
    def test_probability_totals(self, setup):
        pop = gen_population(PopulationSpec(setup, 2000, 400, 60, seed=3))
        assert pop.pi_a.sum() == pytest.approx(400.0, abs=1e-6)
        assert pop.pi_b.sum() == pytest.approx(60.0, abs=1e-6)

    @pytest.mark.parametrize("setup", ["linear", "nonlinear"])
    def test_probabilities_in_open_interval(self, setup):
        pop = gen_population(PopulationSpec(setup, 2000, 400, 60, seed=5))
        assert 0.0 < pop.pi_a.min() and pop.pi_a.max() < 1.0
        assert 0.0 < pop.pi_b.min() and pop.pi_b.max() <= 1.0

    def test_linear_x1_centered(self):
        pop = gen_population(PopulationSpec("linear", 5000, 1000, 100, seed=1))
        x1 = pop.x[:, 0]
        assert abs(x1.mean()) < 4.0 * x1.std() / np.sqrt(5000)

    def test_linear_population_mean_near_ten(self):
        pop = gen_population(PopulationSpec("linear", 5000, 1000, 100, seed=2))
        # E[m] = 10 since both latent coordinates are centered
        se = np.sqrt((pop.m.var() + 1.0) / 5000)
        assert abs(pop.ybar - 10.0) < 5 * se

    def test_ybar_is_exact_mean(self):
        pop = gen_population(PopulationSpec("linear", 500, 100, 20, seed=7))
        assert pop.ybar == pop.y.mean()

    def test_deterministic_in_seed(self):
        a = gen_population(PopulationSpec("nonlinear", 800, 150, 40, seed=9))
        b = gen_population(PopulationSpec("nonlinear", 800, 150, 40, seed=9))
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.pi_b, b.pi_b)

    def test_rescale_overflow_reported(self):
        with pytest.raises(RescaleOverflowError, match=r"\d+ selection"):
            gen_population(PopulationSpec("linear", 40, 38, 2, seed=0))


class TestDrawSamples:
    def test_certain_selection_returns_population(self):
        rng = np.random.default_rng(0)
        n = 50
        pop = FinitePopulation(
            x=rng.random((n, 2)), y=rng.standard_normal(n),
            m=np.zeros(n), pi_a=np.ones(n), pi_b=np.full(n, 0.5),
            ybar=0.0,
        )
        data = draw_samples(pop, seed=1)
        assert data.n_a == n
        np.testing.assert_array_equal(data.x_a, pop.x)

    def test_expected_sample_size(self):
        pop = gen_population(PopulationSpec("linear", 2000, 400, 60, seed=4))
        sizes = [draw_samples(pop, seed=s).n_a for s in range(200)]
        assert abs(np.mean(sizes) - 400) < 4 * np.sqrt(400)

    def test_seed_determinism(self):
        pop = gen_population(PopulationSpec("linear", 500, 100, 30, seed=6))
        a = draw_samples(pop, seed=12)
        b = draw_samples(pop, seed=12)
        np.testing.assert_array_equal(a.x_a, b.x_a)
        np.testing.assert_array_equal(a.d_b, b.d_b)

    def test_design_weights_are_reciprocal_probabilities(self):
        pop = gen_population(PopulationSpec("linear", 500, 100, 30, seed=8))
        data = draw_samples(pop, seed=3)
        assert np.all(data.d_b >= 1.0)
        assert data.n_pop == 500.0


class TestTruncatedNormal:
    def test_support(self):
        rng = np.random.default_rng(1)
        draws = truncated_normal(rng, size=100_000)
        assert draws.min() >= -3.0 and draws.max() <= 3.0

    def test_mean_near_zero(self):
        rng = np.random.default_rng(2)
        draws = truncated_normal(rng, size=100_000)
        assert abs(draws.mean()) < 0.02

    def test_sd_matches_quadrature_oracle(self):
        rng = np.random.default_rng(3)
        draws = truncated_normal(rng, size=100_000)
        assert draws.std() == pytest.approx(TRUNCNORM_SD, rel=0.02)

    def test_scalar_mode(self):
        rng = np.random.default_rng(4)
        val = truncated_normal(rng)
        assert isinstance(val, float) and -3.0 <= val <= 3.0

    def test_bad_interval(self):
        with pytest.raises(ConfigError):
            truncated_normal(np.random.default_rng(0), lo=1.0, hi=1.0)


class TestBeta33:
    def test_mean(self):
        rng = np.random.default_rng(5)
        draws = beta33(rng, size=100_000)
        assert abs(draws.mean() - 0.5) < 0.01

    def test_variance(self):
        rng = np.random.default_rng(6)
        draws = beta33(rng, size=100_000)
        # Beta variance a*b/((a+b)^2 (a+b+1)) = 9/(36*7) = 1/28
        assert draws.var() == pytest.approx(1.0 / 28.0, rel=0.03)

    def test_open_unit_support(self):
        rng = np.random.default_rng(7)
        draws = beta33(rng, size=100_000)
        assert draws.min() > 0.0 and draws.max() < 1.0


class TestMonteCarlo:
    def test_single_replicate_one_record_per_method(self):
        spec = PopulationSpec("linear", 400, 100, 25, seed=0)
        recs = monte_carlo(spec, ["nsm", "ev2"], m_reps=1, seed=3)
        assert len(recs) == 2
        assert {r["method"] for r in recs} == {"nsm", "ev2"}
        assert all(r["error"] == "" for r in recs)

    def test_identical_seed_identical_records(self):
        spec = PopulationSpec("linear", 400, 100, 25, seed=0)
        a = monte_carlo(spec, ["nsm", "ht_kl"], m_reps=3, seed=11)
        b = monte_carlo(spec, ["nsm", "ht_kl"], m_reps=3, seed=11)
        drop_timing = lambda recs: [
            {k: v for k, v in r.items() if k != "seconds"} for r in recs
        ]
        assert drop_timing(a) == drop_timing(b)

    def test_unknown_method_rejected(self):
        spec = PopulationSpec("linear", 400, 100, 25, seed=0)
        with pytest.raises(ConfigError):
            monte_carlo(spec, ["nsm", "magic"], m_reps=1)

    def test_replicate_count_validated(self):
        spec = PopulationSpec("linear", 400, 100, 25, seed=0)
        with pytest.raises(ConfigError):
            monte_carlo(spec, ["nsm"], m_reps=0)

    def test_nsm_positively_biased_linear(self):
        # selection proportional to the mean function overselects large y
        spec = PopulationSpec("linear", 5000, 1000, 100, seed=0)
        recs = monte_carlo(spec, ["nsm"], m_reps=300, seed=17)
        s = summarize(recs)["nsm"]
        assert s["mean_bias"] > 0
        assert s["mean_bias"] > 5 * s["mc_se"]

    def test_bias_uses_per_replicate_truth(self):
        spec = PopulationSpec("linear", 400, 100, 25, seed=0)
        recs = monte_carlo(spec, ["nsm"], m_reps=2, seed=5)
        assert recs[0]["true_mean"] != recs[1]["true_mean"]
        for r in recs:
            assert r["bias"] == r["estimate"] - r["true_mean"]


class TestSummarize:
    def test_failure_flagging(self):
        records = []
        for i in range(40):
            records.append({
                "replicate": i, "method": "x", "estimate": 1.0,
                "true_mean": 1.0, "bias": 0.1, "seconds": 0.0,
                "variance": None, "ci_low": None, "ci_high": None,
                "covered": None, "error": "boom" if i < 3 else "",
            })
        out = summarize(records)["x"]
        assert out["n_failed"] == 3
        assert out["flagged"]  # 7.5% > 5%

    def test_coverage_aggregation(self):
        records = [
            {"replicate": i, "method": "prop", "estimate": 1.0,
             "true_mean": 1.0, "bias": 0.0, "seconds": 0.1,
             "variance": 0.5, "ci_low": 0.0, "ci_high": 2.0,
             "covered": i % 2, "error": ""}
            for i in range(10)
        ]
        assert summarize(records)["prop"]["coverage"] == 0.5
