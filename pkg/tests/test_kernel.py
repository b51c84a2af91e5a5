from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from countdiffusion.kernel import (
    StateSpaceError,
    as_counts,
    attrition_step,
    attrition_step_pmf,
    binomial_pmf,
    binomial_pmf_vector,
    de_randomize,
    enumerate_reverse_chain,
    forward_conditional_sample,
    forward_sample,
    guide,
    make_rng,
    poisson_randomize,
    random_round,
    spawn_rngs,
    thinning_pmf,
    total_variation,
)
from countdiffusion.schedule import PSchedule, ScheduleKind, sigma_max

COS = PSchedule(ScheduleKind.COSINE)


def _chi2_pvalue(samples, probs):
    counts = np.bincount(samples, minlength=len(probs))
    expected = probs * len(samples)
    keep = expected > 5
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    if exp[-1] == 0:
        obs, exp = obs[:-1], exp[:-1]
    return stats.chisquare(obs, exp).pvalue


class TestForward:
    def test_p_one_and_zero(self, rng):
        x0 = rng.integers(0, 30, (20, 5))
        np.testing.assert_array_equal(forward_sample(x0, 1.0, rng), x0)
        np.testing.assert_array_equal(forward_sample(x0, 0.0, rng), 0)

    def test_mean(self, rng):
        x = forward_sample(np.full(100_000, 4), 0.5, rng)
        assert abs(x.mean() - 2.0) < 0.02

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=30), st.floats(0, 1), st.integers(0, 2**31))
    def test_thinning_never_increases(self, xs, p, seed):
        x0 = np.array(xs)
        assert np.all(forward_sample(x0, p, make_rng(seed)) <= x0)

    def test_per_row_probability(self, rng):
        x0 = np.full((3, 4), 10)
        out = forward_sample(x0, np.array([[1.0], [0.0], [1.0]]), rng)
        np.testing.assert_array_equal(out, [[10] * 4, [0] * 4, [10] * 4])

    def test_rejects_invalid(self, rng):
        with pytest.raises(ValueError):
            forward_sample([1, 2], 1.5, rng)
        with pytest.raises(ValueError):
            forward_sample([-1, 2], 0.5, rng)

    def test_conditional_identity(self, rng):
        x = rng.integers(0, 9, 50)
        np.testing.assert_array_equal(forward_conditional_sample(x, 0.4, 0.4, rng), x)

    def test_conditional_distribution(self, rng):
        out = forward_conditional_sample(np.full(100_000, 6), 0.3, 0.6, rng)
        assert _chi2_pvalue(out, binomial_pmf_vector(6, 0.5)) > 0.01

    def test_conditional_time_order(self, rng):
        with pytest.raises(ValueError):
            forward_conditional_sample([3], 0.7, 0.5, rng)
        with pytest.raises(ValueError):
            forward_conditional_sample([3], 0.0, 0.0, rng)

    @pytest.mark.parametrize("x0", range(7))
    def test_chapman_kolmogorov_exact(self, x0):
        for p_s, p_t in [(0.9, 0.4), (0.7, 0.7), (0.55, 0.1)]:
            two_step = thinning_pmf(binomial_pmf_vector(x0, p_s), p_t / p_s)
            assert total_variation(two_step, binomial_pmf_vector(x0, p_t)) < 1e-12


class TestBinomialPmf:
    def test_examples(self):
        assert binomial_pmf(4, 2, 0.5) == pytest.approx(0.375, abs=1e-15)
        assert binomial_pmf(0, 0, 0.3) == 1.0
        assert binomial_pmf(0, 0, 0.0) == 1.0

    def test_rational_oracle(self):
        p = Fraction(3, 10)
        exact = comb(50, 25) * p**25 * (1 - p) ** 25
        assert binomial_pmf(50, 25, 0.3) == pytest.approx(float(exact), rel=1e-12)

    @pytest.mark.parametrize("n,p", [(0, 0.2), (7, 0.0), (7, 1.0), (40, 0.37), (1000, 0.01)])
    def test_sums_to_one(self, n, p):
        assert abs(binomial_pmf_vector(n, p).sum() - 1.0) < 1e-10

    def test_large_n(self):
        assert binomial_pmf(10**6, 500_000, 0.5) == pytest.approx(stats.binom.pmf(500_000, 10**6, 0.5), rel=1e-9)

    def test_domain(self):
        with pytest.raises(ValueError):
            binomial_pmf(3, 4, 0.5)


class TestAttritionStep:
    def test_identity_step(self, rng):
        x = rng.integers(0, 20, (10, 3))
        y = rng.integers(0, 20, (10, 3))
        np.testing.assert_array_equal(attrition_step(x, y, 0.4, 0.4, 0.0, rng), x)

    @pytest.mark.parametrize("frac", [0.0, 0.5, 1.0])
    def test_marginal_preserved_exact(self, frac):
        p_t, p_s, x0 = 0.3, 0.7, 5
        sig = frac * sigma_max(p_t, p_s)
        pmf = attrition_step_pmf(binomial_pmf_vector(x0, p_t), x0, p_t, p_s, sig)
        assert total_variation(pmf, binomial_pmf_vector(x0, p_s)) < 1e-9

    def test_sampled_marginal(self, rng):
        x0, p_t, p_s = 5, 0.3, 0.7
        x_t = forward_sample(np.full(100_000, x0), p_t, rng)
        sig = 0.5 * sigma_max(p_t, p_s)
        x_s = attrition_step(x_t, x0 - x_t, p_t, p_s, sig, rng)
        assert _chi2_pvalue(x_s, binomial_pmf_vector(x0, p_s)) > 0.01

    def test_invalid_sigma(self, rng):
        with pytest.raises(ValueError, match="sigma"):
            attrition_step([1], [1], 0.5, 0.9, 0.3, rng)
        with pytest.raises(ValueError):
            attrition_step([1], [1], 0.5, 0.9, -0.1, rng)

    def test_negative_prediction_rejected(self, rng):
        with pytest.raises(ValueError):
            attrition_step([1], [-1], 0.5, 0.9, 0.0, rng)

    def test_zero_births_allowed(self, rng):
        out = attrition_step(np.zeros(5, int), np.zeros(5, int), 0.2, 0.6, 0.0, rng)
        np.testing.assert_array_equal(out, 0)


class TestRandomRound:
    def test_integer_unchanged(self, rng):
        np.testing.assert_array_equal(random_round(np.full(1000, 3.0), rng), 3)

    def test_mean_small(self, rng):
        assert abs(random_round(np.full(100_000, 0.3), rng).mean() - 0.3) < 0.005

    def test_support_and_rate(self, rng):
        out = random_round(np.full(100_000, 2.7), rng)
        assert set(np.unique(out)) <= {2, 3}
        assert _chi2_pvalue(out - 2, np.array([0.3, 0.7])) > 0.01

    @pytest.mark.parametrize("bad", [-0.1, np.nan, np.inf])
    def test_rejects(self, rng, bad):
        with pytest.raises(ValueError):
            random_round(np.array([1.0, bad]), rng)


class TestGuide:
    def test_endpoints_exact(self, rng):
        a = rng.uniform(0.1, 5, 100)
        b = rng.uniform(0.1, 5, 100)
        np.testing.assert_array_equal(guide(a, b, 1.0), a)
        np.testing.assert_array_equal(guide(a, b, 0.0), b)

    def test_geometric_mean(self):
        assert guide(np.array(4.0), np.array(1.0), 0.5) == pytest.approx(2.0, rel=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-6, 1e6), st.floats(1e-6, 1e6), st.floats(0, 5))
    def test_log_linear(self, a, b, g):
        lhs = np.log(guide(np.array(a), np.array(b), g))
        assert abs(lhs - (g * np.log(a) + (1 - g) * np.log(b))) <= 1e-12 * max(1.0, abs(lhs))

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            guide(np.array([1.0, 0.0]), np.array([1.0, 1.0]), 0.5)
        with pytest.raises(ValueError):
            guide(np.array([1.0]), np.array([1.0]), -1.0)


class TestPoisson:
    def test_zero_stays_zero(self, rng):
        out = poisson_randomize(np.array([0.0, 1.0, 0.0]), 10, rng)
        assert out[0] == 0 and out[2] == 0

    def test_mean(self, rng):
        assert abs(poisson_randomize(np.full(100_000, 2.5), 10, rng).mean() - 25) < 0.2

    def test_round_trip(self, rng):
        x = rng.uniform(0, 3, 10_000)
        back = de_randomize(poisson_randomize(x, 1000, rng), 1000)
        assert np.abs(back - x).mean() < 0.05

    def test_lambda_bound(self, rng):
        with pytest.raises(ValueError):
            poisson_randomize(np.ones(3), 0.5, rng)


class TestReverseChain:
    @pytest.mark.parametrize("eta", [None, 0.5])
    def test_recovers_point_mass(self, eta):
        rule = None if eta is None else (lambda pt, ps: eta * sigma_max(pt, ps))
        res = enumerate_reverse_chain(3, COS, 4, rule)
        assert total_variation(res.pmf, np.eye(4)[3]) < 1e-9
        assert res.discarded_mass < 1e-10

    def test_zero(self):
        res = enumerate_reverse_chain(0, COS, 5)
        np.testing.assert_array_equal(res.pmf, [1.0])

    def test_intermediate_marginals_are_binomial(self):
        res = enumerate_reverse_chain(5, COS, 6, lambda pt, ps: sigma_max(pt, ps))
        for s, pmf in zip(res.times[1:], res.marginals):
            p_s = float(np.cos(np.pi * s / 2) ** 2) if s < 1 else 0.0
            assert total_variation(pmf, binomial_pmf_vector(5, p_s)) < 1e-9

    def test_blackout_completion(self):
        res = enumerate_reverse_chain(4, PSchedule(ScheduleKind.BLACKOUT_CONTINUOUS), 5)
        assert total_variation(res.pmf, np.eye(5)[4]) < 1e-9

    def test_state_space_limit(self):
        with pytest.raises(StateSpaceError):
            enumerate_reverse_chain(60, COS, 3)


class TestRng:
    def test_same_seed_same_draws(self):
        a = forward_sample(np.arange(100), 0.5, make_rng(7))
        b = forward_sample(np.arange(100), 0.5, make_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_substreams_differ(self):
        r0, r1 = spawn_rngs(3, 2)
        assert r0.integers(0, 2**62) != r1.integers(0, 2**62)
        again = spawn_rngs(3, 2)[0]
        assert again.integers(0, 2**62) == spawn_rngs(3, 2)[0].integers(0, 2**62)

    def test_as_counts(self):
        assert as_counts([1.0, 2.0]).dtype.kind == "i"
        with pytest.raises(ValueError):
            as_counts([1.5])
        with pytest.raises(ValueError):
            as_counts([-1])
