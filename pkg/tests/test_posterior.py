import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from cmsnigp.numerics.combinatorics import gen_factorial_table
from cmsnigp.numerics.special import log_sum_exp
from cmsnigp.posterior import (
    BucketPmfCache,
    NigpModel,
    PosteriorPmf,
    VTable,
    dp_bucket_log_pmf,
    dp_bucket_posterior,
    dp_sketch_posterior,
    exact_pmf_enumeration,
    integer_partitions,
    k_distribution,
    log_V,
    mc_nigp_pmf,
    nigp_bucket_posterior,
    nigp_log_pmf,
    nigp_log_pmf_vector,
    nigp_sketch_posterior,
)


def dp_weight(m, k, beta):
    """Ewens partition weight beta^k / (beta)_(m)."""
    return k * math.log(beta) - (special.gammaln(beta + m) - special.gammaln(beta))


class TestPartitionWeights:
    @pytest.mark.parametrize("alpha,sigma", [(0.3, 0.5), (1.0, 0.5), (7.0, 0.2), (2.0, 0.9)])
    def test_v11_is_one(self, alpha, sigma):
        assert abs(log_V(1, 1, alpha, sigma)) < 1e-8

    def test_dirichlet_limit_example(self):
        assert log_V(4, 2, 2.0, 1e-5) == pytest.approx(-math.log(24.0), abs=1e-3)

    @pytest.mark.parametrize("m", range(1, 9))
    def test_dirichlet_limit_relative(self, m):
        alpha = 3.0
        for k in range(1, m + 1):
            got = math.exp(log_V(m, k, alpha, 1e-5))
            want = math.exp(dp_weight(m, k, alpha / 2))
            assert abs(got - want) <= 1e-3 * want

    def test_k_law_normalizes(self):
        assert k_distribution(6, 1.0, 0.5).sum() == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("m", [1, 4, 10])
    def test_k_law_normalizes_other_parameters(self, m):
        assert k_distribution(m, 4.0, 0.3).sum() == pytest.approx(1.0, abs=1e-6)

    def test_one_block_probability_matches_predictive_chain(self):
        # Pr[K_3 = 1] is the chance that draws 2 and 3 both join the first block:
        # (V_{2,1}/V_{1,1})(1 - s) * (V_{3,1}/V_{2,1})(2 - s).
        alpha, s = 1.5, 0.5
        vt = VTable(alpha, s)
        chain = math.exp(vt.get(3, 1) - vt.get(1, 1)) * (1 - s) * (2 - s)
        assert k_distribution(3, alpha, s, vt)[0] == pytest.approx(chain, rel=1e-10)

    def test_table_caches(self):
        vt = VTable(1.0, 0.5)
        first = vt.get_many([(3, 1), (3, 2)])
        assert len(vt) == 2
        assert vt.get_many([(3, 2), (3, 1)]) == first[::-1]

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            log_V(3, 5, 1.0, 0.5)
        with pytest.raises(ValueError):
            log_V(3, 1, 1.0, 1.0)
        with pytest.raises(ValueError):
            VTable(0.0, 0.5)


class TestMarginalPmf:
    def test_empty_stream(self):
        assert nigp_log_pmf(0, 0, 3.0) == 0.0

    @pytest.mark.parametrize("m", [1, 5, 20, 100])
    @pytest.mark.parametrize("alpha", [0.1, 1.0, 10.0])
    def test_normalization(self, m, alpha):
        assert math.exp(log_sum_exp(nigp_log_pmf_vector(m, alpha))) == pytest.approx(1.0, abs=1e-8)

    def test_scalar_matches_vector(self):
        vec = nigp_log_pmf_vector(7, 2.0)
        for ell in range(8):
            assert nigp_log_pmf(ell, 7, 2.0) == pytest.approx(vec[ell], abs=1e-12)

    def test_matches_enumeration_at_m5(self):
        vec = np.exp(nigp_log_pmf_vector(5, 2.0))
        vt = VTable(2.0, 0.5)
        for ell in range(6):
            assert vec[ell] == pytest.approx(exact_pmf_enumeration(ell, 5, 2.0, 0.5, vt), abs=1e-6)

    def test_m1_closed_form_top_branch(self):
        # p(1; 1) = alpha ∫ x (1+2x)^(-3/2) e^{-alpha(sqrt(1+2x)-1)} dx. With t = sqrt(1+2x)
        # this is alpha ∫_1^inf (t^2 - 1) / (2 t^2) e^{-alpha(t-1)} dt, done here by trapezoid.
        alpha = 1.7
        t = np.linspace(1.0, 60.0, 400_001)
        integrand = (t * t - 1.0) / (2.0 * t * t) * np.exp(-alpha * (t - 1.0))
        want = alpha * np.trapezoid(integrand, t)
        assert math.exp(nigp_log_pmf(1, 1, alpha)) == pytest.approx(want, rel=1e-7)

    def test_rejects_ell_above_m(self):
        with pytest.raises(ValueError):
            nigp_log_pmf(4, 3, 1.0)

    def test_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            nigp_log_pmf_vector(3, -1.0)


class TestEnumerationOracle:
    def test_partitions_of_five(self):
        assert len(list(integer_partitions(5))) == 7
        for counts in integer_partitions(5):
            assert sum(r * c for r, c in enumerate(counts)) == 5

    def test_total_probability(self):
        vt = VTable(1.0, 0.5)
        total = sum(exact_pmf_enumeration(ell, 6, 1.0, 0.5, vt) for ell in range(7))
        assert total == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("sigma", [0.5, 0.25])
    def test_m1_hand_expansion(self, sigma):
        alpha = 1.3
        vt = VTable(alpha, sigma)
        p0 = exact_pmf_enumeration(0, 1, alpha, sigma, vt)
        p1 = exact_pmf_enumeration(1, 1, alpha, sigma, vt)
        assert p0 + p1 == pytest.approx(1.0, abs=1e-10)
        assert p1 == pytest.approx(math.exp(vt.get(2, 1) - vt.get(1, 1)) * (1 - sigma), rel=1e-12)

    def test_size_guard(self):
        with pytest.raises(ValueError):
            exact_pmf_enumeration(0, 11, 1.0, 0.5)


class TestMonteCarloOracle:
    @pytest.mark.parametrize("ell,m,alpha", [(0, 5, 1.0), (3, 5, 2.0), (5, 5, 2.0), (10, 40, 8.0)])
    def test_agrees_with_analytic(self, ell, m, alpha):
        est, se = mc_nigp_pmf(ell, m, alpha, 200_000, seed=ell + m)
        assert abs(est - math.exp(nigp_log_pmf(ell, m, alpha))) <= 3 * se

    def test_doubling_samples_shrinks_error(self):
        _, se1 = mc_nigp_pmf(2, 6, 1.0, 100_000, seed=3)
        _, se2 = mc_nigp_pmf(2, 6, 1.0, 200_000, seed=3)
        assert se1 / se2 == pytest.approx(math.sqrt(2.0), rel=0.1)

    def test_seed_determinism(self):
        assert mc_nigp_pmf(4, 4, 1.0, 10_000, seed=9) == mc_nigp_pmf(4, 4, 1.0, 10_000, seed=9)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            mc_nigp_pmf(0, 3, 1.0, 999, seed=0)

    def test_tilted_density_is_inverse_gamma(self):
        # Gamma(3/2)/Gamma(2) x^{-1/2} x^{-3/2} / (2 sqrt(pi)) e^{-1/(4x)} against InvGamma(1, 1/4).
        x = np.geomspace(1e-3, 1e3, 200)
        tilted = (special.gamma(1.5) / special.gamma(2.0)) * x ** -0.5 * x ** -1.5 \
            / (2 * math.sqrt(math.pi)) * np.exp(-1.0 / (4.0 * x))
        np.testing.assert_allclose(tilted, stats.invgamma.pdf(x, 1.0, scale=0.25), rtol=1e-12)

    def test_tilted_sampler_distribution(self):
        rng = np.random.default_rng(0)
        draws = 1.0 / (4.0 * rng.standard_exponential(20_000))
        assert stats.kstest(draws, stats.invgamma(1.0, scale=0.25).cdf).pvalue > 0.01


class TestSummaries:
    def test_point_mass(self):
        p = PosteriorPmf.point_mass(7)
        assert (p.mean(), p.median(), p.mode()) == (7.0, 7, 7)

    def test_uniform_on_two_points(self):
        p = PosteriorPmf.from_unnormalized(np.log([0.5, 0.5]))
        assert p.mean() == 0.5 and p.median() == 0 and p.mode() == 0

    def test_credible_interval(self):
        p = PosteriorPmf.from_unnormalized(np.log([0.01, 0.2, 0.58, 0.2, 0.01]))
        assert p.credible_interval(0.9) == (1, 3)
        with pytest.raises(ValueError):
            p.credible_interval(1.0)

    def test_rejects_all_zero_weights(self):
        with pytest.raises(ArithmeticError):
            PosteriorPmf.from_unnormalized([-np.inf, -np.inf])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=40))
    def test_normalized_and_bounded(self, w):
        p = PosteriorPmf.from_unnormalized(w)
        assert abs(log_sum_exp(p.log_probs)) <= 1e-10
        assert np.all(p.log_probs <= 0)
        assert 0 <= p.median() <= p.support_bound
        assert 0.0 <= p.mean() <= p.support_bound


class TestBucketPosterior:
    def test_zero_count(self):
        model = NigpModel(5.0, 10)
        assert nigp_bucket_posterior(0, model).support_bound == 0

    @pytest.mark.parametrize("c", [2, 9, 40])
    @pytest.mark.parametrize("alpha", [2.0, 20.0, 600.0])
    def test_decreasing_beyond_zero(self, c, alpha):
        p = nigp_bucket_posterior(c, NigpModel(alpha, 4)).log_probs
        assert np.all(np.diff(p[1:]) < 0)

    def test_small_bucket_mass_turns_up_at_the_count(self):
        # With alpha / J = 1/8 a single token owning the whole bucket is likely,
        # so l = c beats l = c - 1. The enumeration oracle agrees.
        p = np.exp(nigp_bucket_posterior(2, NigpModel(0.5, 4)).log_probs)
        assert p[2] > p[1]
        vt = VTable(0.125, 0.5)
        for ell in (1, 2):
            assert p[ell] == pytest.approx(exact_pmf_enumeration(ell, 2, 0.125, 0.5, vt), abs=1e-8)

    def test_normalized(self):
        p = nigp_bucket_posterior(30, NigpModel(3.0, 2))
        assert abs(log_sum_exp(p.log_probs)) <= 1e-10

    def test_model_validation(self):
        with pytest.raises(ValueError):
            NigpModel(1.0, 2, sigma=0.3)
        with pytest.raises(ValueError):
            NigpModel(0.0, 2)
        assert NigpModel(6.0, 3).bucket_alpha == 2.0


class TestDirichletBaseline:
    @pytest.mark.parametrize("c", range(0, 9))
    @pytest.mark.parametrize("beta", [0.5, 1.0, 3.0])
    def test_closed_form_matches_small_sigma_enumeration(self, c, beta):
        # The sigma -> 0 limit of the NGGP with mass alpha is a DP with mass alpha / 2.
        closed = np.exp(dp_bucket_log_pmf(c, beta))
        vt = VTable(2.0 * beta, 1e-6)
        for ell in range(c + 1):
            assert closed[ell] == pytest.approx(exact_pmf_enumeration(ell, c, 2.0 * beta, 1e-6, vt), abs=1e-4)

    @pytest.mark.parametrize("c", [0, 1, 10, 500])
    def test_normalized(self, c):
        assert abs(log_sum_exp(dp_bucket_log_pmf(c, 0.7))) <= 1e-10

    def test_zero_count(self):
        assert dp_bucket_posterior(0, 2.0).support_bound == 0

    def test_ewens_frequency_of_singleton(self):
        # With c prior draws the next draw is new with probability beta / (beta + c).
        assert math.exp(dp_bucket_log_pmf(6, 2.5)[0]) == pytest.approx(2.5 / 8.5, rel=1e-13)


class TestSketchPosterior:
    model = NigpModel(40.0, 8)

    def test_single_row_equals_bucket_posterior(self):
        np.testing.assert_array_equal(nigp_sketch_posterior([17], self.model).log_probs,
                                      nigp_bucket_posterior(17, self.model).log_probs)

    def test_row_permutation(self):
        a = nigp_sketch_posterior([30, 12, 19], self.model).log_probs
        b = nigp_sketch_posterior([19, 30, 12], self.model).log_probs
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_zero_row_gives_point_mass(self):
        assert nigp_sketch_posterior([9, 0, 4], self.model).mean() == 0.0

    def test_support_is_min_count(self):
        assert nigp_sketch_posterior([25, 8, 13], self.model).support_bound == 8

    def test_empty_vector(self):
        with pytest.raises(ValueError):
            nigp_sketch_posterior([], self.model)

    def test_cache_matches_direct(self):
        cache = BucketPmfCache("nigp", self.model.bucket_alpha)
        cache.prefetch({12: 5, 30: 12})
        np.testing.assert_allclose(cache.get(30, 12),
                                   nigp_log_pmf_vector(30, self.model.bucket_alpha, np.arange(13)), atol=1e-12)
        np.testing.assert_array_equal(nigp_sketch_posterior([30, 12], self.model, cache).log_probs,
                                      nigp_sketch_posterior([30, 12], self.model).log_probs)

    def test_dp_variant_uses_same_product(self):
        bv = [14, 6]
        direct = dp_bucket_log_pmf(14, 2.0, 6) + dp_bucket_log_pmf(6, 2.0)
        got = dp_sketch_posterior(bv, 16.0, 8).log_probs
        np.testing.assert_allclose(got, direct - log_sum_exp(direct), atol=1e-13)

    def test_cache_kind_checked(self):
        with pytest.raises(ValueError):
            BucketPmfCache("py", 1.0)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 60), min_size=1, max_size=4), st.floats(0.05, 500.0))
    def test_mean_never_exceeds_cms(self, bv, alpha):
        post = nigp_sketch_posterior(bv, NigpModel(alpha, 5))
        assert post.mean() <= min(bv) + 1e-12
        assert abs(log_sum_exp(post.log_probs)) <= 1e-10


class TestGeneralizedFactorialJoint:
    def test_k_law_uses_table(self):
        table = gen_factorial_table(0.5, 6)
        vt = VTable(1.0, 0.5)
        direct = sum(math.exp(vt.get(6, k) - k * math.log(0.5)) * table.coef(6, k) for k in range(1, 7))
        assert direct == pytest.approx(1.0, abs=1e-6)
