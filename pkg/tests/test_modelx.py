"""Conditional model construction, distortion, fitting, and TV distances."""

import json
import math

import numpy as np
import pytest

from seqci.errors import DimensionMismatch, RankDeficient, SingularMatrix, SupportMismatch, UnsupportedModel
from seqci.modelx import (
    MIN_VARIANCE,
    DiscreteConditional,
    DistortedGaussian,
    FixedGaussian,
    GaussianConditional,
    distort_mean,
    fit_gaussian_conditional,
    gaussian_conditional_from_joint,
    model_from_json,
    model_to_json,
    toeplitz_joint,
    tv_distance_discrete,
    tv_distance_product,
)


class TestToeplitz:
    def test_q2(self):
        sigma = toeplitz_joint(2)
        assert np.allclose(sigma, [[1.0, 0.5], [0.5, 1.0]])

    def test_q3_alternating(self):
        sigma = toeplitz_joint(3, alternating=True)
        assert sigma[0, 1] == pytest.approx(-0.5)
        assert sigma[0, 2] == pytest.approx(1 / 3)
        assert sigma[1, 2] == pytest.approx(-0.5)

    @pytest.mark.parametrize("q", [2, 4, 8])
    @pytest.mark.parametrize("alternating", [False, True])
    def test_unit_diagonal_and_spd(self, q, alternating):
        sigma = toeplitz_joint(q, alternating)
        assert np.allclose(np.diag(sigma), 1.0)
        assert np.allclose(sigma, sigma.T)
        assert np.min(np.linalg.eigvalsh(sigma)) > 0

    def test_rejects_small_q(self):
        with pytest.raises(ValueError):
            toeplitz_joint(1)


class TestConditionalFromJoint:
    def test_q2_by_hand(self):
        spec = gaussian_conditional_from_joint(np.array([[1.0, 0.5], [0.5, 1.0]]))
        assert spec.weights == pytest.approx([0.5])
        assert spec.sigma2 == pytest.approx(0.75)
        assert spec.intercept == 0.0

    def test_diagonal_is_independence(self):
        spec = gaussian_conditional_from_joint(np.eye(4))
        assert np.allclose(spec.weights, 0.0)
        assert spec.sigma2 == pytest.approx(1.0)

    @pytest.mark.parametrize("q", [3, 4, 6])
    def test_matches_lstsq_oracle(self, q):
        sigma = toeplitz_joint(q)
        spec = gaussian_conditional_from_joint(sigma)
        # independent route: least-squares solve of the normal equations
        w_oracle = np.linalg.lstsq(sigma[1:, 1:], sigma[1:, 0], rcond=None)[0]
        s2_oracle = sigma[0, 0] - sigma[0, 1:] @ w_oracle
        assert np.max(np.abs(spec.weights - w_oracle)) < 1e-10
        assert abs(spec.sigma2 - s2_oracle) < 1e-10

    def test_singular_submatrix_rejected(self):
        sigma = np.array(
            [[1.0, 0.5, 0.5], [0.5, 1.0, 1.0], [0.5, 1.0, 1.0]]
        )  # z-block duplicated
        with pytest.raises(SingularMatrix):
            gaussian_conditional_from_joint(sigma)

    def test_regression_recovers_conditional(self):
        # simulate the joint, regress x on z: weights and sigma2 must match
        rng = np.random.default_rng(10)
        q = 4
        sigma = toeplitz_joint(q)
        spec = gaussian_conditional_from_joint(sigma)
        n = 100_000
        block = rng.standard_normal((n, q)) @ np.linalg.cholesky(sigma).T
        fitted = fit_gaussian_conditional(block[:, 0], block[:, 1:])
        se_w = math.sqrt(spec.sigma2 / n) * 3  # loose per-coefficient scale
        assert np.max(np.abs(fitted.weights - spec.weights)) < 4 * se_w
        assert abs(fitted.sigma2 - spec.sigma2) < 4 * spec.sigma2 * math.sqrt(2.0 / n)


class TestGaussianConditional:
    def test_mean_with_and_without_intercept_slot(self):
        spec = GaussianConditional(weights=[2.0, -1.0], intercept=0.5, sigma2=1.0)
        assert spec.mean([3.0, 1.0]) == pytest.approx(0.5 + 6.0 - 1.0)
        assert spec.mean([1.0, 3.0, 1.0]) == pytest.approx(0.5 + 6.0 - 1.0)
        with pytest.raises(DimensionMismatch):
            spec.mean([1.0, 2.0, 3.0, 4.0])

    def test_sampling_density_agreement(self):
        rng = np.random.default_rng(12)
        spec = GaussianConditional(weights=[0.5], intercept=0.2, sigma2=0.8)
        z = np.array([1.0, 0.7])
        draws = spec.sample_many(z, 100_000, rng)
        # compare histogram mass to the density integral on a coarse grid
        edges = np.linspace(-3, 3, 13) + spec.mean(z)
        hist, _ = np.histogram(draws, bins=edges)
        for k in range(len(edges) - 1):
            mid = 0.5 * (edges[k] + edges[k + 1])
            width = edges[k + 1] - edges[k]
            expected = spec.density(mid, z) * width
            se = math.sqrt(max(expected * (1 - expected), 1e-12) / draws.size)
            assert abs(hist[k] / draws.size - expected) < 4 * se + 2e-3

    def test_rejects_bad_variance(self):
        with pytest.raises(ValueError):
            GaussianConditional(weights=[1.0], intercept=0.0, sigma2=0.0)


class TestDiscreteConditional:
    def test_probability_validation(self):
        with pytest.raises(ValueError):
            DiscreteConditional([0.0, 1.0], {(0.0,): [0.6, 0.6]})
        with pytest.raises(ValueError):
            DiscreteConditional([0.0, 1.0], {(0.0,): [1.2, -0.2]})

    def test_unknown_z_value(self):
        q = DiscreteConditional([0.0, 1.0], {(0.0,): [0.5, 0.5]})
        with pytest.raises(KeyError):
            q.weights_at((1.0,))

    def test_sampling_matches_pmf(self):
        rng = np.random.default_rng(13)
        q = DiscreteConditional([1.0, 2.0, 5.0], {(0.0,): [0.2, 0.3, 0.5]})
        draws = q.sample_many((0.0,), 100_000, rng)
        for value, prob in zip([1.0, 2.0, 5.0], [0.2, 0.3, 0.5]):
            rate = np.mean(draws == value)
            se = math.sqrt(prob * (1 - prob) / draws.size)
            assert abs(rate - prob) < 4 * se
        assert q.mean((0.0,)) == pytest.approx(0.2 + 0.6 + 2.5)
        assert q.pmf(2.0, (0.0,)) == pytest.approx(0.3)
        assert q.pmf(17.0, (0.0,)) == 0.0


class TestDistortions:
    def test_zero_xi_is_identity_for_all_kinds(self):
        spec = GaussianConditional(weights=[1.0], intercept=0.0, sigma2=1.0)
        for kind in ("cubic", "quadratic", "tanh"):
            distorted = distort_mean(spec, kind, 0.0)
            assert distorted.mean([0.7]) == pytest.approx(0.7)

    def test_cubic_example(self):
        spec = GaussianConditional(weights=[1.0], intercept=0.0, sigma2=1.0)
        distorted = distort_mean(spec, "cubic", 0.1)
        assert distorted.mean([2.0]) == pytest.approx(1.2)

    def test_quadratic_example(self):
        spec = GaussianConditional(weights=[1.0], intercept=0.0, sigma2=1.0)
        distorted = distort_mean(spec, "quadratic", 0.5)
        assert distorted.mean([-1.0]) == pytest.approx(-0.5)

    def test_tanh_continuity_at_zero(self):
        spec = GaussianConditional(weights=[1.0], intercept=0.0, sigma2=1.0)
        distorted = distort_mean(spec, "tanh", 1e-8)
        for mu in np.linspace(-10, 10, 21):
            assert abs(distorted.mean([mu]) - mu) < 1e-6

    def test_variance_unchanged(self):
        spec = GaussianConditional(weights=[1.0], intercept=0.0, sigma2=0.37)
        distorted = distort_mean(spec, "cubic", 0.2)
        rng = np.random.default_rng(14)
        draws = distorted.sample_many([1.5], 200_000, rng)
        assert draws.std() ** 2 == pytest.approx(0.37, rel=0.05)

    def test_unknown_kind(self):
        spec = GaussianConditional(weights=[1.0], intercept=0.0, sigma2=1.0)
        with pytest.raises(ValueError):
            distort_mean(spec, "quartic", 0.1)


class TestFitGaussianConditional:
    def test_zero_noise_hits_variance_floor(self):
        z = np.linspace(-1, 1, 50)
        x = 2.0 * z + 0.3
        fitted = fit_gaussian_conditional(x, z)
        assert fitted.sigma2 == MIN_VARIANCE
        assert fitted.weights == pytest.approx([2.0])
        assert fitted.intercept == pytest.approx(0.3)

    def test_consistency(self):
        rng = np.random.default_rng(15)
        spec = GaussianConditional(weights=[0.4, -0.7], intercept=0.1, sigma2=0.5)
        n = 50_000
        z = rng.standard_normal((n, 2))
        x = np.array([spec.mean(z[i]) for i in range(0, n, 1)]) + math.sqrt(0.5) * rng.standard_normal(n)
        fitted = fit_gaussian_conditional(x, z)
        se = math.sqrt(0.5 / n)
        assert np.max(np.abs(fitted.weights - spec.weights)) < 4 * se * 2
        assert abs(fitted.sigma2 - 0.5) < 4 * 0.5 * math.sqrt(2.0 / n)

    def test_duplicated_constant_column_rank_deficient(self):
        rng = np.random.default_rng(16)
        z = np.column_stack([np.ones(40), rng.standard_normal(40)])
        with pytest.raises(RankDeficient):
            fit_gaussian_conditional(rng.standard_normal(40), z)

    def test_too_few_samples(self):
        with pytest.raises(RankDeficient):
            fit_gaussian_conditional([1.0, 2.0], np.array([[1.0], [2.0]]))


class TestTotalVariation:
    def test_identical_is_zero(self):
        q = DiscreteConditional([0.0, 1.0], {(0.0,): [0.5, 0.5]})
        assert tv_distance_discrete(q, q, (0.0,)) == 0.0

    def test_bernoulli_example(self):
        p = DiscreteConditional([0.0, 1.0], {(0.0,): [0.5, 0.5]})
        q = DiscreteConditional([0.0, 1.0], {(0.0,): [0.4, 0.6]})
        assert tv_distance_discrete(p, q, (0.0,)) == pytest.approx(0.1)

    def test_product_of_two_by_enumeration(self):
        p = DiscreteConditional([0.0, 1.0], {(0.0,): [0.5, 0.5]})
        q = DiscreteConditional([0.0, 1.0], {(0.0,): [0.4, 0.6]})
        tv, method = tv_distance_product(p, q, [(0.0,), (0.0,)])
        assert method == "exact"
        # brute force over the four outcomes
        pj = np.outer([0.5, 0.5], [0.5, 0.5]).ravel()
        qj = np.outer([0.4, 0.6], [0.4, 0.6]).ravel()
        assert tv == pytest.approx(0.5 * np.abs(pj - qj).sum())

    def test_product_upper_bound_fallback(self):
        p = DiscreteConditional([0.0, 1.0], {(0.0,): [0.5, 0.5]})
        q = DiscreteConditional([0.0, 1.0], {(0.0,): [0.45, 0.55]})
        n = 25  # 2^25 > the default enumeration limit
        tv, method = tv_distance_product(p, q, [(0.0,)] * n)
        assert method == "upper-bound"
        assert tv == pytest.approx(min(25 * 0.05, 1.0))

    def test_exact_never_exceeds_upper_bound(self):
        rng = np.random.default_rng(17)
        for _ in range(30):
            pv = rng.dirichlet(np.ones(3))
            qv = rng.dirichlet(np.ones(3))
            p = DiscreteConditional([0, 1, 2], {(0.0,): pv})
            q = DiscreteConditional([0, 1, 2], {(0.0,): qv})
            zs = [(0.0,)] * 4
            exact, _ = tv_distance_product(p, q, zs)
            bound, _ = tv_distance_product(p, q, zs, enumeration_limit=1)
            assert exact <= bound + 1e-12

    def test_triangle_inequality_and_symmetry(self):
        rng = np.random.default_rng(18)
        for _ in range(50):
            vecs = [rng.dirichlet(np.ones(4)) for _ in range(3)]
            models = [DiscreteConditional([0, 1, 2, 3], {(0.0,): v}) for v in vecs]
            d01 = tv_distance_discrete(models[0], models[1], (0.0,))
            d12 = tv_distance_discrete(models[1], models[2], (0.0,))
            d02 = tv_distance_discrete(models[0], models[2], (0.0,))
            assert d02 <= d01 + d12 + 1e-12
            assert d01 == pytest.approx(tv_distance_discrete(models[1], models[0], (0.0,)))
            assert 0.0 <= d01 <= 1.0

    def test_support_mismatch(self):
        p = DiscreteConditional([0.0, 1.0], {(0.0,): [0.5, 0.5]})
        q = DiscreteConditional([0.0, 2.0], {(0.0,): [0.5, 0.5]})
        with pytest.raises(SupportMismatch):
            tv_distance_discrete(p, q, (0.0,))


class TestSerialization:
    def test_gaussian_round_trip_exact(self):
        spec = GaussianConditional(weights=[0.1, -0.25], intercept=1.5, sigma2=0.75)
        text = model_to_json(spec)
        back = model_from_json(text)
        assert isinstance(back, GaussianConditional)
        assert np.array_equal(back.weights, spec.weights)
        assert back.intercept == spec.intercept
        assert back.sigma2 == spec.sigma2
        payload = json.loads(text)
        assert payload["type"] == "gaussian"

    def test_gaussian_round_trip_non_decimal_floats(self):
        spec = gaussian_conditional_from_joint(toeplitz_joint(4))
        back = model_from_json(model_to_json(spec))
        assert np.array_equal(back.weights, spec.weights)
        assert back.sigma2 == spec.sigma2

    def test_discrete_round_trip(self):
        q = DiscreteConditional([0.0, 1.0], {(0.0,): [0.25, 0.75], (1.0,): [0.5, 0.5]})
        back = model_from_json(model_to_json(q))
        assert isinstance(back, DiscreteConditional)
        assert np.array_equal(back.support(), q.support())
        for key in ((0.0,), (1.0,)):
            assert np.array_equal(back.weights_at(key), q.weights_at(key))

    def test_distorted_not_serializable(self):
        spec = GaussianConditional(weights=[1.0], intercept=0.0, sigma2=1.0)
        with pytest.raises(UnsupportedModel):
            model_to_json(DistortedGaussian(spec, "cubic", 0.1))


def test_fixed_gaussian():
    model = FixedGaussian(mu=2.0, sigma2=0.25)
    rng = np.random.default_rng(19)
    draws = model.sample_many(None, 50_000, rng)
    assert draws.mean() == pytest.approx(2.0, abs=4 * 0.5 / math.sqrt(50_000))
    assert model.mean(None) == 2.0
    with pytest.raises(ValueError):
        FixedGaussian(mu=0.0, sigma2=0.0)
