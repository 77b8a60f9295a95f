"""
가중치 테스트: 유효 표본 크기, CLW 성향점수, winsorize, 보정
"""

import math

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from data.population_simulator import poisson_sample
from powerprior.config import WeightOptions
from powerprior.rngstat import RngStream
from powerprior.errors import (
    ConvergenceError,
    InfeasibleCalibrationError,
    NonPositiveWeightError,
    RankDeficiencyError,
    SchemaError,
)
from powerprior.weights import (
    adjust_weights,
    calibrate_weights,
    clw_gradient,
    clw_hessian,
    clw_pseudo_loglik,
    effective_sample_size,
    estimate_nps_weights,
    estimate_propensity,
    normalize_to_population,
    postprocess_nps_weights,
    winsorize_weights,
)


def _design(rng, n, q):
    return np.column_stack([np.ones(n), rng.normal(size=(n, q - 1))])


class TestEffectiveSampleSize:
    def test_equal_weights(self):
        assert effective_sample_size(np.full(17, 3.5)) == pytest.approx(17.0)

    def test_hand_computed(self):
        assert effective_sample_size([1.0, 1.0, 1.0, 3.0]) == pytest.approx(3.0)

    def test_scale_invariance(self):
        W = np.random.default_rng(1).uniform(1.0, 100.0, 500)
        assert effective_sample_size(5.0 * W) == pytest.approx(effective_sample_size(W), rel=1e-14)

    def test_nonpositive_weight(self):
        with pytest.raises(NonPositiveWeightError):
            effective_sample_size([1.0, 0.0])


class TestAdjustWeights:
    def test_unit_weights(self):
        result = adjust_weights([1.0, 1.0])
        np.testing.assert_allclose(result.w, [1.0, 1.0])
        assert result.n_o == pytest.approx(2.0)

    def test_hand_computed(self):
        result = adjust_weights([1.0, 3.0])
        assert result.n_o == pytest.approx(1.6)
        np.testing.assert_allclose(result.w, [0.4, 1.2])

    def test_sum_identities(self):
        W = np.random.default_rng(2).gamma(2.0, 10.0, 1000)
        result = adjust_weights(W)
        assert math.fsum(result.w) == pytest.approx(result.n_o, rel=1e-12)
        assert math.fsum(result.w ** 2) == pytest.approx(result.n_o, rel=1e-12)


class TestClwLikelihood:
    def test_value_at_zero(self):
        W2 = np.array([2.0, 3.0, 5.0])
        value = clw_pseudo_loglik(np.zeros(1), np.ones((4, 1)), np.ones((3, 1)), W2)
        assert value == pytest.approx(-math.log(2.0) * W2.sum())

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(5)
        Z1, Z2 = _design(rng, 80, 3), _design(rng, 60, 3)
        W2 = rng.uniform(5.0, 30.0, 60)
        h = 1e-5
        for _ in range(20):
            theta = rng.normal(scale=0.5, size=3)
            numeric = np.array(
                [
                    (clw_pseudo_loglik(theta + h * e, Z1, Z2, W2) - clw_pseudo_loglik(theta - h * e, Z1, Z2, W2))
                    / (2 * h)
                    for e in np.eye(3)
                ]
            )
            analytic = clw_gradient(theta, Z1, Z2, W2)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-6 * np.abs(analytic).max())

    def test_hessian_matches_gradient_differences(self):
        rng = np.random.default_rng(6)
        Z1, Z2 = _design(rng, 50, 2), _design(rng, 40, 2)
        W2 = rng.uniform(1.0, 10.0, 40)
        theta = np.array([-1.0, 0.3])
        h = 1e-6
        numeric = np.column_stack(
            [(clw_gradient(theta + h * e, Z1, Z2, W2) - clw_gradient(theta - h * e, Z1, Z2, W2)) / (2 * h) for e in np.eye(2)]
        )
        np.testing.assert_allclose(clw_hessian(theta, Z1, Z2, W2), numeric, rtol=1e-5)

    def test_ascent_direction(self):
        rng = np.random.default_rng(7)
        Z1, Z2 = _design(rng, 50, 2), _design(rng, 40, 2)
        W2 = rng.uniform(1.0, 10.0, 40)
        theta = np.array([0.5, -0.5])
        grad = clw_gradient(theta, Z1, Z2, W2)
        assert clw_pseudo_loglik(theta - 1e-3 * grad, Z1, Z2, W2) < clw_pseudo_loglik(theta, Z1, Z2, W2)


class TestEstimatePropensity:
    def test_intercept_only_root(self):
        n1, W2 = 120, np.random.default_rng(8).uniform(10.0, 40.0, 90)
        fit = estimate_propensity(np.ones((n1, 1)), np.ones((90, 1)), W2, WeightOptions(tol=1e-12))
        np.testing.assert_allclose(fit.pi, n1 / W2.sum(), rtol=1e-8)
        assert fit.converged

    def test_gradient_vanishes_at_solution(self, sample_pair):
        nps, ps = sample_pair
        fit = estimate_propensity(nps.participation_matrix, ps.participation_matrix, ps.W)
        grad = clw_gradient(fit.theta, nps.participation_matrix, ps.participation_matrix, ps.W)
        scale = np.abs(nps.participation_matrix.sum(axis=0)).max()
        assert np.max(np.abs(grad)) <= 1e-8 * scale

    def test_tolerance_stability(self, sample_pair):
        nps, ps = sample_pair
        loose = estimate_propensity(nps.X, ps.X, ps.W, WeightOptions(tol=1e-6))
        tight = estimate_propensity(nps.X, ps.X, ps.W, WeightOptions(tol=1e-10))
        assert np.max(np.abs(loose.theta - tight.theta)) < 1e-5

    def test_census_reference_matches_logistic_regression(self, small_population):
        # ps = 전체 모집단, W2 = 1 이면 CLW 의사우도는 참여 지시변수의 로지스틱 우도와 같음
        pop = small_population
        rows = poisson_sample(pop.pi1, RngStream.named(4, "census"))
        fit = estimate_propensity(pop.X[rows], pop.X, np.ones(pop.N), WeightOptions(tol=1e-12))
        included = np.zeros(pop.N)
        included[rows] = 1.0
        oracle = LogisticRegression(penalty=None, fit_intercept=False, solver="newton-cg", tol=1e-12, max_iter=10000)
        oracle.fit(pop.X, included)
        np.testing.assert_allclose(fit.theta, oracle.coef_.ravel(), rtol=1e-4, atol=1e-6)

        truth = np.r_[pop.theta0, pop.spec.participation_coef]
        info = -clw_hessian(fit.theta, pop.X[rows], pop.X, np.ones(pop.N))
        se = np.sqrt(np.diag(np.linalg.inv(info)))
        assert np.all(np.abs(fit.theta - truth) < 4 * se)

    def test_rank_deficient_design(self):
        Z = np.column_stack([np.ones(30), np.ones(30)])
        with pytest.raises(RankDeficiencyError):
            estimate_propensity(Z, Z[:20], np.full(20, 5.0))

    def test_gradient_ascent_fallback(self):
        rng = np.random.default_rng(12)
        Z1, Z2 = _design(rng, 200, 3), _design(rng, 150, 3)
        W2 = rng.uniform(5.0, 20.0, 150)
        fit = estimate_propensity(Z1, Z2, W2, WeightOptions(max_iter=1))
        assert fit.method == "gradient_ascent"
        full = estimate_propensity(Z1, Z2, W2)
        np.testing.assert_allclose(fit.pi, full.pi, rtol=1e-4)

    def test_non_convergence(self, sample_pair):
        nps, ps = sample_pair
        with pytest.raises(ConvergenceError):
            estimate_propensity(nps.X, ps.X, ps.W, WeightOptions(max_iter=1, fallback_max_iter=1))

    def test_row_permutation_invariance(self, sample_pair):
        nps, ps = sample_pair
        rng = np.random.default_rng(13)
        p1, p2 = rng.permutation(nps.n), rng.permutation(ps.n)
        opts = WeightOptions(tol=1e-12)
        fit = estimate_propensity(nps.X, ps.X, ps.W, opts)
        permuted = estimate_propensity(nps.X[p1], ps.X[p2], ps.W[p2], opts)
        np.testing.assert_allclose(permuted.theta, fit.theta, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(permuted.pi, fit.pi[p1], rtol=1e-8)

    def test_integer_frequencies_equal_duplicated_rows(self):
        rng = np.random.default_rng(14)
        Z1, Z2 = _design(rng, 120, 3), _design(rng, 90, 3)
        W2 = rng.uniform(5.0, 30.0, 90)
        G1 = rng.integers(1, 4, 120).astype(float)
        opts = WeightOptions(tol=1e-12)
        weighted = estimate_propensity(Z1, Z2, W2, opts, G1)
        duplicated = estimate_propensity(np.repeat(Z1, G1.astype(int), axis=0), Z2, W2, opts)
        np.testing.assert_allclose(weighted.theta, duplicated.theta, rtol=1e-8, atol=1e-10)

    def test_damped_newton_with_dirichlet_frequencies(self, sample_pair):
        # Dirichlet 배수는 몇몇 행에 질량이 몰려도 Newton 으로 수렴해야 함
        nps, ps = sample_pair
        rng = np.random.default_rng(15)
        for _ in range(5):
            G1 = rng.dirichlet(np.ones(nps.n)) * nps.n
            fit = estimate_propensity(nps.X, ps.X, ps.W, G1=G1)
            assert fit.converged
            assert fit.method == "newton"

    def test_frequency_length_is_checked(self):
        Z = np.ones((10, 1))
        with pytest.raises(SchemaError):
            estimate_propensity(Z, Z, np.ones(10), G1=np.ones(9))


class TestWinsorize:
    def test_no_op_inside_bounds(self):
        W = np.linspace(1.5, 2.0, 100)
        np.testing.assert_array_equal(winsorize_weights(W, 1.0, 1.0), W)

    def test_lower_clamp_only(self):
        np.testing.assert_array_equal(winsorize_weights([0.5, 2.0, 3.0], 1.0, 1.0), [1.0, 2.0, 3.0])

    def test_extreme_outlier(self):
        W = np.random.default_rng(9).uniform(2.0, 10.0, 1000)
        W[17] = 1e6
        out = winsorize_weights(W, 1.0, 0.99)
        assert out.max() == pytest.approx(np.quantile(W, 0.99))

    def test_crossing_bounds(self):
        with pytest.raises(InfeasibleCalibrationError):
            winsorize_weights([0.2, 0.3, 0.4], 1.0, 0.99)

    def test_normalize(self):
        out = normalize_to_population([1.0, 3.0], 100.0)
        np.testing.assert_allclose(out, [25.0, 75.0])


class TestCalibration:
    def test_totals_already_met(self):
        rng = np.random.default_rng(10)
        w = rng.uniform(1.0, 5.0, 50)
        Z = _design(rng, 50, 3)
        result = calibrate_weights(w, Z, Z.T @ w)
        np.testing.assert_allclose(result.lambda_, 0.0, atol=1e-12)
        np.testing.assert_allclose(result.w_tilde, w)

    def test_intercept_only_by_hand(self):
        result = calibrate_weights([1.0, 1.0], np.ones((2, 1)), [4.0])
        np.testing.assert_allclose(result.w_tilde, [2.0, 2.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_calibration_equations(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.uniform(1.0, 5.0, 200)
        Z = _design(rng, 200, 3)
        t = Z.T @ w * rng.uniform(0.95, 1.05, 3)
        result = calibrate_weights(w, Z, t)
        assert result.n_negative == 0
        assert np.max(np.abs(result.residual)) <= 1e-8 * (1 + np.max(np.abs(t)))

    def test_negative_weights_are_clamped(self):
        w = np.ones(4)
        Z = np.column_stack([np.ones(4), [0.0, 0.0, 0.0, 10.0]])
        result = calibrate_weights(w, Z, np.array([4.0, -30.0]))
        assert result.n_negative > 0 and result.clamped
        assert np.all(result.w_tilde > 0)
        assert result.w_tilde.sum() == pytest.approx(4.0)

    def test_singular_system(self):
        Z = np.column_stack([np.ones(5), np.ones(5)])
        with pytest.raises(RankDeficiencyError):
            calibrate_weights(np.ones(5), Z, [5.0, 5.0])


class TestNpsWeightChain:
    def test_trail_stages(self):
        W1 = np.array([0.5, 2.0, 3.0, 4.0, 100.0])
        trail = postprocess_nps_weights(W1, 200.0, options=WeightOptions(upper_quantile=0.75))
        np.testing.assert_allclose(trail.winsorized, [1.0, 2.0, 3.0, 4.0, 4.0])
        assert trail.normalized.sum() == pytest.approx(200.0)
        np.testing.assert_array_equal(trail.final, trail.normalized)

    def test_switches_off(self):
        W1 = np.array([0.5, 2.0, 3.0])
        trail = postprocess_nps_weights(W1, 50.0, options=WeightOptions(winsorize=False, normalize=False))
        np.testing.assert_array_equal(trail.final, W1)

    def test_frequency_applies_after_winsorize(self):
        W1 = np.array([0.5, 2.0, 3.0, 4.0, 100.0])
        options = WeightOptions(upper_quantile=0.75, normalize=False)
        trail = postprocess_nps_weights(W1, 200.0, options=options, frequency=np.array([2.0, 1.0, 1.0, 1.0, 1.0]))
        np.testing.assert_allclose(trail.winsorized, [1.0, 2.0, 3.0, 4.0, 4.0])
        np.testing.assert_allclose(trail.final, [2.0, 2.0, 3.0, 4.0, 4.0])

    def test_supplied_nps_weights_skip_clw(self, sample_pair):
        nps, ps = sample_pair
        W1 = np.random.default_rng(16).uniform(2.0, 20.0, nps.n)
        fit, trail, facts = estimate_nps_weights(nps.with_weights(W1), ps)
        assert fit.method == "supplied"
        assert fit.theta.shape == (0,)
        np.testing.assert_array_equal(trail.raw, W1)
        assert trail.final.sum() == pytest.approx(facts.N_hat)

    def test_estimate_with_calibration(self, sample_pair):
        nps, ps = sample_pair
        fit, trail, facts = estimate_nps_weights(nps, ps, calibrate=True)
        assert fit.converged
        assert trail.calibration is not None
        achieved = nps.study_matrix.T @ trail.final
        np.testing.assert_allclose(achieved, facts.totals, rtol=1e-8)

    def test_without_calibration_sums_to_population(self, sample_pair):
        nps, ps = sample_pair
        _, trail, facts = estimate_nps_weights(nps, ps)
        assert trail.final.sum() == pytest.approx(facts.N_hat)
