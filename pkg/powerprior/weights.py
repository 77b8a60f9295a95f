"""
Survey weights: effective sample sizes, CLW propensity weights for the
non-probability sample, winsorization and Euclidean calibration.

The CLW pseudo-log-likelihood under the logistic link is

    l(theta) = sum_nps z'theta - sum_ps W2 * log(1 + exp(z'theta))

and every function below works with that exact form.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import expit

from powerprior.config import WeightOptions
from powerprior.errors import (
    ConvergenceError,
    InfeasibleCalibrationError,
    InsufficientRowsError,
    NonPositiveWeightError,
    RankDeficiencyError,
    SchemaError,
)
from data.survey_store import INTERCEPT, PopulationFacts, SurveySample, population_facts_from_ps

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-12


@dataclass(frozen=True)
class WeightSet:
    W: np.ndarray
    w: np.ndarray
    n_o: float


@dataclass(frozen=True)
class PropensityFit:
    theta: np.ndarray
    pi: np.ndarray
    W1: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    method: str = "newton"


@dataclass(frozen=True)
class CalibrationResult:
    lambda_: np.ndarray
    w_tilde: np.ndarray
    residual: np.ndarray
    n_negative: int = 0
    clamped: bool = False


@dataclass(frozen=True)
class NpsWeightTrail:
    """Every stage of the nps weight chain, kept for the ``weights`` CSV."""

    raw: np.ndarray
    winsorized: np.ndarray
    normalized: np.ndarray
    calibrated: np.ndarray
    calibration: Optional[CalibrationResult] = None

    @property
    def final(self) -> np.ndarray:
        return self.calibrated


def _check_weights(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=float).ravel()
    if W.size == 0:
        raise InsufficientRowsError("empty weight vector")
    bad = np.flatnonzero(~(W > 0))
    if bad.size:
        raise NonPositiveWeightError(f"nonpositive weight {W[bad[0]]} at row {bad[0] + 1}")
    return W


def effective_sample_size(W: np.ndarray) -> float:
    """(sum W)^2 / sum W^2, unchanged when W is rescaled."""
    W = _check_weights(W)
    # 스케일 불변: 최대값으로 나눈 뒤 계산
    u = W / W.max()
    return math.fsum(u) ** 2 / math.fsum(u * u)


def adjust_weights(W: np.ndarray) -> WeightSet:
    """
    가중치를 유효 표본 크기에 맞게 조정합니다.

    Args:
        W: original survey weights (all positive)

    Returns:
        WeightSet with w_i = n_o W_i / sum W, so sum w = n_o
    """
    W = _check_weights(W)
    n_o = effective_sample_size(W)
    w = n_o * W / math.fsum(W)
    return WeightSet(W=W, w=w, n_o=n_o)


def _check_design(
    Z1: np.ndarray, Z2: np.ndarray, W2: np.ndarray, G1: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    Z1 = np.atleast_2d(np.asarray(Z1, dtype=float))
    Z2 = np.atleast_2d(np.asarray(Z2, dtype=float))
    W2 = np.asarray(W2, dtype=float).ravel()
    if Z1.shape[1] != Z2.shape[1]:
        raise SchemaError(f"nps has {Z1.shape[1]} participation covariates, ps has {Z2.shape[1]}")
    if W2.shape[0] != Z2.shape[0]:
        raise SchemaError("ps weights and covariates differ in length")
    G1 = np.ones(Z1.shape[0]) if G1 is None else np.asarray(G1, dtype=float).ravel()
    if G1.shape[0] != Z1.shape[0]:
        raise SchemaError("nps frequency weights and covariates differ in length")
    return Z1, Z2, W2, G1


def clw_pseudo_loglik(
    theta: np.ndarray, Z1: np.ndarray, Z2: np.ndarray, W2: np.ndarray, G1: Optional[np.ndarray] = None
) -> float:
    """G1: optional nps frequency weights (Bayesian bootstrap), 1 per row by default."""
    Z1, Z2, W2, G1 = _check_design(Z1, Z2, W2, G1)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (Z1.shape[1],):
        raise SchemaError(f"theta has shape {theta.shape}, expected ({Z1.shape[1]},)")
    # log{pi/(1-pi)} = eta, log(1-pi) = -log(1+e^eta)
    return float(G1 @ (Z1 @ theta) - W2 @ np.logaddexp(0.0, Z2 @ theta))


def clw_gradient(
    theta: np.ndarray, Z1: np.ndarray, Z2: np.ndarray, W2: np.ndarray, G1: Optional[np.ndarray] = None
) -> np.ndarray:
    Z1, Z2, W2, G1 = _check_design(Z1, Z2, W2, G1)
    theta = np.asarray(theta, dtype=float)
    pi2 = expit(Z2 @ theta)
    return Z1.T @ G1 - Z2.T @ (W2 * pi2)


def clw_hessian(theta: np.ndarray, Z1: np.ndarray, Z2: np.ndarray, W2: np.ndarray) -> np.ndarray:
    Z1, Z2, W2, _ = _check_design(Z1, Z2, W2)
    pi2 = expit(Z2 @ np.asarray(theta, dtype=float))
    return -(Z2.T * (W2 * pi2 * (1.0 - pi2))) @ Z2


def _grad_tolerance(tol: float, Z1: np.ndarray, G1: np.ndarray) -> float:
    # 기울기 크기는 표본 합계 규모를 따름
    return tol * max(1.0, float(np.max(np.abs(Z1.T @ G1))))


def _newton_direction(info: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Solve info @ step = grad, adding a growing ridge while info is near singular."""
    ridge = 0.0
    base = max(float(np.max(np.diag(info))), 1e-300)
    for _ in range(12):
        try:
            factor = linalg.cho_factor(info + ridge * np.eye(info.shape[0]), lower=True)
            if np.min(np.abs(np.diag(factor[0]))) ** 2 > PIVOT_TOL * base:
                return linalg.cho_solve(factor, grad)
        except linalg.LinAlgError:
            pass
        ridge = base * 1e-10 if ridge == 0.0 else ridge * 100.0
    raise RankDeficiencyError("CLW information matrix stays singular under regularization")


def _newton(theta, Z1, Z2, W2, G1, opts: WeightOptions):
    """Newton with Armijo backtracking; a ridge keeps the direction an ascent direction."""
    loglik = clw_pseudo_loglik(theta, Z1, Z2, W2, G1)
    target = _grad_tolerance(opts.tol, Z1, G1)
    grad = clw_gradient(theta, Z1, Z2, W2, G1)
    for iteration in range(1, opts.max_iter + 1):
        if np.max(np.abs(grad)) <= target:
            return theta, iteration - 1, True
        try:
            step = _newton_direction(-clw_hessian(theta, Z1, Z2, W2), grad)
        except RankDeficiencyError:
            logger.debug(f"Newton 정보행렬 특이: iteration {iteration}")
            return theta, iteration, False
        slope = float(grad @ step)
        slack = 1e-12 * (1.0 + abs(loglik))
        scale = 1.0
        while True:
            candidate = theta + scale * step
            new_loglik = clw_pseudo_loglik(candidate, Z1, Z2, W2, G1)
            if not opts.damping or new_loglik >= loglik + 1e-4 * scale * slope - slack:
                break
            scale *= 0.5
            if scale < 1e-10:
                return theta, iteration, False
        theta, loglik = candidate, new_loglik
        grad = clw_gradient(theta, Z1, Z2, W2, G1)
        logger.debug(f"Newton {iteration}: step={scale:g} loglik={loglik:.10g} |grad|={np.max(np.abs(grad)):.3e}")
    return theta, opts.max_iter, bool(np.max(np.abs(grad)) <= target)


def _gradient_ascent(theta, Z1, Z2, W2, G1, opts: WeightOptions):
    """Diagonally preconditioned ascent with Armijo backtracking."""
    target = _grad_tolerance(opts.tol, Z1, G1)
    loglik = clw_pseudo_loglik(theta, Z1, Z2, W2, G1)
    step_size = 1.0
    for iteration in range(1, opts.fallback_max_iter + 1):
        grad = clw_gradient(theta, Z1, Z2, W2, G1)
        if np.max(np.abs(grad)) <= target:
            return theta, iteration - 1, True
        precond = np.maximum(np.abs(np.diag(clw_hessian(theta, Z1, Z2, W2))), 1e-12)
        direction = grad / precond
        slope = float(grad @ direction)
        while step_size > 1e-16:
            candidate = theta + step_size * direction
            new_loglik = clw_pseudo_loglik(candidate, Z1, Z2, W2, G1)
            if new_loglik >= loglik + 1e-4 * step_size * slope:
                break
            step_size *= 0.5
        else:
            return theta, iteration, False
        theta, loglik = candidate, new_loglik
        step_size = min(1.0, 2.0 * step_size)
    grad = clw_gradient(theta, Z1, Z2, W2, G1)
    return theta, opts.fallback_max_iter, bool(np.max(np.abs(grad)) <= target)


def estimate_propensity(
    Z1: np.ndarray,
    Z2: np.ndarray,
    W2: np.ndarray,
    opts: Optional[WeightOptions] = None,
    G1: Optional[np.ndarray] = None,
) -> PropensityFit:
    """
    CLW 의사우도로 nps 참여확률을 추정합니다.

    Newton with Armijo backtracking from theta = 0; if that stalls,
    gradient ascent with backtracking takes over from the last Newton
    iterate.

    Args:
        Z1: nps participation covariates (n1 x q)
        Z2: ps participation covariates (n2 x q)
        W2: ps design weights
        opts: solver settings
        G1: nps frequency weights (Bayesian bootstrap), all 1 when omitted

    Returns:
        PropensityFit with pi for the nps rows and W1 = 1/pi
    """
    opts = opts or WeightOptions()
    Z1, Z2, W2, G1 = _check_design(Z1, Z2, W2, G1)
    q = Z1.shape[1]
    if np.linalg.matrix_rank(np.vstack([Z1, Z2])) < q:
        raise RankDeficiencyError(f"combined participation design is rank deficient (q={q})")

    theta, iterations, converged = _newton(np.zeros(q), Z1, Z2, W2, G1, opts)
    method = "newton"
    if not converged:
        logger.warning(f"Newton 미수렴 ({iterations}회), gradient ascent 로 전환")
        theta, extra, converged = _gradient_ascent(theta, Z1, Z2, W2, G1, opts)
        iterations += extra
        method = "gradient_ascent"
    grad_norm = float(np.linalg.norm(clw_gradient(theta, Z1, Z2, W2, G1)))
    if not converged:
        raise ConvergenceError(
            f"CLW propensity estimation did not converge after {iterations} iterations "
            f"(gradient norm {grad_norm:.3e})"
        )
    pi = expit(Z1 @ theta)
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise ConvergenceError("fitted participation probabilities reached 0 or 1")
    logger.info(f"CLW 추정 완료: {method}, {iterations} iterations, |grad|={grad_norm:.3e}")
    return PropensityFit(
        theta=theta,
        pi=pi,
        W1=1.0 / pi,
        converged=True,
        iterations=iterations,
        final_gradient_norm=grad_norm,
        method=method,
    )


def winsorize_weights(W1: np.ndarray, lower: float = 1.0, upper_quantile: float = 0.99) -> np.ndarray:
    W1 = _check_weights(W1)
    upper = float(np.quantile(W1, upper_quantile))
    if lower >= upper:
        raise InfeasibleCalibrationError(
            f"winsorization bounds cross: lower {lower:g} >= upper {upper:g} "
            f"(quantile {upper_quantile:g})"
        )
    return np.clip(W1, lower, upper)


def normalize_to_population(W1: np.ndarray, N_hat: float) -> np.ndarray:
    W1 = _check_weights(W1)
    return W1 * (N_hat / math.fsum(W1))


def _spd_solve(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    try:
        factor = linalg.cholesky(A, lower=True)
    except linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"{what} is singular: {exc}") from exc
    if np.min(np.diag(factor)) ** 2 <= PIVOT_TOL * np.max(np.diag(A)):
        raise RankDeficiencyError(f"{what} is numerically singular")
    return linalg.cho_solve((factor, True), b)


def calibrate_weights(
    w: np.ndarray,
    Z: np.ndarray,
    t: np.ndarray,
    q: Optional[np.ndarray] = None,
    clamp_negative: bool = True,
    intercept_index: Optional[int] = 0,
) -> CalibrationResult:
    """
    Euclidean 거리 보정: sum w~ z = t 를 만족하는 가중치.

    Args:
        w: starting weights
        Z: calibration covariates (n x p)
        t: population totals (p)
        q: per-unit importance, defaults to 1
        clamp_negative: set negative calibrated weights to 1, then rescale
            so the ``intercept_index`` total is still met
        intercept_index: column of Z holding the intercept

    Returns:
        CalibrationResult
    """
    w = np.asarray(w, dtype=float).ravel()
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    t = np.asarray(t, dtype=float).ravel()
    if Z.shape != (w.shape[0], t.shape[0]):
        raise SchemaError(f"calibration matrix has shape {Z.shape}, expected ({w.shape[0]}, {t.shape[0]})")
    q = np.ones_like(w) if q is None else np.asarray(q, dtype=float).ravel()

    A = (Z.T * (q * w)) @ Z
    b = 2.0 * (t - Z.T @ w)
    lam = _spd_solve(A, b, "calibration matrix")
    w_tilde = w * (1.0 + q * (Z @ lam) / 2.0)

    negative = int(np.sum(w_tilde < 0))
    clamped = False
    if negative:
        logger.warning(f"보정 가중치 음수 {negative}개")
        if clamp_negative:
            w_tilde = np.where(w_tilde < 0, 1.0, w_tilde)
            if intercept_index is not None:
                total = math.fsum(w_tilde * Z[:, intercept_index])
                if not total > 0:
                    raise InfeasibleCalibrationError("cannot restore the population total after clamping")
                w_tilde = w_tilde * (t[intercept_index] / total)
            clamped = True
    residual = Z.T @ w_tilde - t
    return CalibrationResult(
        lambda_=lam, w_tilde=w_tilde, residual=residual, n_negative=negative, clamped=clamped
    )


def postprocess_nps_weights(
    W1: np.ndarray,
    N_hat: float,
    Z: Optional[np.ndarray] = None,
    totals: Optional[np.ndarray] = None,
    options: Optional[WeightOptions] = None,
    intercept_index: Optional[int] = 0,
    frequency: Optional[np.ndarray] = None,
) -> NpsWeightTrail:
    """
    Winsorize, normalize to N_hat, then calibrate (each step optional).

    ``frequency`` multiplies the per-unit weights after winsorization, so
    the lower clamp and the quantile cap act on 1/pi and not on the
    bootstrap multipliers.
    """
    options = options or WeightOptions()
    raw = _check_weights(W1)
    winsorized = (
        winsorize_weights(raw, options.lower_clamp, options.upper_quantile)
        if options.winsorize
        else raw
    )
    scaled = winsorized if frequency is None else winsorized * np.asarray(frequency, dtype=float)
    normalized = normalize_to_population(scaled, N_hat) if options.normalize else scaled
    calibration = None
    calibrated = normalized
    if totals is not None:
        if Z is None:
            raise SchemaError("calibration totals given without covariates")
        calibration = calibrate_weights(
            normalized,
            Z,
            totals,
            clamp_negative=options.clamp_negative,
            intercept_index=intercept_index,
        )
        calibrated = calibration.w_tilde
        if np.any(calibrated <= 0):
            raise InfeasibleCalibrationError(
                "calibrated nps weights are not all positive; rerun with clamping enabled"
            )
    return NpsWeightTrail(
        raw=raw,
        winsorized=winsorized,
        normalized=normalized,
        calibrated=calibrated,
        calibration=calibration,
    )


def supplied_propensity(W1: np.ndarray) -> PropensityFit:
    """Fit record for nps weights read from the input file (CLW skipped)."""
    W1 = _check_weights(W1)
    return PropensityFit(
        theta=np.zeros(0),
        pi=1.0 / W1,
        W1=W1,
        converged=True,
        iterations=0,
        final_gradient_norm=0.0,
        method="supplied",
    )


def estimate_nps_weights(
    nps: SurveySample,
    ps: SurveySample,
    options: Optional[WeightOptions] = None,
    calibrate: bool = False,
    external_facts: Optional[PopulationFacts] = None,
    frequency: Optional[np.ndarray] = None,
) -> Tuple[PropensityFit, NpsWeightTrail, PopulationFacts]:
    """
    nps 가중치 전체 과정: CLW 추정 -> winsorize -> N_hat 정규화 -> (보정).

    nps 에 가중치 열이 있으면 CLW 추정을 건너뛰고 그 값을 원가중치로 씁니다.

    Args:
        nps: non-probability sample
        ps: probability sample with design weights
        options: solver and post-processing settings
        calibrate: calibrate to the ps-estimated study covariate totals
        external_facts: calibrate to these totals instead (implies calibrate)
        frequency: nps row multipliers (Bayesian bootstrap), 1 when omitted

    Returns:
        (propensity fit, weight trail, population facts from the ps)
    """
    options = options or WeightOptions()
    if nps.W is not None:
        fit = supplied_propensity(nps.W)
    else:
        fit = estimate_propensity(
            nps.participation_matrix, ps.participation_matrix, ps.W, options, frequency
        )
    facts = population_facts_from_ps(ps)
    intercept_index = (
        list(nps.study_columns).index(INTERCEPT) if INTERCEPT in nps.study_columns else None
    )
    totals = None
    if external_facts is not None:
        totals = external_facts.N_hat * external_facts.xbar_for(nps.study_columns)
    elif calibrate:
        totals = facts.totals
    trail = postprocess_nps_weights(
        fit.W1,
        facts.N_hat,
        nps.study_matrix if totals is not None else None,
        totals,
        options,
        intercept_index,
        frequency,
    )
    return fit, trail, facts
