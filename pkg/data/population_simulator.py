#!/usr/bin/env python3
"""
유한모집단 생성 및 표본추출 (시뮬레이션 연구용)

One finite population per (rho, seed): covariates x1 ~ U(20, 90), x2 and
x3 Bernoulli given the earlier covariates, y = linear mean + error with
the error scaled so that Cor(mean, y) equals rho exactly. The nps is a
Poisson sample with logistic participation probabilities, the ps a
randomized systematic PPS sample with a size measure of fixed max/min
ratio.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from powerprior.config import Misspecification, PopulationSpec
from powerprior.errors import ConvergenceError, InsufficientRowsError, NumericalError
from powerprior.rngstat import RandomSource, RngStream, as_generator
from data.survey_store import INTERCEPT, SampleRole, SurveySample

logger = logging.getLogger(__name__)

COLUMNS = (INTERCEPT, "x1", "x2", "x3")
CORRELATION_TOL = 0.005


@dataclass(frozen=True)
class FinitePopulation:
    X: np.ndarray
    y: np.ndarray
    true_mean: float
    pi1: np.ndarray
    pi2: np.ndarray
    theta0: float
    theta1: float
    sigma2: float
    correlation: float
    spec: PopulationSpec

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def study_columns(self) -> Tuple[str, ...]:
        if self.spec.misspec == Misspecification.NONE:
            return COLUMNS
        # x3 는 참여 모형에만 남김
        return COLUMNS[:3]


def _second_stage(x1: np.ndarray, beta: Sequence[float], x2: Optional[np.ndarray] = None) -> np.ndarray:
    base = beta[0] + beta[1] * x1
    if x2 is not None:
        base = base + beta[2] * x2
    return base ** 0.1


def calibrate_theta0(X: np.ndarray, n1: float, coef: Sequence[float] = (0.1, 0.2, 0.1)) -> float:
    """
    sum logistic(theta0 + z'coef) = n1 을 만족하는 theta0 (brentq).

    Args:
        X: population design with the intercept in column 0
        n1: expected nps size
        coef: participation coefficients of the non-intercept columns
    """
    lin = np.asarray(X, dtype=float)[:, 1:] @ np.asarray(coef, dtype=float)

    def excess(theta0: float) -> float:
        return math.fsum(expit(theta0 + lin)) - n1

    lo, hi = -100.0, 100.0
    if not excess(lo) < 0.0 < excess(hi):
        raise ConvergenceError(f"no theta0 in [{lo}, {hi}] gives expected nps size {n1}")
    theta0 = brentq(excess, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(excess(theta0)) > 1e-6:
        raise ConvergenceError(f"theta0 calibration residual {excess(theta0):.3e} exceeds 1e-6")
    return float(theta0)


def calibrate_theta1(X: np.ndarray, ratio: float = 50.0, coef: Sequence[float] = (1.0, 0.2, 0.1)) -> float:
    """theta1 so that max z / min z == ratio, with z = theta1 + z'coef."""
    if ratio <= 1.0:
        raise NumericalError(f"size ratio must exceed 1, got {ratio}")
    b = np.asarray(X, dtype=float)[:, 1:] @ np.asarray(coef, dtype=float)
    theta1 = (b.max() - ratio * b.min()) / (ratio - 1.0)
    if not theta1 + b.min() > 0.0:
        raise NumericalError("size measure is not positive (constant covariates?)")
    return float(theta1)


def generate_population(spec: PopulationSpec, source: Optional[RandomSource] = None) -> FinitePopulation:
    """
    시뮬레이션용 유한모집단을 생성합니다.

    Args:
        spec: population settings
        source: random source, defaults to a stream keyed by (seed, rho)

    Returns:
        FinitePopulation with calibrated inclusion probabilities
    """
    rng = as_generator(source or RngStream.named(spec.seed, f"population:{spec.rho:.6g}"))
    N, beta = spec.N, spec.beta
    x1 = rng.uniform(20.0, 90.0, N)
    x2 = (rng.random(N) < expit(_second_stage(x1, beta))).astype(float)
    x3 = (rng.random(N) < expit(_second_stage(x1, beta, x2))).astype(float)
    X = np.column_stack([np.ones(N), x1, x2, x3])

    generating = X if spec.misspec != Misspecification.DROP_X3_BOTH else X[:, :3]
    m = generating @ np.asarray(beta[: generating.shape[1]])
    centered = m - m.mean()
    var_m = float(centered @ centered / N)
    if var_m <= 0.0:
        raise NumericalError("linear mean is constant over the population")
    sigma2 = var_m * (1.0 - spec.rho ** 2) / spec.rho ** 2

    e = rng.standard_normal(N)
    e = e - e.mean()
    e = e - (e @ centered) / (centered @ centered) * centered
    e_var = float(e @ e / N)
    e = e * math.sqrt(sigma2 / e_var) if sigma2 > 0.0 else np.zeros(N)
    y = m + e

    correlation = float(np.corrcoef(m, y)[0, 1]) if sigma2 > 0.0 else 1.0
    if abs(correlation - spec.rho) > CORRELATION_TOL:
        raise NumericalError(f"realized correlation {correlation:.4f} misses rho={spec.rho}")

    theta0 = calibrate_theta0(X, spec.n1, spec.participation_coef)
    pi1 = expit(theta0 + X[:, 1:] @ np.asarray(spec.participation_coef))
    theta1 = calibrate_theta1(X, spec.size_ratio, spec.size_coef)
    z = theta1 + X[:, 1:] @ np.asarray(spec.size_coef)
    pi2 = spec.n2 * z / math.fsum(z)
    if np.any(pi2 >= 1.0):
        raise NumericalError("ps inclusion probabilities reach 1; lower n2 or the size ratio")

    true_mean = math.fsum(y) / N
    logger.info(
        f"모집단 생성: N={N}, rho={spec.rho}, sigma2={sigma2:.4g}, "
        f"theta0={theta0:.6f}, theta1={theta1:.4f}, T={true_mean:.6g}"
    )
    return FinitePopulation(
        X=X,
        y=y,
        true_mean=true_mean,
        pi1=pi1,
        pi2=pi2,
        theta0=theta0,
        theta1=theta1,
        sigma2=sigma2,
        correlation=correlation,
        spec=spec,
    )


def poisson_sample(pi1: np.ndarray, source: RandomSource) -> np.ndarray:
    """Independent Bernoulli(pi1) inclusion; returns sorted unit indices."""
    pi1 = np.asarray(pi1, dtype=float)
    rng = as_generator(source)
    return np.flatnonzero(rng.random(pi1.shape[0]) < pi1)


def systematic_pps(pi2: np.ndarray, n2: int, source: RandomSource, randomize: bool = True) -> np.ndarray:
    """
    Randomized systematic PPS: shuffle units, then take n2 equally spaced
    points with one uniform start on the cumulated probabilities.
    """
    pi2 = np.asarray(pi2, dtype=float)
    if np.any(pi2 >= 1.0) or np.any(pi2 <= 0.0):
        raise NumericalError("systematic PPS needs 0 < pi < 1; cap large units first")
    rng = as_generator(source)
    order = rng.permutation(pi2.shape[0]) if randomize else np.arange(pi2.shape[0])
    cumulative = np.cumsum(pi2[order])
    cumulative *= n2 / cumulative[-1]
    points = rng.random() + np.arange(n2)
    positions = np.searchsorted(cumulative, points, side="right")
    return np.sort(order[positions])


def draw_samples(population: FinitePopulation, source: RandomSource) -> Tuple[SurveySample, SurveySample]:
    """One (nps, ps) pair: Poisson nps without weights, PPS ps with W = 1/pi2."""
    rng = as_generator(source)
    nps_rows = poisson_sample(population.pi1, rng)
    ps_rows = systematic_pps(population.pi2, population.spec.n2, rng)
    if nps_rows.shape[0] <= len(COLUMNS):
        raise InsufficientRowsError(f"Poisson sample has only {nps_rows.shape[0]} units")
    study = population.study_columns
    nps = SurveySample(
        role=SampleRole.NPS,
        X=population.X[nps_rows],
        y=population.y[nps_rows],
        columns=COLUMNS,
        study_columns=study,
    )
    ps = SurveySample(
        role=SampleRole.PS,
        X=population.X[ps_rows],
        y=population.y[ps_rows],
        columns=COLUMNS,
        study_columns=study,
        W=1.0 / population.pi2[ps_rows],
        weight_name="weight",
    )
    return nps, ps
