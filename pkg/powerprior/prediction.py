"""
Finite population mean: surrogate sampling, the t pivot and draw summaries.
"""

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from powerprior.errors import InsufficientRowsError, NumericalError
from powerprior.posterior import IntegratedSufficients, PosteriorDraws
from powerprior.rngstat import RngStream, blockwise
from data.survey_store import PopulationFacts

logger = logging.getLogger(__name__)

MIN_DRAWS = 100


class PivotScale(str, Enum):
    """Scale form of the t pivot for the population mean."""

    LITERAL = "literal"
    CONSISTENT = "consistent"


@dataclass(frozen=True)
class PosteriorSummary:
    PM: float
    PSD: float
    PCV: float
    NSE: float
    hpd_low: float
    hpd_high: float
    M: int

    @property
    def width(self) -> float:
        return self.hpd_high - self.hpd_low

    def covers(self, value: float) -> bool:
        return self.hpd_low <= value <= self.hpd_high

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class MeanPosterior:
    draws: np.ndarray
    summary: PosteriorSummary


@dataclass(frozen=True)
class TPivot:
    center: float
    scale: float
    dof: float

    def standardize(self, draws: np.ndarray) -> np.ndarray:
        return (np.asarray(draws, dtype=float) - self.center) / self.scale


def hpd_interval(draws: np.ndarray, level: float = 0.95) -> Tuple[float, float]:
    """Shortest window holding ceil(level * M) sorted draws (lowest start on ties)."""
    ordered = np.sort(np.asarray(draws, dtype=float))
    M = ordered.shape[0]
    m = min(M, int(math.ceil(level * M - 1e-9)))
    widths = ordered[m - 1:] - ordered[: M - m + 1]
    start = int(np.argmin(widths))
    return float(ordered[start]), float(ordered[start + m - 1])


def equal_tailed_interval(draws: np.ndarray, level: float = 0.95) -> Tuple[float, float]:
    tail = 0.5 * (1.0 - level)
    low, high = np.quantile(np.asarray(draws, dtype=float), [tail, 1.0 - tail])
    return float(low), float(high)


def batch_means_nse(draws: np.ndarray, batches: int = 50) -> float:
    """Numerical standard error for correlated draws via non-overlapping batch means."""
    draws = np.asarray(draws, dtype=float)
    size = draws.shape[0] // batches
    if size < 2:
        raise InsufficientRowsError(f"{draws.shape[0]} draws are too few for {batches} batches")
    means = draws[: size * batches].reshape(batches, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(batches))


def summarize(draws: np.ndarray, hpd_level: float = 0.95, nse: Optional[float] = None) -> PosteriorSummary:
    """
    사후 표본 요약 (PM, PSD, PCV, NSE, HPD).

    Args:
        draws: independent posterior draws (at least 100)
        hpd_level: coverage of the HPD interval
        nse: override for the numerical standard error (e.g. batch means)

    Returns:
        PosteriorSummary
    """
    draws = np.asarray(draws, dtype=float).ravel()
    M = draws.shape[0]
    if M < MIN_DRAWS:
        raise InsufficientRowsError(f"summaries need at least {MIN_DRAWS} draws, got {M}")
    PM = math.fsum(draws) / M
    PSD = float(np.sqrt(math.fsum((draws - PM) ** 2) / (M - 1)))
    PCV = PSD / abs(PM) if PM != 0.0 else math.inf
    low, high = hpd_interval(draws, hpd_level)
    return PosteriorSummary(
        PM=PM,
        PSD=PSD,
        PCV=PCV,
        NSE=PSD / math.sqrt(M) if nse is None else nse,
        hpd_low=low,
        hpd_high=high,
        M=M,
    )


def draw_population_means(
    post: PosteriorDraws,
    facts: PopulationFacts,
    stream: Optional[RngStream] = None,
    threads: int = 1,
    columns: Optional[Sequence[str]] = None,
) -> np.ndarray:
    columns = columns or post.columns or facts.columns
    xbar = facts.xbar_for(columns)
    if xbar.shape[0] != post.p:
        raise NumericalError(f"population facts have {xbar.shape[0]} covariates, draws have {post.p}")
    stream = stream or RngStream.named(post.scenario.seed, "prediction")
    location = post.beta @ xbar
    sd = np.sqrt(post.sigma2 / facts.N_hat)

    def block(gen: np.random.Generator, start: int, stop: int) -> np.ndarray:
        return location[start:stop] + sd[start:stop] * gen.standard_normal(stop - start)

    return blockwise(stream, post.M, block, threads)


def surrogate_mean_draws(
    post: PosteriorDraws,
    facts: PopulationFacts,
    stream: Optional[RngStream] = None,
    threads: int = 1,
    columns: Optional[Sequence[str]] = None,
) -> MeanPosterior:
    """
    각 (beta, sigma2) 에 대해 Ybar ~ Normal(xbar'beta, sigma2/N_hat).

    Args:
        post: posterior draws of the population model
        facts: N_hat and covariate means of the population
        stream: random stream, defaults to one derived from the scenario seed
        threads: worker cap (results do not depend on it)
        columns: covariate names of ``post.beta``

    Returns:
        MeanPosterior over the same draw index as ``post``
    """
    draws = draw_population_means(post, facts, stream, threads, columns)
    summary = summarize(draws)
    logger.info(f"Ybar 예측 ({post.scenario.kind.value}): PM={summary.PM:.6g} PSD={summary.PSD:.4g}")
    return MeanPosterior(draws=draws, summary=summary)


def t_pivot_params(
    a: float,
    sufficients: IntegratedSufficients,
    facts: PopulationFacts,
    N_hat: Optional[float] = None,
    columns: Optional[Sequence[str]] = None,
    scale_form: PivotScale = PivotScale.CONSISTENT,
) -> TPivot:
    """Center, scale and degrees of freedom of the population-mean t pivot at fixed a.

    ``LITERAL`` keeps sqrt((1/N + d x'A^-1 x)/dof); ``CONSISTENT`` uses
    sqrt(d (1/N + x'A^-1 x)/dof), the scale the sampler satisfies.
    """
    N = facts.N_hat if N_hat is None else N_hat
    xbar = facts.xbar_for(columns or facts.columns)
    k = sufficients.index_of(a)
    d = float(sufficients.d[k])
    if not d > 0:
        raise NumericalError("t pivot needs a positive residual sum of squares")
    u = sufficients.inv_factor[k].T @ xbar
    quad = float(u @ u)
    dof = sufficients.dof
    if scale_form == PivotScale.LITERAL:
        scale = math.sqrt((1.0 / N + d * quad) / dof)
    else:
        scale = math.sqrt(d * (1.0 / N + quad) / dof)
    if not scale > 0:
        raise NumericalError(f"nonpositive t pivot scale {scale}")
    return TPivot(center=float(xbar @ sufficients.beta_hat[k]), scale=scale, dof=dof)


def summary_row(model: str, summary: PosteriorSummary) -> Dict[str, object]:
    """One comparison-table row (Model, PM, PSD, PCV, 95% interval)."""
    return {
        "Model": model,
        "PM": summary.PM,
        "PSD": summary.PSD,
        "PCV": summary.PCV,
        "CI_low": summary.hpd_low,
        "CI_high": summary.hpd_high,
    }
