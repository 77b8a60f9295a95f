"""
Two-stage bootstrap that carries the uncertainty of the estimated nps
weights, N_hat and the population covariate means into the posterior of
the population mean, plus the preliminary ps-only Bayesian bootstrap.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from powerprior.config import BootstrapSpec, ResampleMode, ScenarioSpec, WeightOptions
from powerprior.errors import NumericalError, StudyAbortedError
from powerprior.posterior import fit_scenario
from powerprior.prediction import PosteriorSummary, draw_population_means, summarize
from powerprior.rngstat import RngStream, parallel_map
from powerprior.weights import adjust_weights, estimate_nps_weights
from data.survey_store import SurveySample, population_facts_from_ps

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BootstrapPosterior:
    draws: np.ndarray
    summary: PosteriorSummary
    replicates: pd.DataFrame
    dropped: int = 0
    baseline: Optional[PosteriorSummary] = None

    def comparison(self) -> pd.DataFrame:
        """Summary with and without the bootstrap, side by side."""
        rows = [{"method": "bootstrap", **self.summary.to_dict()}]
        if self.baseline is not None:
            rows.insert(0, {"method": "plain", **self.baseline.to_dict()})
        return pd.DataFrame(rows)


@dataclass(frozen=True)
class PsBootstrapResult:
    N: np.ndarray
    xbar: np.ndarray
    ybar: np.ndarray
    columns: Tuple[str, ...]
    intervals: Dict[str, Dict[str, float]] = field(default_factory=dict)


def canonical_order(sample: SurveySample) -> np.ndarray:
    """Row order that depends only on row contents (weights, covariates, response)."""
    keys = [sample.y] + [sample.X[:, j] for j in range(sample.p)]
    if sample.W is not None:
        keys.append(sample.W)
    # np.lexsort: 마지막 키가 1차 정렬 기준
    return np.lexsort(keys[::-1])


def resample_rows(
    n: int, mode: ResampleMode, rng: np.random.Generator
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    One bootstrap replicate of a sample with n rows.

    Returns:
        (row indices, frequency multipliers). ``with_replacement`` draws n
        indices and no multipliers; ``dirichlet_weights`` keeps every row
        once and returns n * Dirichlet(1, ..., 1) multipliers
    """
    if mode == ResampleMode.DIRICHLET:
        return np.arange(n), rng.dirichlet(np.ones(n)) * n
    return rng.integers(0, n, size=n), None


def replicate_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _one_replicate(
    b: int,
    nps: SurveySample,
    ps: SurveySample,
    scenario: ScenarioSpec,
    spec: BootstrapSpec,
    options: WeightOptions,
    calibrate: bool,
) -> Optional[Tuple[np.ndarray, Dict[str, float]]]:
    stream = RngStream.named(spec.seed, "bootstrap").at(b)
    rng = stream.generator()
    nps_rows, nps_freq = resample_rows(nps.n, spec.mode, rng)
    ps_rows, ps_freq = resample_rows(ps.n, spec.mode, rng)
    nps_b = nps.take(nps_rows)
    ps_b = ps.take(ps_rows)
    if ps_freq is not None:
        ps_b = ps_b.with_weights(ps_b.W * ps_freq)
    try:
        # nps 가중치는 복제마다 다시 추정, ps 설계가중치는 고정 (Dirichlet 배수만 곱함)
        _, trail, facts = estimate_nps_weights(nps_b, ps_b, options, calibrate, frequency=nps_freq)
        w1 = adjust_weights(trail.final).w
        w2 = adjust_weights(ps_b.W).w
        inner = scenario.copy(update={"draws": spec.inner_draws, "seed": replicate_seed(spec.seed, b)})
        post = fit_scenario(inner, nps_b, ps_b, w1, w2)
        draws = draw_population_means(post, facts, stream.child("prediction"))
    except NumericalError as exc:
        logger.warning(f"bootstrap 복제 {b} 제외: {exc.code} {exc}")
        return None
    record = {
        "replicate": b,
        "N_hat": facts.N_hat,
        "PM": float(np.mean(draws)),
        "PSD": float(np.std(draws, ddof=1)) if draws.shape[0] > 1 else 0.0,
        "a_mean": float(np.mean(post.a)),
    }
    return draws, record


def bootstrap_pipeline(
    nps: SurveySample,
    ps: SurveySample,
    scenario: ScenarioSpec,
    spec: Optional[BootstrapSpec] = None,
    options: Optional[WeightOptions] = None,
    calibrate: bool = False,
    threads: int = 1,
    baseline: Optional[PosteriorSummary] = None,
) -> BootstrapPosterior:
    """
    복제마다 nps/ps 행을 독립 재표본추출하고, CLW 가중치를 다시 추정해
    시나리오를 적합한 뒤 Ybar 표본을 모읍니다.

    Args:
        nps, ps: input samples (put in canonical row order first)
        scenario: scenario to fit in every replicate
        spec: replicate count, resampling mode, inner draws, seed
        options: nps weight settings
        calibrate: calibrate nps weights in every replicate
        threads: worker cap; results do not depend on it
        baseline: summary without the bootstrap, kept for comparison

    Raises:
        StudyAbortedError: more than ``max_drop_fraction`` replicates failed
    """
    spec = spec or BootstrapSpec()
    options = options or WeightOptions()
    nps = nps.take(canonical_order(nps))
    ps = ps.take(canonical_order(ps))
    logger.info(f"bootstrap 시작: B={spec.replicates}, mode={spec.mode.value}, scenario={scenario.kind.value}")

    results = parallel_map(
        lambda b: _one_replicate(b, nps, ps, scenario, spec, options, calibrate),
        list(range(spec.replicates)),
        threads,
    )
    kept = [r for r in results if r is not None]
    dropped = len(results) - len(kept)
    if dropped > spec.max_drop_fraction * spec.replicates:
        raise StudyAbortedError(
            f"{dropped} of {spec.replicates} bootstrap replicates failed "
            f"(limit {spec.max_drop_fraction:.0%})"
        )
    if not kept:
        raise StudyAbortedError("every bootstrap replicate failed")
    pooled = np.concatenate([draws for draws, _ in kept])
    summary = summarize(pooled)
    logger.info(f"bootstrap 완료: PM={summary.PM:.6g} PSD={summary.PSD:.4g}, dropped={dropped}")
    return BootstrapPosterior(
        draws=pooled,
        summary=summary,
        replicates=pd.DataFrame([record for _, record in kept]),
        dropped=dropped,
        baseline=baseline,
    )


def _order_statistic_interval(values: np.ndarray, level: float = 0.95) -> Tuple[float, float]:
    ordered = np.sort(values)
    B = ordered.shape[0]
    low = max(int(math.ceil(0.5 * (1.0 - level) * B - 1e-9)), 1)
    high = max(int(math.ceil((1.0 - 0.5 * (1.0 - level)) * B - 1e-9)), 1)
    return float(ordered[low - 1]), float(ordered[high - 1])


def preliminary_ps_bootstrap(ps: SurveySample, B: int = 10000, seed: int = 0) -> PsBootstrapResult:
    """
    ps 만으로 (N_hat, xbar_hat, IPW ybar) 의 Bayesian bootstrap 분포.

    Each replicate scales the design weights by n times a Dirichlet(1, ..., 1)
    vector; intervals are the order statistics T(.025B) and T(.975B).
    """
    facts = population_facts_from_ps(ps)
    rng = RngStream.named(seed, "ps_bootstrap").generator()
    rows = ps.take(canonical_order(ps))
    G = rng.dirichlet(np.ones(rows.n), size=B) * rows.n
    Wb = G * rows.W[None, :]
    N = Wb.sum(axis=1)
    xbar = (Wb @ rows.study_matrix) / N[:, None]
    ybar = (Wb @ rows.y) / N

    intervals: Dict[str, Dict[str, float]] = {}

    def record(name: str, values: np.ndarray) -> None:
        low, high = _order_statistic_interval(values)
        intervals[name] = {
            "PM": float(values.mean()),
            "PSD": float(values.std(ddof=1)) if values.shape[0] > 1 else 0.0,
            "low": low,
            "high": high,
        }

    record("N_hat", N)
    for j, column in enumerate(facts.columns):
        record(f"xbar_{column}", xbar[:, j])
    record("ybar", ybar)
    logger.info(f"ps bootstrap: B={B}, ybar PM={intervals['ybar']['PM']:.6g}")
    return PsBootstrapResult(
        N=N, xbar=xbar, ybar=ybar, columns=tuple(facts.columns), intervals=intervals
    )
