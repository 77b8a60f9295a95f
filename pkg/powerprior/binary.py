"""
Binary study variable: weighted logistic sample model with a power prior,
griddy Gibbs sampling of (a, beta), constrained resampling of population
covariates and surrogate draws of the finite population proportion.

With weight placement ``linear_predictor`` each unit contributes
c*eta*y - log(1 + exp(c*eta)) where c = a_s * w and eta = x'beta; with
``likelihood`` it contributes c * (eta*y - log(1 + exp(eta))).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from powerprior.config import BinarySpec, WeightPlacement
from powerprior.errors import (
    ConvergenceError,
    RankDeficiencyError,
    ResamplingError,
    SchemaError,
    SeparationError,
)
from powerprior.posterior import WeightedBlock
from powerprior.prediction import MeanPosterior, batch_means_nse, summarize
from powerprior.rngstat import RandomSource, RngStream, as_generator, draw_from_grid, parallel_map
from data.survey_store import INTERCEPT, PopulationFacts, SurveySample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BinaryPosteriorDraws:
    beta: np.ndarray
    a: np.ndarray
    columns: tuple = ()
    edge_hits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    non_unimodal: int = 0
    sweeps: int = 0

    @property
    def M(self) -> int:
        return self.a.shape[0]

    @property
    def diagnostics(self) -> Dict[str, object]:
        return {
            "sweeps": self.sweeps,
            "edge_hits": [int(v) for v in self.edge_hits],
            "non_unimodal": int(self.non_unimodal),
        }


@dataclass(frozen=True)
class SurrogatePopulation:
    X_pop: np.ndarray
    residual: np.ndarray
    target: np.ndarray
    tries: int = 1

    @property
    def N(self) -> int:
        return self.X_pop.shape[0]


def _check_binary(blocks: Sequence[WeightedBlock]) -> int:
    p = blocks[0].X.shape[1]
    for block in blocks:
        if block.X.shape[1] != p:
            raise SchemaError("binary samples have different numbers of covariates")
        if not np.all((block.y == 0.0) | (block.y == 1.0)):
            raise SchemaError("binary response must be coded 0/1")
    return p


def _coef(block: WeightedBlock, a: float) -> np.ndarray:
    return (a if block.discounted else 1.0) * block.w


def binary_log_posterior(
    a: float,
    beta: np.ndarray,
    blocks: Sequence[WeightedBlock],
    placement: WeightPlacement = WeightPlacement.LINEAR_PREDICTOR,
) -> float:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (blocks[0].X.shape[1],):
        raise SchemaError(f"beta has shape {beta.shape}, expected ({blocks[0].X.shape[1]},)")
    total = 0.0
    for block in blocks:
        c = _coef(block, a)
        eta = block.X @ beta
        if placement == WeightPlacement.LINEAR_PREDICTOR:
            total += float(np.sum(c * eta * block.y - np.logaddexp(0.0, c * eta)))
        else:
            total += float(np.sum(c * (eta * block.y - np.logaddexp(0.0, eta))))
    return total


def binary_log_posterior_gradient(
    a: float,
    beta: np.ndarray,
    blocks: Sequence[WeightedBlock],
    placement: WeightPlacement = WeightPlacement.LINEAR_PREDICTOR,
) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    grad = np.zeros_like(beta)
    for block in blocks:
        c = _coef(block, a)
        eta = block.X @ beta
        if placement == WeightPlacement.LINEAR_PREDICTOR:
            grad += block.X.T @ (c * (block.y - expit(c * eta)))
        else:
            grad += block.X.T @ (c * (block.y - expit(eta)))
    return grad


def _hessian(a, beta, blocks, placement) -> np.ndarray:
    p = beta.shape[0]
    H = np.zeros((p, p))
    for block in blocks:
        c = _coef(block, a)
        eta = block.X @ beta
        if placement == WeightPlacement.LINEAR_PREDICTOR:
            mu = expit(c * eta)
            curv = c * c * mu * (1.0 - mu)
        else:
            mu = expit(eta)
            curv = c * mu * (1.0 - mu)
        H -= (block.X.T * curv) @ block.X
    return H


def binary_mode(
    blocks: Sequence[WeightedBlock],
    a: float = 1.0,
    placement: WeightPlacement = WeightPlacement.LINEAR_PREDICTOR,
    max_iter: int = 100,
    tol: float = 1e-8,
):
    """
    Newton 파일럿 적합: 사후 최빈값과 좌표별 곡률 SD.

    Returns:
        (mode, pilot_sd) with pilot_sd_j = 1/sqrt(-H_jj) at the mode
    """
    p = _check_binary(blocks)
    beta = np.zeros(p)
    value = binary_log_posterior(a, beta, blocks, placement)
    for iteration in range(max_iter):
        grad = binary_log_posterior_gradient(a, beta, blocks, placement)
        if np.max(np.abs(grad)) <= tol * max(1.0, abs(value)):
            break
        H = _hessian(a, beta, blocks, placement)
        try:
            step = np.linalg.solve(-H, grad)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(f"binary information matrix is singular: {exc}") from exc
        scale = 1.0
        while scale > 1e-10:
            candidate = beta + scale * step
            new_value = binary_log_posterior(a, candidate, blocks, placement)
            if new_value >= value - 1e-12 * (1.0 + abs(value)):
                break
            scale *= 0.5
        beta, value = candidate, new_value
        if np.max(np.abs(beta)) > 1e3:
            raise SeparationError("logistic coefficients diverge: the samples are separated")
    else:
        if value > -1e-6:
            # 로그우도 상한 0 에 접근: 완전 분리
            raise SeparationError("logistic likelihood approaches its supremum: the samples are separated")
        raise ConvergenceError(f"binary pilot fit did not converge in {max_iter} iterations")
    curvature = -np.diag(_hessian(a, beta, blocks, placement))
    if np.any(curvature <= 0):
        raise RankDeficiencyError("binary pilot curvature is not positive")
    logger.debug(f"파일럿 적합: {iteration} iterations, mode={beta}")
    return beta, 1.0 / np.sqrt(curvature)


def _unimodal(log_density: np.ndarray) -> bool:
    diffs = np.diff(log_density)
    tol = 1e-9 * (1.0 + np.max(np.abs(log_density)))
    signs = np.sign(np.where(np.abs(diffs) <= tol, 0.0, diffs))
    signs = signs[signs != 0]
    return int(np.sum(signs[1:] > signs[:-1])) == 0


def griddy_gibbs_binary(
    blocks: Sequence[WeightedBlock],
    spec: Optional[BinarySpec] = None,
    stream: Optional[RngStream] = None,
    columns: Sequence[str] = (),
) -> BinaryPosteriorDraws:
    """
    Griddy Gibbs 표본추출 (beta_1, ..., beta_p, a 순환 갱신).

    Each beta_j is drawn from its conditional on a grid centered at the
    current value spanning +-grid_width_sd pilot SDs, with a uniform jitter
    inside the chosen cell; a is drawn on a fixed grid over [a_min, a_max].

    Raises:
        RankDeficiencyError: the undiscounted design is rank deficient
        SeparationError: the conditional peak sat on a grid edge for
            ``separation_sweeps`` consecutive sweeps
    """
    spec = spec or BinarySpec()
    stream = stream or RngStream.named(spec.seed, "binary")
    p = _check_binary(blocks)
    for block in blocks:
        if not block.discounted and np.linalg.matrix_rank(block.X) < p:
            raise RankDeficiencyError("undiscounted binary design is rank deficient")
    placement = spec.weight_placement
    has_discount = any(block.discounted for block in blocks)

    beta, pilot_sd = binary_mode(blocks, 1.0, placement)
    a = 1.0
    a_values = np.linspace(spec.a_min, spec.a_max, spec.a_grid_points) if has_discount else None
    offsets = np.linspace(-spec.grid_width_sd, spec.grid_width_sd, spec.grid_points)
    half_cell = 0.5 * (offsets[1] - offsets[0])

    etas = [block.X @ beta for block in blocks]
    edge_run = np.zeros(p, dtype=int)
    edge_hits = np.zeros(p, dtype=int)
    non_unimodal = 0
    total_sweeps = spec.burnin + spec.draws * spec.thin
    kept_beta = np.empty((spec.draws, p))
    kept_a = np.empty(spec.draws)
    kept = 0

    for sweep in range(total_sweeps):
        rng = stream.at(sweep).generator()
        for j in range(p):
            grid = beta[j] + pilot_sd[j] * offsets
            log_density = np.zeros(grid.shape[0])
            for b_idx, block in enumerate(blocks):
                c = _coef(block, a)
                eta = etas[b_idx][:, None] + np.outer(block.X[:, j], grid - beta[j])
                if placement == WeightPlacement.LINEAR_PREDICTOR:
                    ce = c[:, None] * eta
                    log_density += (ce * block.y[:, None] - np.logaddexp(0.0, ce)).sum(axis=0)
                else:
                    log_density += (
                        c[:, None] * (eta * block.y[:, None] - np.logaddexp(0.0, eta))
                    ).sum(axis=0)
            if not _unimodal(log_density):
                non_unimodal += 1
            # 평탄한 꼭대기가 격자 끝에 닿아도 끝점 봉우리로 셈
            top = float(np.max(log_density))
            tol = 1e-9 * (1.0 + abs(top))
            if max(log_density[0], log_density[-1]) >= top - tol:
                edge_run[j] += 1
                edge_hits[j] += 1
                if edge_run[j] >= spec.separation_sweeps:
                    raise SeparationError(
                        f"conditional of beta_{j + 1} peaked at the grid edge for "
                        f"{edge_run[j]} consecutive sweeps"
                    )
            else:
                edge_run[j] = 0
            k = int(draw_from_grid(log_density, rng))
            new_value = grid[k] + pilot_sd[j] * rng.uniform(-half_cell, half_cell)
            for b_idx, block in enumerate(blocks):
                etas[b_idx] = etas[b_idx] + block.X[:, j] * (new_value - beta[j])
            beta[j] = new_value

        if has_discount:
            log_density = np.zeros(a_values.shape[0])
            for b_idx, block in enumerate(blocks):
                if not block.discounted:
                    continue
                c = np.outer(a_values, block.w)
                eta = etas[b_idx][None, :]
                if placement == WeightPlacement.LINEAR_PREDICTOR:
                    log_density += (c * eta * block.y - np.logaddexp(0.0, c * eta)).sum(axis=1)
                else:
                    log_density += (c * (eta * block.y - np.logaddexp(0.0, eta))).sum(axis=1)
            a = float(a_values[int(draw_from_grid(log_density, rng))])

        if sweep >= spec.burnin and (sweep - spec.burnin) % spec.thin == spec.thin - 1:
            kept_beta[kept] = beta
            kept_a[kept] = a
            kept += 1
        if (sweep + 1) % 5000 == 0:
            logger.info(f"griddy Gibbs: {sweep + 1}/{total_sweeps} sweeps")

    if non_unimodal:
        logger.warning(f"비단봉 조건부 밀도 {non_unimodal}회")
    return BinaryPosteriorDraws(
        beta=kept_beta,
        a=kept_a,
        columns=tuple(columns),
        edge_hits=edge_hits,
        non_unimodal=non_unimodal,
        sweeps=total_sweeps,
    )


def discretize_columns(
    X: np.ndarray, columns: Sequence[str], widths: Optional[Mapping[str, float]] = None
) -> np.ndarray:
    """Replace each binned column by its class midpoint (e.g. 5-year age classes)."""
    X = np.array(X, dtype=float, copy=True)
    for name, width in (widths or {}).items():
        if name in columns:
            j = list(columns).index(name)
            X[:, j] = (np.floor(X[:, j] / width) + 0.5) * width
    return X


def resample_population_covariates(
    nps: SurveySample,
    ps: SurveySample,
    facts: PopulationFacts,
    tolerance: float = 0.01,
    max_tries: int = 1000,
    source: Optional[RandomSource] = None,
    pool_weights: Optional[np.ndarray] = None,
    bin_widths: Optional[Mapping[str, float]] = None,
) -> SurrogatePopulation:
    """
    모집단 공변량 재표본추출: sum x = N xbar_W2 (상대오차 tolerance 이내).

    N = round(N_hat) rows are drawn with replacement from the pooled
    samples, with probability proportional to ``pool_weights`` (uniform
    when omitted). The targets are the ps-weighted means times that
    integer N, so the intercept total is exactly N even when N_hat is
    not an integer. Binned columns are compared at class resolution.

    Raises:
        ResamplingError: no draw met the constraint in ``max_tries``
    """
    rng = as_generator(source if source is not None else RngStream.named(0, "population"))
    columns = list(ps.study_columns)
    pool = np.vstack([nps.study_matrix, ps.study_matrix])
    binned_pool = discretize_columns(pool, columns, bin_widths)
    N = max(int(round(facts.N_hat)), 1)
    # 목표 합계 = N x (ps 가중 평균)
    target = N * ((ps.W / math.fsum(ps.W)) @ discretize_columns(ps.study_matrix, columns, bin_widths))
    if INTERCEPT in columns:
        target[columns.index(INTERCEPT)] = float(N)
    if pool_weights is None:
        probs = None
    else:
        probs = np.asarray(pool_weights, dtype=float)
        probs = probs / probs.sum()

    best = None
    limit = tolerance * np.abs(target)
    for attempt in range(1, max_tries + 1):
        rows = rng.choice(pool.shape[0], size=N, replace=True, p=probs)
        residual = binned_pool[rows].sum(axis=0) - target
        if best is None or np.max(np.abs(residual) / np.maximum(np.abs(target), 1e-300)) < best:
            best = float(np.max(np.abs(residual) / np.maximum(np.abs(target), 1e-300)))
        if np.all(np.abs(residual) <= limit):
            logger.debug(f"모집단 재표본 수락: {attempt}회 시도")
            return SurrogatePopulation(X_pop=pool[rows], residual=residual, target=target, tries=attempt)
    raise ResamplingError(
        f"population constraint not met in {max_tries} tries (best relative residual {best:.4g})"
    )


PopulationFactory = Callable[[int], SurrogatePopulation]


def _score(draws: BinaryPosteriorDraws, pop: SurrogatePopulation, stream: RngStream, h: int) -> float:
    prob = expit(pop.X_pop @ draws.beta[h])
    u = stream.at(h).generator().random(pop.N)
    return float(np.mean(u <= prob))


def surrogate_proportion(
    draws: BinaryPosteriorDraws,
    populations: Union[SurrogatePopulation, Sequence[SurrogatePopulation], PopulationFactory],
    stream: Optional[RngStream] = None,
    refresh_every: int = 10,
    threads: int = 1,
) -> MeanPosterior:
    """
    각 사후 표본마다 y_i ~ Bernoulli(logistic(x_i'beta)) 를 생성해 비율을 계산합니다.

    Draw h scores population ``h // refresh_every``; a single population
    is reused for every draw. Given a factory, population r is built when
    its block of draws is scored and dropped afterwards, so at most one
    population per worker is held in memory.
    """
    if isinstance(populations, SurrogatePopulation):
        populations = [populations]
    stream = stream or RngStream.named(0, "surrogate")

    if callable(populations):
        factory = populations

        def block(r: int) -> List[float]:
            pop = factory(r)
            stop = min(draws.M, (r + 1) * refresh_every)
            return [_score(draws, pop, stream, h) for h in range(r * refresh_every, stop)]

        parts = parallel_map(block, list(range(populations_needed(draws.M, refresh_every))), threads)
        values = np.array([value for part in parts for value in part])
    else:

        def one(h: int) -> float:
            pop = populations[min(h // refresh_every, len(populations) - 1)]
            return _score(draws, pop, stream, h)

        values = np.array(parallel_map(one, list(range(draws.M)), threads))
    summary = summarize(values, nse=batch_means_nse(values))
    return MeanPosterior(draws=values, summary=summary)


def population_factory(
    nps: SurveySample,
    ps: SurveySample,
    facts: PopulationFacts,
    spec: BinarySpec,
    stream: RngStream,
    pool_weights: Optional[np.ndarray] = None,
) -> PopulationFactory:
    """Population r on demand, each from its own child stream."""

    def build(r: int) -> SurrogatePopulation:
        return resample_population_covariates(
            nps,
            ps,
            facts,
            spec.constraint_tol,
            spec.max_tries,
            stream.child("population", r).generator(),
            pool_weights,
            spec.bin_widths,
        )

    return build


def build_populations(
    nps: SurveySample,
    ps: SurveySample,
    facts: PopulationFacts,
    count: int,
    spec: BinarySpec,
    stream: RngStream,
    pool_weights: Optional[np.ndarray] = None,
    threads: int = 1,
) -> List[SurrogatePopulation]:
    """``count`` independent constrained populations, built eagerly."""
    build = population_factory(nps, ps, facts, spec, stream, pool_weights)
    return parallel_map(build, list(range(count)), threads)


def binary_blocks(nps: SurveySample, ps: SurveySample, w1: np.ndarray, w2: np.ndarray) -> List[WeightedBlock]:
    """nps discounted by a, ps at full weight."""
    return [
        WeightedBlock(nps.study_matrix, nps.y, np.asarray(w1, dtype=float), discounted=True),
        WeightedBlock(ps.study_matrix, ps.y, np.asarray(w2, dtype=float), discounted=False),
    ]


def populations_needed(M: int, refresh_every: int) -> int:
    return int(math.ceil(M / refresh_every))
