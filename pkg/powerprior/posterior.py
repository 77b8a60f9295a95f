"""
Exact (non-Markov) posterior samplers for the Gaussian scenarios.

Scenarios C and D use a power prior on one sample with discount a drawn
by the grid method: a from its discrete marginal, then sigma^2 | a from
an inverse gamma, then beta | sigma^2, a from a normal. Scenarios B, E
and G are the same sampler with a single sample and a fixed at 1.

The sample sizes in the a^(n_disc/2) factor and in the sigma^2 shape are
the adjusted-weight sums by default. The weighted residual sum d(a)
grows like n_o * sigma^2, so raw row counts would put the marginal of a
on a different scale from d(a) whenever the weights are unequal.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from powerprior.config import SampleCount, ScenarioKind, ScenarioSpec
from powerprior.errors import (
    InsufficientRowsError,
    RankDeficiencyError,
    SaturatedModelError,
    SchemaError,
)
from powerprior.rngstat import (
    RandomSource,
    RngStream,
    as_generator,
    blockwise,
    draw_from_grid,
    draw_inverse_gamma,
    grid_probabilities,
)
from data.survey_store import SurveySample

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-12
SATURATION_TOL = 1e-20


@dataclass(frozen=True)
class WeightedBlock:
    """One sample's regression data with adjusted weights."""

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    discounted: bool = False

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def count(self, basis: SampleCount) -> float:
        if basis == SampleCount.ROWS:
            return float(self.n)
        return math.fsum(self.w)


@dataclass(frozen=True)
class IntegratedSufficients:
    """Per-grid-point quantities, computed once and reused for every draw."""

    grid: np.ndarray
    A: np.ndarray
    chol: np.ndarray
    inv_factor: np.ndarray
    logdet: np.ndarray
    b: np.ndarray
    beta_hat: np.ndarray
    d: np.ndarray
    log_density: np.ndarray
    n_total: float
    n_disc: float
    p: int
    counts: SampleCount = SampleCount.EFFECTIVE

    @property
    def dof(self) -> float:
        return self.n_total - self.p

    @property
    def probabilities(self) -> np.ndarray:
        return grid_probabilities(self.log_density)

    def A_inverse(self, k: int) -> np.ndarray:
        return self.inv_factor[k] @ self.inv_factor[k].T

    def index_of(self, a: float) -> int:
        return int(np.argmin(np.abs(self.grid - a)))


@dataclass(frozen=True)
class PosteriorDraws:
    beta: np.ndarray
    sigma2: np.ndarray
    a: np.ndarray
    scenario: ScenarioSpec
    columns: Tuple[str, ...] = ()
    sufficients: Optional[IntegratedSufficients] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if np.any(~(self.sigma2 > 0)):
            raise SaturatedModelError("posterior sigma2 draws must be positive")
        if not (np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.a))):
            raise SchemaError("posterior draws contain non-finite values")

    @property
    def M(self) -> int:
        return self.sigma2.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"a": self.a, "sigma2": self.sigma2})
        for j in range(self.p):
            frame[f"beta_{j + 1}"] = self.beta[:, j]
        return frame

    @classmethod
    def from_frame(
        cls, frame: pd.DataFrame, scenario: ScenarioSpec, columns: Sequence[str] = ()
    ) -> "PosteriorDraws":
        beta_columns = [c for c in frame.columns if c.startswith("beta_")]
        beta_columns.sort(key=lambda c: int(c.split("_", 1)[1]))
        missing = [c for c in ("a", "sigma2") if c not in frame.columns]
        if missing or not beta_columns:
            raise SchemaError(f"draws file lacks columns {missing or ['beta_1']}")
        return cls(
            beta=frame[beta_columns].to_numpy(dtype=float),
            sigma2=frame["sigma2"].to_numpy(dtype=float),
            a=frame["a"].to_numpy(dtype=float),
            scenario=scenario,
            columns=tuple(columns),
        )


def a_grid(a_min: float, a_max: float, grid_size: int) -> np.ndarray:
    """Midpoints of grid_size equal cells over (a_min, a_max]."""
    if a_min == a_max:
        return np.array([float(a_max)])
    width = (a_max - a_min) / grid_size
    return a_min + width * (np.arange(grid_size) + 0.5)


def compute_sufficients(
    blocks: Sequence[WeightedBlock],
    grid: np.ndarray,
    counts: SampleCount = SampleCount.EFFECTIVE,
) -> IntegratedSufficients:
    """
    격자점마다 A, log|A|, beta_hat, d, log pi(a) 를 계산합니다.

    Args:
        blocks: weighted samples; at most one is discounted
        grid: discount values (ignored by undiscounted blocks)
        counts: sample sizes used in the a^(n_disc/2) factor and the
            sigma2 degrees of freedom (adjusted-weight sums by default)

    Returns:
        IntegratedSufficients over the whole grid
    """
    grid = np.asarray(grid, dtype=float)
    p = blocks[0].X.shape[1]
    if any(block.X.shape[1] != p for block in blocks):
        raise SchemaError("samples have different numbers of study covariates")
    rows = sum(block.n for block in blocks)
    if rows <= p:
        raise InsufficientRowsError(f"n={rows} must exceed p={p}")
    n_total = math.fsum(block.count(counts) for block in blocks)
    n_disc = math.fsum(block.count(counts) for block in blocks if block.discounted)
    # 유효 표본 크기가 p 이하이면 sigma2 의 shape 가 양수가 아님
    if n_total <= p:
        raise InsufficientRowsError(f"{counts.value} sample size {n_total:.4g} must exceed p={p}")

    K = grid.shape[0]
    A = np.zeros((K, p, p))
    b = np.zeros((K, p))
    for block in blocks:
        scale = grid if block.discounted else np.ones(K)
        Sxx = (block.X.T * block.w) @ block.X
        Sxy = block.X.T @ (block.w * block.y)
        A += scale[:, None, None] * Sxx
        b += scale[:, None] * Sxy

    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"weighted design is not positive definite: {exc}") from exc
    pivots = np.diagonal(chol, axis1=1, axis2=2)
    bad = np.min(pivots, axis=1) ** 2 <= PIVOT_TOL * np.max(np.diagonal(A, axis1=1, axis2=2), axis=1)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise RankDeficiencyError(f"weighted design is rank deficient at a={grid[k]:.6g}")

    logdet = 2.0 * np.sum(np.log(pivots), axis=1)
    inv_factor = np.swapaxes(np.linalg.inv(chol), 1, 2)  # L^{-T}
    beta_hat = np.einsum("kij,kj->ki", inv_factor, np.einsum("kji,kj->ki", inv_factor, b))

    d = np.zeros(K)
    total = np.zeros(K)
    for block in blocks:
        scale = grid if block.discounted else np.ones(K)
        resid = block.y[None, :] - beta_hat @ block.X.T
        d += scale * (resid ** 2 @ block.w)
        total += scale * (block.y ** 2 @ block.w)
    # 반올림 수준의 잔차는 0 으로 봄
    if np.any(d <= SATURATION_TOL * np.maximum(total, 1.0)):
        raise SaturatedModelError(
            "residual sum of squares is zero: the model is saturated, remove covariates"
        )

    with np.errstate(divide="ignore"):
        log_a = np.log(grid) if n_disc else np.zeros(K)
    log_density = 0.5 * n_disc * log_a - 0.5 * logdet - 0.5 * (n_total - p) * np.log(d)
    assert np.isfinite(log_density).any(), "grid masses underflow"
    return IntegratedSufficients(
        grid=grid,
        A=A,
        chol=chol,
        inv_factor=inv_factor,
        logdet=logdet,
        b=b,
        beta_hat=beta_hat,
        d=d,
        log_density=log_density,
        n_total=n_total,
        n_disc=n_disc,
        p=p,
        counts=counts,
    )


def sample_posterior(
    suff: IntegratedSufficients, M: int, stream: RngStream, threads: int = 1
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Multiplication-rule sampler over fixed draw blocks."""
    shape = 0.5 * suff.dof

    def block(gen: np.random.Generator, start: int, stop: int) -> np.ndarray:
        size = stop - start
        idx = np.atleast_1d(draw_from_grid(suff.log_density, gen, size))
        sigma2 = draw_inverse_gamma(shape, 0.5 * suff.d[idx], gen, size)
        z = gen.standard_normal((size, suff.p))
        beta = suff.beta_hat[idx] + np.sqrt(sigma2)[:, None] * np.einsum(
            "kij,kj->ki", suff.inv_factor[idx], z
        )
        return np.column_stack([idx.astype(float), sigma2, beta])

    out = blockwise(stream, M, block, threads)
    idx = out[:, 0].astype(int)
    return suff.grid[idx], out[:, 1], out[:, 2:]


def _draws(
    blocks: Sequence[WeightedBlock],
    spec: ScenarioSpec,
    columns: Sequence[str],
    threads: int,
) -> PosteriorDraws:
    grid = a_grid(spec.a_min, spec.a_max, spec.grid_size)
    suff = compute_sufficients(blocks, grid, spec.counts)
    a, sigma2, beta = sample_posterior(suff, spec.draws, RngStream.named(spec.seed, "posterior"), threads)
    logger.info(
        f"시나리오 {spec.kind.value}: grid={grid.shape[0]}, draws={spec.draws}, "
        f"E[a]={a.mean():.4f}, dof={suff.dof:.6g}"
    )
    return PosteriorDraws(
        beta=beta, sigma2=sigma2, a=a, scenario=spec, columns=tuple(columns), sufficients=suff
    )


def _single_spec(kind: ScenarioKind, spec: Optional[ScenarioSpec]) -> ScenarioSpec:
    if spec is None:
        return ScenarioSpec(kind=kind)
    if spec.kind != kind:
        return ScenarioSpec(kind=kind, draws=spec.draws, seed=spec.seed, counts=spec.counts)
    return spec


def fit_nps_only(
    nps: SurveySample, w1: np.ndarray, spec: Optional[ScenarioSpec] = None, threads: int = 1
) -> PosteriorDraws:
    """Scenario B: nps only, a = 1."""
    spec = _single_spec(ScenarioKind.B_NPS_ONLY, spec)
    block = WeightedBlock(nps.study_matrix, nps.y, np.asarray(w1, dtype=float))
    return _draws([block], spec, nps.study_columns, threads)


def fit_ps_only(
    ps: SurveySample,
    w2: np.ndarray,
    weighted: bool = True,
    spec: Optional[ScenarioSpec] = None,
    threads: int = 1,
) -> PosteriorDraws:
    """Scenario E (weighted) or G (all weights 1)."""
    kind = ScenarioKind.E_PS_ONLY if weighted else ScenarioKind.G_PS_UNWEIGHTED
    spec = _single_spec(kind, spec)
    w = np.asarray(w2, dtype=float) if weighted else np.ones(ps.n)
    return _draws([WeightedBlock(ps.study_matrix, ps.y, w)], spec, ps.study_columns, threads)


def fit_integrated(
    nps: SurveySample,
    ps: SurveySample,
    w1: np.ndarray,
    w2: np.ndarray,
    spec: ScenarioSpec,
    threads: int = 1,
) -> PosteriorDraws:
    """
    Scenario C (nps discounted) or D (ps discounted).

    Raises:
        RankDeficiencyError: A(a) is singular at some grid point
        SaturatedModelError: d(a) == 0
    """
    if not spec.kind.integrated:
        raise SchemaError(f"scenario {spec.kind.value} is not an integrated scenario")
    if tuple(nps.study_columns) != tuple(ps.study_columns):
        raise SchemaError("nps and ps study covariates differ")
    nps_discounted = spec.kind == ScenarioKind.C_NPS_PRIOR
    blocks = [
        WeightedBlock(nps.study_matrix, nps.y, np.asarray(w1, dtype=float), nps_discounted),
        WeightedBlock(ps.study_matrix, ps.y, np.asarray(w2, dtype=float), not nps_discounted),
    ]
    return _draws(blocks, spec, nps.study_columns, threads)


def fit_scenario(
    spec: ScenarioSpec,
    nps: SurveySample,
    ps: SurveySample,
    w1: np.ndarray,
    w2: np.ndarray,
    threads: int = 1,
) -> PosteriorDraws:
    kind = spec.kind
    if kind == ScenarioKind.B_NPS_ONLY:
        return fit_nps_only(nps, w1, spec, threads)
    if kind == ScenarioKind.E_PS_ONLY:
        return fit_ps_only(ps, w2, True, spec, threads)
    if kind == ScenarioKind.G_PS_UNWEIGHTED:
        return fit_ps_only(ps, w2, False, spec, threads)
    return fit_integrated(nps, ps, w1, w2, spec, threads)


def discount_overlap(source) -> float:
    """Overlap between the grid posterior of a and its uniform prior (1 = identical)."""
    suff = source.sufficients if isinstance(source, PosteriorDraws) else source
    if suff is None:
        raise SchemaError("draws carry no grid sufficients")
    probs = suff.probabilities
    return float(np.sum(np.minimum(probs, 1.0 / probs.shape[0])))


@dataclass(frozen=True)
class LocationModelPosterior:
    """Closed-form power-prior posterior for a common mean with nps prior."""

    n1: int
    n2: int
    ybar1: float
    ybar2: float
    s1sq: float
    s2sq: float
    grid: np.ndarray = field(repr=False)

    def lambda_(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return a * self.n1 / (a * self.n1 + self.n2)

    def residual_q(self, a: np.ndarray) -> np.ndarray:
        lam = self.lambda_(a)
        return (
            self.n2 * lam * (self.ybar1 - self.ybar2) ** 2
            + a * (self.n1 - 1) * self.s1sq
            + (self.n2 - 1) * self.s2sq
        )

    @property
    def shape(self) -> float:
        return 0.5 * (self.n1 + self.n2 - 1)

    def log_density(self, a: Optional[np.ndarray] = None) -> np.ndarray:
        a = self.grid if a is None else np.asarray(a, dtype=float)
        with np.errstate(divide="ignore"):
            return (
                0.5 * self.n1 * np.log(a)
                + 0.5 * np.log((1.0 - self.lambda_(a)) / self.n2)
                - self.shape * np.log(self.residual_q(a))
            )

    @property
    def probabilities(self) -> np.ndarray:
        return grid_probabilities(self.log_density())

    def theta_mean(self, a: np.ndarray) -> np.ndarray:
        lam = self.lambda_(a)
        return lam * self.ybar1 + (1.0 - lam) * self.ybar2

    def posterior_mean_a(self) -> float:
        return float(self.probabilities @ self.grid)

    def sample(self, M: int, source: RandomSource) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Three-stage draws (a, sigma2, theta)."""
        rng = as_generator(source)
        idx = np.atleast_1d(draw_from_grid(self.log_density(), rng, M))
        a = self.grid[idx]
        sigma2 = draw_inverse_gamma(self.shape, 0.5 * self.residual_q(a), rng, M)
        sd = np.sqrt((1.0 - self.lambda_(a)) * sigma2 / self.n2)
        theta = self.theta_mean(a) + sd * rng.standard_normal(M)
        return a, sigma2, theta

    def quadrature_mean_theta(self, n_a: int = 200, n_sigma: int = 200) -> float:
        """E[theta | data] by a 2-d rule over (a, log sigma^2)."""
        a = a_grid(0.0, 1.0, n_a)
        q = self.residual_q(a)
        lo = np.log(q.min() / (2.0 * self.shape)) - 10.0 / np.sqrt(self.shape)
        hi = np.log(q.max() / (2.0 * self.shape)) + 10.0 / np.sqrt(self.shape)
        log_s2 = np.linspace(lo, hi, n_sigma)
        s2 = np.exp(log_s2)
        # joint density of (a, log s2): Jacobian s2 folded into the power
        with np.errstate(divide="ignore"):
            log_joint = (
                0.5 * self.n1 * np.log(a)[:, None]
                + 0.5 * np.log((1.0 - self.lambda_(a)) / self.n2)[:, None]
                - self.shape * log_s2[None, :]
                - q[:, None] / (2.0 * s2[None, :])
            )
        weights = np.exp(log_joint - log_joint.max())
        return float(np.sum(weights * self.theta_mean(a)[:, None]) / np.sum(weights))


def location_model_posterior(y1: np.ndarray, y2: np.ndarray, grid_size: int = 1000) -> LocationModelPosterior:
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    if y1.shape[0] < 2 or y2.shape[0] < 2:
        raise InsufficientRowsError("location model needs at least two observations per sample")
    return LocationModelPosterior(
        n1=y1.shape[0],
        n2=y2.shape[0],
        ybar1=float(y1.mean()),
        ybar2=float(y2.mean()),
        s1sq=float(y1.var(ddof=1)),
        s2sq=float(y2.var(ddof=1)),
        grid=a_grid(0.0, 1.0, grid_size),
    )
