"""
Deterministic random streams and the handful of distributions the samplers use.

Streams are counter-based: a stream is the triple (seed, stream id,
counter) and always maps to the same Philox generator, so the draws of a
block do not depend on which worker produced them or in which order.

Inverse-gamma is parameterized by (shape, scale) with density
proportional to x^(-shape-1) exp(-scale/x); the mean is scale/(shape-1).
"""

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from scipy import linalg

from powerprior.errors import NumericalError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# 블록 크기는 결과에 영향을 주므로 고정
DRAW_BLOCK = 1024

_SPD_EPS = 1e-12


def stream_tag(name: str) -> int:
    """Stable 32-bit id for a module tag (same on every platform)."""
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    @classmethod
    def named(cls, seed: int, name: str) -> "RngStream":
        return cls(seed=int(seed), stream_id=stream_tag(name))

    def at(self, counter: int) -> "RngStream":
        return replace(self, counter=int(counter))

    def child(self, name: str, counter: int = 0) -> "RngStream":
        """Independent stream nested under this one (e.g. per replication)."""
        mixed = stream_tag(f"{self.stream_id}:{self.counter}:{name}")
        return RngStream(seed=self.seed, stream_id=mixed, counter=int(counter))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id, self.counter)
        )
        return np.random.Generator(np.random.Philox(seq))


RandomSource = Union[RngStream, np.random.Generator]


def as_generator(source: RandomSource) -> np.random.Generator:
    if isinstance(source, np.random.Generator):
        return source
    return source.generator()


def draw_blocks(total: int, block: int = DRAW_BLOCK) -> List[Tuple[int, int]]:
    """Fixed partition of ``range(total)`` into (start, stop) blocks."""
    return [(start, min(start + block, total)) for start in range(0, total, block)]


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Order-preserving map; ``threads`` only changes scheduling, never results."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def blockwise(
    stream: RngStream,
    total: int,
    fn: Callable[[np.random.Generator, int, int], np.ndarray],
    threads: int = 1,
) -> np.ndarray:
    """Run ``fn(generator, start, stop)`` over fixed blocks and concatenate.

    Block ``k`` always uses counter ``k`` of ``stream``, so the output is
    bit-identical for any thread count.
    """
    blocks = draw_blocks(total)
    parts = parallel_map(
        lambda item: fn(stream.at(item[0]).generator(), *item[1]),
        list(enumerate(blocks)),
        threads,
    )
    return np.concatenate(parts, axis=0) if parts else np.empty(0)


def draw_inverse_gamma(
    shape: Union[float, np.ndarray],
    scale: Union[float, np.ndarray],
    source: RandomSource,
    size: Optional[int] = None,
) -> Union[float, np.ndarray]:
    """Inverse-gamma draw(s): reciprocal of Gamma(shape, rate=scale)."""
    shape_arr = np.asarray(shape, dtype=float)
    scale_arr = np.asarray(scale, dtype=float)
    if np.any(shape_arr <= 0) or np.any(scale_arr <= 0):
        raise NumericalError(f"inverse-gamma needs shape > 0 and scale > 0, got {shape}, {scale}")
    rng = as_generator(source)
    gamma = rng.standard_gamma(shape_arr, size=size)
    return scale_arr / gamma


def spd_factor(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; an all-zero matrix is treated as eps * I."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if np.max(np.abs(cov)) <= _SPD_EPS:
        return np.sqrt(_SPD_EPS) * np.eye(cov.shape[0])
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"covariance is not positive definite: {exc}") from exc


def draw_mvn(
    mean: np.ndarray,
    cov: Optional[np.ndarray],
    source: RandomSource,
    size: Optional[int] = None,
    factor: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Multivariate normal via ``mean + L z`` with ``L`` the SPD factor of ``cov``.

    Pass a precomputed lower ``factor`` to skip the factorization.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    chol = factor if factor is not None else spd_factor(cov)
    rng = as_generator(source)
    if size is None:
        return mean + chol @ rng.standard_normal(mean.shape[0])
    z = rng.standard_normal((size, mean.shape[0]))
    return mean + z @ chol.T


def draw_from_grid(
    log_weights: np.ndarray,
    source: RandomSource,
    size: Optional[int] = None,
) -> Union[int, np.ndarray]:
    """Inverse-CDF draw of grid indices from unnormalized log weights."""
    log_weights = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(log_weights)
    if not finite.any():
        raise NumericalError("all grid log weights are -inf")
    shifted = np.where(finite, log_weights - np.max(log_weights[finite]), -np.inf)
    cdf = np.cumsum(np.exp(shifted))
    # max-subtraction guarantees the top cell has mass 1
    assert cdf[-1] >= 1.0
    rng = as_generator(source)
    u = rng.random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(cdf) - 1)


def grid_probabilities(log_weights: np.ndarray) -> np.ndarray:
    log_weights = np.asarray(log_weights, dtype=float)
    shifted = np.exp(log_weights - np.max(log_weights[np.isfinite(log_weights)]))
    return shifted / shifted.sum()


