import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from powerprior.config import PopulationSpec
from powerprior.rngstat import RngStream
from data.population_simulator import draw_samples, generate_population
from data.survey_store import INTERCEPT, SampleRole, SurveySample


@pytest.fixture(scope="session")
def small_population():
    """작은 시뮬레이션 모집단 (N=4000, n1=400, n2=100)"""
    spec = PopulationSpec(N=4000, n1=400, n2=100, rho=0.5, seed=11)
    return generate_population(spec)


@pytest.fixture(scope="session")
def sample_pair(small_population):
    return draw_samples(small_population, RngStream.named(11, "test-samples"))


def make_sample(role, X, y, W=None, columns=None, binary=False):
    """Sample with an intercept column prepended to X."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n = X.shape[0]
    names = columns or [f"x{j + 1}" for j in range(X.shape[1])]
    design = np.column_stack([np.ones(n), X]) if X.shape[1] else np.ones((n, 1))
    cols = (INTERCEPT,) + tuple(names[: X.shape[1]])
    return SurveySample(
        role=role,
        X=design,
        y=np.asarray(y, dtype=float),
        columns=cols,
        study_columns=cols,
        W=None if W is None else np.asarray(W, dtype=float),
        weight_name=None if W is None else "weight",
        binary=binary,
    )


@pytest.fixture
def make_nps():
    def build(X, y, **kwargs):
        return make_sample(SampleRole.NPS, X, y, **kwargs)

    return build


@pytest.fixture
def make_ps():
    def build(X, y, W, **kwargs):
        return make_sample(SampleRole.PS, X, y, W=W, **kwargs)

    return build


@pytest.fixture
def intercept_only():
    """Intercept-only samples for location-model checks."""

    def build(y1, y2, W2=None):
        y1 = np.asarray(y1, dtype=float)
        y2 = np.asarray(y2, dtype=float)
        cols = (INTERCEPT,)
        nps = SurveySample(SampleRole.NPS, np.ones((y1.shape[0], 1)), y1, cols, cols)
        W2 = np.ones(y2.shape[0]) if W2 is None else np.asarray(W2, dtype=float)
        ps = SurveySample(SampleRole.PS, np.ones((y2.shape[0], 1)), y2, cols, cols, W=W2, weight_name="weight")
        return nps, ps

    return build
