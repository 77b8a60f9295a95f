"""
Run configuration: pydantic models for every tunable spec plus env settings.

Values come from (lowest to highest priority) model defaults, the
``POWERPRIOR_*`` environment / ``.env`` file, a key-value ``--config``
file and finally command-line flags.
"""

import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Tuple

from pydantic import BaseModel, BaseSettings, Field, root_validator, validator

logger = logging.getLogger(__name__)


class ScenarioKind(str, Enum):
    """The five estimation scenarios compared throughout the package."""

    B_NPS_ONLY = "B"
    C_NPS_PRIOR = "C"
    D_PS_PRIOR = "D"
    E_PS_ONLY = "E"
    G_PS_UNWEIGHTED = "G"

    @property
    def integrated(self) -> bool:
        return self in (ScenarioKind.C_NPS_PRIOR, ScenarioKind.D_PS_PRIOR)

    @property
    def label(self) -> str:
        return self.value


SCENARIO_ORDER: Tuple[ScenarioKind, ...] = tuple(ScenarioKind)


class Misspecification(str, Enum):
    NONE = "none"
    DROP_X3_POPMODEL = "drop-x3-popmodel"
    DROP_X3_BOTH = "drop-x3-both"


class ResampleMode(str, Enum):
    WITH_REPLACEMENT = "with_replacement"
    DIRICHLET = "dirichlet_weights"


class WeightPlacement(str, Enum):
    """Where the adjusted weight enters the binary sample model."""

    LINEAR_PREDICTOR = "linear_predictor"
    LIKELIHOOD = "likelihood"


class SampleCount(str, Enum):
    """
    Sample size entering the discount exponent and the sigma2 degrees of freedom.

    ``effective`` uses the adjusted-weight sums (n_o of each sample), so
    the counts live on the same scale as the weighted residuals;
    ``rows`` uses the raw row counts n1, n2.
    """

    EFFECTIVE = "effective"
    ROWS = "rows"


class ScenarioSpec(BaseModel):
    kind: ScenarioKind
    a_min: float = Field(0.0, ge=0.0, le=1.0)
    a_max: float = Field(1.0, ge=0.0, le=1.0)
    grid_size: int = Field(1000, ge=1)
    draws: int = Field(10000, ge=1)
    seed: int = 0
    counts: SampleCount = SampleCount.EFFECTIVE

    class Config:
        allow_mutation = False

    @root_validator(skip_on_failure=True)
    def _check_discount_range(cls, values):
        kind = values["kind"]
        if not kind.integrated:
            # B, E, G: 할인 없음 (a = 1 고정)
            values["a_min"] = 1.0
            values["a_max"] = 1.0
            values["grid_size"] = 1
            return values
        if values["a_min"] > values["a_max"]:
            raise ValueError(f"a_min {values['a_min']} exceeds a_max {values['a_max']}")
        if values["a_max"] <= 0.0:
            raise ValueError("a_range must contain positive values")
        if values["a_min"] == values["a_max"]:
            values["grid_size"] = 1
        return values

    @property
    def fixed_discount(self) -> bool:
        return self.a_min == self.a_max


class WeightOptions(BaseModel):
    """Settings for CLW propensity estimation and nps weight post-processing."""

    max_iter: int = Field(100, ge=1)
    tol: float = Field(1e-8, gt=0.0)
    damping: bool = True
    fallback_max_iter: int = Field(5000, ge=1)
    winsorize: bool = True
    lower_clamp: float = Field(1.0, gt=0.0)
    upper_quantile: float = Field(0.99, gt=0.0, le=1.0)
    normalize: bool = True
    clamp_negative: bool = True


class BinarySpec(BaseModel):
    grid_points: int = Field(201, ge=3)
    a_grid_points: int = Field(201, ge=2)
    grid_width_sd: float = Field(6.0, gt=0.0)
    burnin: int = Field(1000, ge=0)
    thin: int = Field(5, ge=1)
    draws: int = Field(5000, ge=1)
    seed: int = 0
    a_min: float = Field(0.0, ge=0.0, le=1.0)
    a_max: float = Field(1.0, ge=0.0, le=1.0)
    separation_sweeps: int = Field(3, ge=1)
    weight_placement: WeightPlacement = WeightPlacement.LINEAR_PREDICTOR
    constraint_tol: float = Field(0.01, gt=0.0)
    max_tries: int = Field(1000, ge=1)
    refresh_every: int = Field(10, ge=1)
    bin_widths: Dict[str, float] = Field(default_factory=lambda: {"age": 5.0})

    @root_validator(skip_on_failure=True)
    def _check_a_range(cls, values):
        if values["a_min"] > values["a_max"]:
            raise ValueError("a_min exceeds a_max")
        return values


class BootstrapSpec(BaseModel):
    replicates: int = Field(1000, ge=1)
    mode: ResampleMode = ResampleMode.WITH_REPLACEMENT
    inner_draws: int = Field(100, ge=1)
    seed: int = 0
    max_drop_fraction: float = Field(0.05, ge=0.0, le=1.0)

    @validator("replicates")
    def _warn_small_b(cls, value):
        if value < 100:
            logger.warning(f"replicates={value} < 100: bootstrap intervals are unreliable")
        return value


class PopulationSpec(BaseModel):
    N: int = Field(20000, ge=2)
    n1: int = Field(1500, ge=1)
    n2: int = Field(300, ge=1)
    rho: float = Field(0.5, gt=0.0, le=1.0)
    beta: Tuple[float, float, float, float] = (23.8449, 0.0559, 2.2656, 0.2525)
    participation_coef: Tuple[float, float, float] = (0.1, 0.2, 0.1)
    size_coef: Tuple[float, float, float] = (1.0, 0.2, 0.1)
    size_ratio: float = Field(50.0, gt=0.0)
    seed: int = 0
    misspec: Misspecification = Misspecification.NONE

    @root_validator(skip_on_failure=True)
    def _check_sizes(cls, values):
        if values["n1"] + values["n2"] > values["N"]:
            raise ValueError("n1 + n2 must not exceed N")
        return values


class StudySpec(BaseModel):
    rho_list: List[float] = [0.20, 0.30, 0.50, 0.80]
    replications: int = Field(200, ge=1)
    scenarios: List[ScenarioKind] = list(SCENARIO_ORDER)
    seed: int = 0
    draws: int = Field(2000, ge=100)
    grid_size: int = Field(1000, ge=1)
    postprocess_weights: bool = True
    counts: SampleCount = SampleCount.EFFECTIVE
    max_failure_fraction: float = Field(0.02, ge=0.0, le=1.0)
    population: PopulationSpec = PopulationSpec()
    weights: WeightOptions = WeightOptions()

    @validator("rho_list", each_item=True)
    def _check_rho(cls, value):
        if not 0.0 < value <= 1.0:
            raise ValueError(f"rho {value} outside (0, 1]")
        return value


class Settings(BaseSettings):
    """Environment-level defaults (``POWERPRIOR_OUT_DIR`` and friends)."""

    out_dir: Path = Path("runs")
    threads: int = Field(1, ge=1)
    log_level: str = "INFO"

    class Config:
        env_prefix = "POWERPRIOR_"
        env_file = ".env"
