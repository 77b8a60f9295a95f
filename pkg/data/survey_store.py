#!/usr/bin/env python3
"""
표본 데이터 입출력 및 검증 (nps / ps)

CSV files with a header row are bound to roles by name through a
SampleSchema; loaded samples are immutable and safe to share across
worker threads.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError, root_validator, validator

from powerprior.errors import (
    InsufficientRowsError,
    MissingColumnError,
    MissingWeightsError,
    NonNumericCellError,
    NonPositiveWeightError,
    SchemaError,
)

logger = logging.getLogger(__name__)

INTERCEPT = "intercept"


class SampleRole(str, Enum):
    NPS = "nps"
    PS = "ps"


class FactsSource(str, Enum):
    PS_IPW = "ps_ipw"
    EXTERNAL = "external"


class SampleSchema(BaseModel):
    """Column bindings for one CSV file."""

    role: SampleRole
    response: str
    covariates: List[str]
    study_covariates: Optional[List[str]] = None
    weight: Optional[str] = None
    add_intercept: bool = True
    binary: bool = False

    @validator("covariates")
    def _non_empty(cls, value):
        if len(set(value)) != len(value):
            raise ValueError("duplicate covariate names")
        return value

    @root_validator(skip_on_failure=True)
    def _check_roles(cls, values):
        # 연구변수(y)는 참여 모형에 들어갈 수 없음
        if values["response"] in values["covariates"]:
            raise ValueError(
                f"response '{values['response']}' must not be a participation covariate"
            )
        study = values.get("study_covariates")
        if study is not None and not set(study) <= set(values["covariates"]):
            extra = sorted(set(study) - set(values["covariates"]))
            raise ValueError(f"study covariates {extra} are not participation covariates")
        return values

    @property
    def design_columns(self) -> List[str]:
        return ([INTERCEPT] if self.add_intercept else []) + list(self.covariates)

    @property
    def study_columns(self) -> List[str]:
        chosen = self.study_covariates if self.study_covariates is not None else self.covariates
        return ([INTERCEPT] if self.add_intercept else []) + list(chosen)


@dataclass(frozen=True)
class SurveySample:
    """One sample: covariate matrix, responses and (optionally) design weights.

    ``X`` holds every participation covariate z (intercept first when
    present); the study covariates x are the ``study_columns`` subset.
    """

    role: SampleRole
    X: np.ndarray
    y: np.ndarray
    columns: Tuple[str, ...]
    study_columns: Tuple[str, ...]
    W: Optional[np.ndarray] = None
    response_name: str = "y"
    weight_name: Optional[str] = None
    binary: bool = False
    _study_index: Tuple[int, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise SchemaError(f"X has shape {X.shape} but y has {y.shape[0]} rows")
        if X.shape[1] != len(self.columns):
            raise SchemaError(f"{X.shape[1]} columns but {len(self.columns)} names")
        missing = [c for c in self.study_columns if c not in self.columns]
        if missing:
            raise SchemaError(f"study columns {missing} are not participation columns")
        if X.shape[0] < X.shape[1]:
            raise InsufficientRowsError(
                f"{self.role.value}: n={X.shape[0]} is smaller than p={X.shape[1]}"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise NonNumericCellError(f"{self.role.value}: non-finite cells present")
        if INTERCEPT in self.columns:
            j = self.columns.index(INTERCEPT)
            if not np.all(X[:, j] == 1.0):
                raise SchemaError("intercept column must be all ones")
        W = self.W
        if W is not None:
            W = np.asarray(W, dtype=float).ravel()
            if W.shape[0] != y.shape[0]:
                raise SchemaError("weight vector length differs from n")
            bad = np.flatnonzero(~(W > 0))
            if bad.size:
                raise NonPositiveWeightError(
                    f"{self.role.value}: nonpositive weight {W[bad[0]]} at row {bad[0] + 1}"
                )
        elif self.role == SampleRole.PS:
            raise MissingWeightsError("missing design weights for ps")
        if self.binary and not np.all((y == 0.0) | (y == 1.0)):
            raise SchemaError("binary response must be coded 0/1")
        # frozen dataclass: object.__setattr__ 로 정규화된 배열 저장
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "study_columns", tuple(self.study_columns))
        object.__setattr__(
            self, "_study_index", tuple(self.columns.index(c) for c in self.study_columns)
        )

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def participation_matrix(self) -> np.ndarray:
        return self.X

    @property
    def study_matrix(self) -> np.ndarray:
        return self.X[:, list(self._study_index)]

    def take(self, indices: np.ndarray) -> "SurveySample":
        indices = np.asarray(indices, dtype=int)
        return replace(
            self,
            X=self.X[indices],
            y=self.y[indices],
            W=None if self.W is None else self.W[indices],
        )

    def with_weights(self, W: Optional[np.ndarray]) -> "SurveySample":
        return replace(self, W=W)

    def with_study_columns(self, study_columns: Sequence[str]) -> "SurveySample":
        return replace(self, study_columns=tuple(study_columns))


class PopulationFacts(BaseModel):
    """Population size and covariate means used for prediction."""

    N_hat: float
    xbar_hat: List[float]
    columns: List[str]
    source: FactsSource = FactsSource.PS_IPW

    @validator("N_hat")
    def _positive(cls, value):
        if not value > 0:
            raise ValueError(f"N_hat must be positive, got {value}")
        return value

    @root_validator(skip_on_failure=True)
    def _aligned(cls, values):
        if len(values["xbar_hat"]) != len(values["columns"]):
            raise ValueError("xbar_hat and columns differ in length")
        return values

    def xbar_for(self, columns: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.xbar_hat[self.columns.index(c)] for c in columns])
        except ValueError as exc:
            raise SchemaError(f"population facts lack column: {exc}") from exc

    @property
    def totals(self) -> np.ndarray:
        return self.N_hat * np.asarray(self.xbar_hat)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.json(indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PopulationFacts":
        path = Path(path)
        if not path.exists():
            raise SchemaError(f"population facts file not found: {path}")
        try:
            return cls.parse_file(path)
        except ValidationError as exc:
            raise SchemaError(f"{path.name}: invalid population facts: {exc.errors()[0]['msg']}") from exc


def _numeric_column(frame: pd.DataFrame, column: str, path: Path) -> np.ndarray:
    raw = frame[column].astype(str).str.strip()
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna().to_numpy() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        cell = raw.iloc[row]
        what = "empty cell" if cell == "" else f"non-numeric cell '{cell}'"
        raise NonNumericCellError(f"{path.name}: {what} at row {row + 1}, column '{column}'")
    return values.to_numpy(dtype=float)


def load_sample(path: Union[str, Path], schema: SampleSchema) -> SurveySample:
    """
    CSV 파일을 읽어 검증된 SurveySample 로 변환합니다.

    Args:
        path: CSV file with a header row
        schema: column bindings and role

    Returns:
        Validated SurveySample (intercept prepended when requested)
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"input file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    logger.info(f"{schema.role.value} 표본 로드: {path.name} ({len(frame)} rows)")

    if schema.role == SampleRole.PS and (schema.weight is None or schema.weight not in frame.columns):
        raise MissingWeightsError("missing design weights for ps")
    required = [schema.response] + list(schema.covariates)
    if schema.weight is not None:
        required.append(schema.weight)
    for column in required:
        if column not in frame.columns:
            raise MissingColumnError(f"{path.name}: missing column '{column}'")

    y = _numeric_column(frame, schema.response, path)
    blocks = [_numeric_column(frame, c, path) for c in schema.covariates]
    if schema.add_intercept:
        blocks.insert(0, np.ones(len(frame)))
    X = np.column_stack(blocks) if blocks else np.empty((len(frame), 0))

    W = None
    if schema.weight is not None:
        W = _numeric_column(frame, schema.weight, path)
        bad = np.flatnonzero(W <= 0)
        if bad.size:
            raise NonPositiveWeightError(
                f"{path.name}: nonpositive weight {W[bad[0]]:g} at row {bad[0] + 1}, "
                f"column '{schema.weight}'"
            )
    if len(frame) < X.shape[1]:
        raise InsufficientRowsError(f"{path.name}: n={len(frame)} < p={X.shape[1]}")

    return SurveySample(
        role=schema.role,
        X=X,
        y=y,
        columns=tuple(schema.design_columns),
        study_columns=tuple(schema.study_columns),
        W=W,
        response_name=schema.response,
        weight_name=schema.weight,
        binary=schema.binary,
    )


def write_sample(sample: SurveySample, path: Union[str, Path]) -> None:
    """Write a sample back to CSV with enough digits to round-trip exactly."""
    frame = pd.DataFrame()
    if sample.W is not None:
        frame[sample.weight_name or "weight"] = sample.W
    for j, column in enumerate(sample.columns):
        if column != INTERCEPT:
            frame[column] = sample.X[:, j]
    frame[sample.response_name] = sample.y
    frame.to_csv(path, index=False, float_format="%.17g")


def population_facts_from_ps(ps: SurveySample) -> PopulationFacts:
    """
    ps 설계가중치로 N 과 모집단 공변량 평균을 추정합니다 (IPW).

    Sums use math.fsum, so the result does not depend on row order.
    """
    if ps.W is None:
        raise MissingWeightsError("missing design weights for ps")
    X = ps.study_matrix
    N_hat = math.fsum(ps.W)
    xbar = [math.fsum(ps.W * X[:, j]) / N_hat for j in range(X.shape[1])]
    return PopulationFacts(
        N_hat=N_hat, xbar_hat=xbar, columns=list(ps.study_columns), source=FactsSource.PS_IPW
    )


def standardize_samples(
    nps: SurveySample, ps: SurveySample
) -> Tuple[SurveySample, SurveySample, Dict[str, Dict[str, float]]]:
    """Centre and scale non-intercept columns with ps-weighted moments.

    Both samples share one transform so their regressions stay comparable.
    """
    if ps.W is None:
        raise MissingWeightsError("missing design weights for ps")
    weights = ps.W / ps.W.sum()
    center = weights @ ps.X
    scale = np.sqrt(weights @ (ps.X - center) ** 2)
    transform = {}
    for j, column in enumerate(ps.columns):
        if column == INTERCEPT or scale[j] == 0.0:
            center[j], scale[j] = 0.0, 1.0
        transform[column] = {"center": float(center[j]), "scale": float(scale[j])}
    logger.info(f"공변량 표준화: {json.dumps(transform)}")
    return (
        replace(nps, X=(nps.X - center) / scale),
        replace(ps, X=(ps.X - center) / scale),
        transform,
    )
