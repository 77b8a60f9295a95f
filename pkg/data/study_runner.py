#!/usr/bin/env python3
"""
시뮬레이션 연구 실행기
rho 값마다 유한모집단 하나를 만들고, 반복마다 nps/ps 를 추출해 다섯 시나리오를
적합한 뒤 ARB, PRMSE, Cov, Wid 를 집계합니다.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from powerprior.bootstrap import replicate_seed
from powerprior.config import SCENARIO_ORDER, ScenarioKind, ScenarioSpec, StudySpec
from powerprior.errors import DataValidationError, NumericalError, StudyAbortedError
from powerprior.posterior import fit_scenario
from powerprior.prediction import surrogate_mean_draws
from powerprior.rngstat import RngStream, parallel_map
from powerprior.weights import adjust_weights, estimate_nps_weights
from data.population_simulator import FinitePopulation, draw_samples, generate_population

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    rho: float
    ARB: float
    PRMSE: float
    Cov: float
    Wid: float
    a_mean: float
    a_sd: float
    replications: int

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def aggregate_metrics(records: pd.DataFrame) -> pd.DataFrame:
    """
    반복별 기록을 (rho, scenario) 별 지표로 집계합니다 (보정 합산).

    Args:
        records: long-format rows with rho, scenario, T, PM, PSD,
            low, high, a_mean

    Returns:
        One MetricsRow per (rho, scenario), scenarios in B, C, D, E, G order
    """
    rows: List[MetricsRow] = []
    order = {kind.value: i for i, kind in enumerate(SCENARIO_ORDER)}
    for (rho, scenario), group in sorted(
        records.groupby(["rho", "scenario"]), key=lambda item: (item[0][0], order[item[0][1]])
    ):
        T = group["T"].to_numpy()
        PM = group["PM"].to_numpy()
        PSD = group["PSD"].to_numpy()
        low = group["low"].to_numpy()
        high = group["high"].to_numpy()
        covered = (low <= T) & (T <= high)
        a_values = group["a_mean"].to_numpy()
        integrated = ScenarioKind(scenario).integrated
        rows.append(
            MetricsRow(
                scenario=scenario,
                rho=float(rho),
                ARB=_mean(np.abs((PM - T) / T)),
                PRMSE=_mean(np.sqrt((PM - T) ** 2 + PSD ** 2)),
                Cov=_mean(covered.astype(float)),
                Wid=_mean(high - low),
                a_mean=_mean(a_values) if integrated else float("nan"),
                a_sd=float(np.std(a_values, ddof=1)) if integrated and len(a_values) > 1 else float("nan"),
                replications=len(group),
            )
        )
    return pd.DataFrame([row.to_dict() for row in rows])


class StudyRunner:
    def __init__(self, spec: StudySpec, threads: int = 1):
        """연구 실행기 초기화"""
        self.spec = spec
        self.threads = threads
        options = spec.weights
        if not spec.postprocess_weights:
            options = options.copy(update={"winsorize": False, "normalize": False})
        self.weight_options = options

    def population_for(self, rho: float) -> FinitePopulation:
        population_spec = self.spec.population.copy(update={"rho": rho, "seed": self.spec.seed})
        return generate_population(population_spec)

    def run_replication(self, population: FinitePopulation, r: int) -> List[Dict[str, object]]:
        """One replication: draw samples, weight the nps, fit every scenario."""
        rho = population.spec.rho
        stream = RngStream.named(self.spec.seed, f"study:{rho:.6g}").at(r)
        nps, ps = draw_samples(population, stream.generator())
        _, trail, facts = estimate_nps_weights(nps, ps, self.weight_options)
        w1 = adjust_weights(trail.final).w
        w2 = adjust_weights(ps.W).w

        records = []
        for kind in self.spec.scenarios:
            scenario = ScenarioSpec(
                kind=kind,
                grid_size=self.spec.grid_size,
                draws=self.spec.draws,
                seed=replicate_seed(self.spec.seed, r),
                counts=self.spec.counts,
            )
            post = fit_scenario(scenario, nps, ps, w1, w2)
            mean = surrogate_mean_draws(post, facts, stream.child(f"prediction:{kind.value}"))
            records.append(
                {
                    "rho": rho,
                    "replication": r,
                    "scenario": kind.value,
                    "T": population.true_mean,
                    "PM": mean.summary.PM,
                    "PSD": mean.summary.PSD,
                    "low": mean.summary.hpd_low,
                    "high": mean.summary.hpd_high,
                    "covered": int(mean.summary.covers(population.true_mean)),
                    "a_mean": float(np.mean(post.a)),
                    "n1": nps.n,
                }
            )
        return records

    def _safe_replication(self, population: FinitePopulation, r: int) -> Optional[List[Dict[str, object]]]:
        try:
            return self.run_replication(population, r)
        except (NumericalError, DataValidationError) as e:
            logger.warning(f"반복 {r} 실패 (rho={population.spec.rho}): {e.code} {e}")
            return None

    def run(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """
        전체 연구 실행

        Returns:
            (metrics table, per-replication long table)

        Raises:
            StudyAbortedError: failed replications exceed the allowed fraction
        """
        all_records: List[Dict[str, object]] = []
        R = self.spec.replications
        for rho in self.spec.rho_list:
            population = self.population_for(rho)
            logger.info(f"🔄 rho={rho}: {R} replications, scenarios={[k.value for k in self.spec.scenarios]}")
            results = parallel_map(
                lambda r: self._safe_replication(population, r), list(range(R)), self.threads
            )
            failed = sum(1 for result in results if result is None)
            if failed > self.spec.max_failure_fraction * R:
                raise StudyAbortedError(
                    f"{failed} of {R} replications failed at rho={rho} "
                    f"(limit {self.spec.max_failure_fraction:.0%})"
                )
            for result in results:
                if result is not None:
                    all_records.extend(result)
            logger.info(f"✅ rho={rho} 완료 (failed={failed})")
        if not all_records:
            raise StudyAbortedError("no replication produced results")
        records = pd.DataFrame(all_records)
        return aggregate_metrics(records), records


def run_study(spec: StudySpec, threads: int = 1) -> Tuple[pd.DataFrame, pd.DataFrame]:
    return StudyRunner(spec, threads).run()
