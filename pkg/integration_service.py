"""
Integration service: runs each command on a merged configuration and
writes its artifacts plus ``manifest.json`` into the output directory.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from powerprior.binary import (
    binary_blocks,
    build_populations,
    griddy_gibbs_binary,
    population_factory,
    populations_needed,
    surrogate_proportion,
)
from powerprior.bootstrap import bootstrap_pipeline, preliminary_ps_bootstrap
from powerprior.config import (
    BinarySpec,
    BootstrapSpec,
    PopulationSpec,
    ScenarioKind,
    ScenarioSpec,
    StudySpec,
    WeightOptions,
)
from powerprior.errors import SchemaError, UsageError
from powerprior.posterior import PosteriorDraws, discount_overlap, fit_scenario
from powerprior.prediction import hpd_interval, summary_row, surrogate_mean_draws
from powerprior.report import (
    MEAN_DRAWS_FILE,
    SUMMARY_FILE,
    build_report,
    write_frame,
    write_json,
    write_manifest,
)
from powerprior.rngstat import RngStream
from powerprior.weights import adjust_weights, estimate_nps_weights
from data.study_runner import run_study
from data.survey_store import (
    PopulationFacts,
    SampleRole,
    SampleSchema,
    SurveySample,
    load_sample,
    standardize_samples,
)

logger = logging.getLogger(__name__)

Config = Dict[str, Any]

_WEIGHT_KEYS = ("max_iter", "tol", "lower_clamp", "upper_quantile")
_SCENARIO_KEYS = ("grid_size", "draws", "a_min", "a_max", "seed", "counts")
_BINARY_KEYS = (
    "grid_points",
    "burnin",
    "thin",
    "draws",
    "seed",
    "a_min",
    "a_max",
    "constraint_tol",
    "refresh_every",
    "weight_placement",
)


def _pick(config: Config, keys) -> Dict[str, Any]:
    return {key: config[key] for key in keys if config.get(key) is not None}


class IntegrationService:
    """Runs the weighting, fitting, prediction, bootstrap, simulation and report commands."""

    def __init__(self):
        logger.debug("IntegrationService 초기화")

    # ----- 설정 변환 -----
    def sample_schema(self, config: Config, role: SampleRole, binary: bool = False) -> SampleSchema:
        if not config.get("covariates"):
            raise UsageError("--covariates is required")
        return SampleSchema(
            role=role,
            response=config.get("response", "y"),
            covariates=config["covariates"],
            study_covariates=config.get("study_covariates"),
            weight=(
                config.get("weight_column", "weight") if role == SampleRole.PS else config.get("nps_weight")
            ),
            add_intercept=not config.get("no_intercept", False),
            binary=binary,
        )

    def weight_options(self, config: Config) -> WeightOptions:
        return WeightOptions(
            winsorize=not config.get("no_winsorize", False),
            normalize=not config.get("no_normalize", False),
            clamp_negative=not config.get("no_clamp_negative", False),
            **_pick(config, _WEIGHT_KEYS),
        )

    def scenario_spec(self, config: Config) -> ScenarioSpec:
        if not config.get("scenario"):
            raise UsageError("--scenario is required")
        return ScenarioSpec(kind=ScenarioKind(config["scenario"]), **_pick(config, _SCENARIO_KEYS))

    def load_samples(self, config: Config, binary: bool = False) -> Tuple[SurveySample, SurveySample]:
        for key in ("nps", "ps"):
            if not config.get(key):
                raise UsageError(f"--{key} is required")
        nps = load_sample(config["nps"], self.sample_schema(config, SampleRole.NPS, binary))
        ps = load_sample(config["ps"], self.sample_schema(config, SampleRole.PS, binary))
        if config.get("standardize"):
            nps, ps, _ = standardize_samples(nps, ps)
        return nps, ps

    def _external_facts(self, config: Config) -> Optional[PopulationFacts]:
        path = config.get("calibrate_totals")
        return PopulationFacts.load(path) if path else None

    def _weights(self, config: Config, nps: SurveySample, ps: SurveySample):
        external = self._external_facts(config)
        fit, trail, facts = estimate_nps_weights(
            nps, ps, self.weight_options(config), config.get("calibrate", False), external
        )
        return fit, trail, facts, adjust_weights(trail.final).w, adjust_weights(ps.W).w

    @staticmethod
    def _out_dir(config: Config) -> Path:
        out_dir = Path(config["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        return out_dir

    # ----- 명령 -----
    def run_weights(self, config: Config) -> List[Path]:
        """CLW 가중치 추정 후 단계별 가중치를 CSV 로 저장"""
        out_dir = self._out_dir(config)
        nps, ps = self.load_samples(config)
        fit, trail, facts, _, _ = self._weights(config, nps, ps)
        frame = pd.DataFrame(
            {
                "row_id": np.arange(1, nps.n + 1),
                "pi": fit.pi,
                "W1_raw": trail.raw,
                "W1_winsorized": trail.winsorized,
                "W1_calibrated": trail.calibrated,
            }
        )
        facts_path = out_dir / "facts.json"
        facts.save(facts_path)
        artifacts = [
            write_frame(frame, out_dir / "weights.csv"),
            facts_path,
            write_json(
                {
                    "theta": fit.theta,
                    "columns": list(nps.columns),
                    "iterations": fit.iterations,
                    "method": fit.method,
                    "final_gradient_norm": fit.final_gradient_norm,
                    "negative_calibrated": trail.calibration.n_negative if trail.calibration else 0,
                },
                out_dir / "propensity.json",
            ),
        ]
        logger.info(f"✅ weights: n1={nps.n}, N_hat={facts.N_hat:.6g}")
        write_manifest(out_dir, "weights", config, artifacts)
        return artifacts

    def _fit(self, config: Config) -> Tuple[PosteriorDraws, PopulationFacts, SurveySample, SurveySample]:
        spec = self.scenario_spec(config)
        nps, ps = self.load_samples(config)
        _, _, facts, w1, w2 = self._weights(config, nps, ps)
        post = fit_scenario(spec, nps, ps, w1, w2, config.get("threads", 1))
        return post, facts, nps, ps

    def _fit_summary(self, post: PosteriorDraws) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "scenario": post.scenario.kind.value,
            "draws": post.M,
            "a_mean": float(np.mean(post.a)),
            "columns": list(post.columns),
            "beta_mean": post.beta.mean(axis=0),
            "sigma2_mean": float(np.mean(post.sigma2)),
        }
        if post.scenario.kind.integrated:
            payload["a_hpd"] = hpd_interval(post.a)
            payload["discount_overlap"] = discount_overlap(post)
        return payload

    def run_fit(self, config: Config) -> List[Path]:
        """시나리오 적합: draws.csv (a, sigma2, beta_1..beta_p) + fit_summary.json"""
        out_dir = self._out_dir(config)
        post, facts, _, _ = self._fit(config)
        facts_path = out_dir / "facts.json"
        facts.save(facts_path)
        artifacts = [
            write_frame(post.to_frame(), out_dir / "draws.csv"),
            write_json(self._fit_summary(post), out_dir / "fit_summary.json"),
            facts_path,
        ]
        write_manifest(out_dir, "fit", config, artifacts)
        return artifacts

    def _predict_scenario(self, config: Config, draws_path: Path) -> ScenarioSpec:
        kind = config.get("scenario")
        sibling = draws_path.parent / "fit_summary.json"
        if not kind and sibling.exists():
            kind = json.loads(sibling.read_text(encoding="utf-8")).get("scenario")
        if not kind:
            raise UsageError("--scenario is required when the draws file has no fit_summary.json")
        return ScenarioSpec(kind=ScenarioKind(kind), seed=config.get("seed", 0))

    def _write_mean(
        self,
        out_dir: Path,
        scenario: str,
        draws: np.ndarray,
        summary,
        a: Optional[np.ndarray] = None,
        method: Optional[str] = None,
        extra: Optional[Dict[str, Any]] = None,
    ) -> List[Path]:
        payload: Dict[str, Any] = {"scenario": scenario, "summary": summary.to_dict()}
        if a is not None and ScenarioKind(scenario).integrated and len(a) >= 100:
            payload["a_hpd"] = hpd_interval(a)
        if method:
            payload["method"] = method
        payload.update(extra or {})
        row = summary_row(scenario, summary)
        return [
            write_frame(pd.DataFrame({"ybar": draws}), out_dir / MEAN_DRAWS_FILE),
            write_frame(pd.DataFrame([row]), out_dir / "summary.csv"),
            write_json(payload, out_dir / SUMMARY_FILE),
        ]

    def run_predict(self, config: Config) -> List[Path]:
        """draws CSV + PopulationFacts JSON -> Ybar 사후분포 요약"""
        out_dir = self._out_dir(config)
        if not config.get("draws") or not config.get("facts"):
            raise UsageError("--draws and --facts are required")
        draws_path = Path(config["draws"])
        if not draws_path.exists():
            raise SchemaError(f"draws file not found: {draws_path}")
        facts = PopulationFacts.load(config["facts"])
        scenario = self._predict_scenario(config, draws_path)
        post = PosteriorDraws.from_frame(pd.read_csv(draws_path), scenario)
        if post.p != len(facts.columns):
            raise SchemaError(f"draws have {post.p} coefficients, facts have {len(facts.columns)} columns")
        mean = surrogate_mean_draws(post, facts, threads=config.get("threads", 1), columns=facts.columns)
        artifacts = self._write_mean(out_dir, scenario.kind.value, mean.draws, mean.summary, post.a)
        write_manifest(out_dir, "predict", config, artifacts)
        return artifacts

    def run_fit_binary(self, config: Config) -> List[Path]:
        """이진 연구변수: griddy Gibbs + 모집단 재표본 + 비율 대리표본"""
        out_dir = self._out_dir(config)
        spec = BinarySpec(**_pick(config, _BINARY_KEYS))
        nps, ps = self.load_samples(config, binary=True)
        _, trail, facts, w1, w2 = self._weights(config, nps, ps)
        threads = config.get("threads", 1)
        post = griddy_gibbs_binary(
            binary_blocks(nps, ps, w1, w2), spec, RngStream.named(spec.seed, "binary"), nps.study_columns
        )
        pool_weights = np.concatenate([trail.final, ps.W])
        population_stream = RngStream.named(spec.seed, "population")
        if config.get("fixed_population"):
            populations = build_populations(nps, ps, facts, 1, spec, population_stream, pool_weights)
            count = 1
        else:
            # 갱신 블록마다 모집단을 만들고 버림 (전부 메모리에 올리지 않음)
            populations = population_factory(nps, ps, facts, spec, population_stream, pool_weights)
            count = populations_needed(post.M, spec.refresh_every)
        mean = surrogate_proportion(
            post, populations, RngStream.named(spec.seed, "surrogate"), spec.refresh_every, threads
        )
        frame = pd.DataFrame({"a": post.a})
        for j in range(post.beta.shape[1]):
            frame[f"beta_{j + 1}"] = post.beta[:, j]
        artifacts = [write_frame(frame, out_dir / "binary_draws.csv")]
        artifacts += self._write_mean(
            out_dir,
            ScenarioKind.C_NPS_PRIOR.value,
            mean.draws,
            mean.summary,
            post.a,
            method="binary",
            extra={"diagnostics": post.diagnostics, "populations": count},
        )
        write_manifest(out_dir, "fit-binary", config, artifacts)
        return artifacts

    def run_bootstrap(self, config: Config) -> List[Path]:
        """2단계 bootstrap: 복제마다 가중치 재추정 후 Ybar 표본 합치기"""
        out_dir = self._out_dir(config)
        scenario = self.scenario_spec(config)
        spec = BootstrapSpec(
            **_pick(config, ("replicates", "inner_draws", "seed")),
            **({"mode": config["mode"]} if config.get("mode") else {}),
        )
        nps, ps = self.load_samples(config)
        _, _, facts, w1, w2 = self._weights(config, nps, ps)
        threads = config.get("threads", 1)
        baseline = surrogate_mean_draws(fit_scenario(scenario, nps, ps, w1, w2, threads), facts).summary
        result = bootstrap_pipeline(
            nps,
            ps,
            scenario,
            spec,
            self.weight_options(config),
            config.get("calibrate", False),
            threads,
            baseline,
        )
        artifacts = [
            write_frame(result.replicates, out_dir / "replicates.csv"),
            write_frame(result.comparison(), out_dir / "comparison.csv"),
        ]
        artifacts += self._write_mean(
            out_dir,
            scenario.kind.value,
            result.draws,
            result.summary,
            method="bootstrap",
            extra={"dropped": result.dropped, "baseline": baseline.to_dict()},
        )
        if config.get("preliminary"):
            prelim = preliminary_ps_bootstrap(ps, config.get("ps_replicates", 10000), spec.seed)
            artifacts.append(write_json(prelim.intervals, out_dir / "ps_bootstrap.json"))
        write_manifest(out_dir, "bootstrap", config, artifacts)
        return artifacts

    def run_simulate(self, config: Config) -> List[Path]:
        """시뮬레이션 연구: metrics.csv (Table 형태) + replications.csv"""
        out_dir = self._out_dir(config)
        population = PopulationSpec(**_pick(config, ("N", "n1", "n2", "misspec", "size_ratio")))
        spec = StudySpec(
            population=population,
            weights=self.weight_options(config),
            postprocess_weights=not config.get("no_postprocess", False),
            **_pick(config, ("rho_list", "replications", "scenarios", "seed", "draws", "grid_size", "counts")),
        )
        metrics, records = run_study(spec, config.get("threads", 1))
        artifacts = [
            write_frame(metrics, out_dir / "metrics.csv"),
            write_frame(records, out_dir / "replications.csv"),
        ]
        write_manifest(out_dir, "simulate", config, artifacts)
        return artifacts

    def run_report(self, config: Config) -> List[Path]:
        out_dir = self._out_dir(config)
        runs_dir = Path(config.get("runs") or out_dir)
        table, artifacts = build_report(runs_dir, out_dir)
        logger.info(f"✅ report: {len(table)} rows")
        write_manifest(out_dir, "report", config, artifacts)
        return artifacts

    def run(self, command: str, config: Config) -> List[Path]:
        handlers = {
            "weights": self.run_weights,
            "fit": self.run_fit,
            "fit-binary": self.run_fit_binary,
            "predict": self.run_predict,
            "bootstrap": self.run_bootstrap,
            "simulate": self.run_simulate,
            "report": self.run_report,
        }
        if command not in handlers:
            raise UsageError(f"unknown command '{command}'")
        return handlers[command](config)


# 서비스 인스턴스
integration_service = IntegrationService()
