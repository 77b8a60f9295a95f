"""
보고서 및 manifest 테스트
"""

import json

import numpy as np
import pandas as pd
import pytest
from scipy.integrate import trapezoid

from powerprior.errors import DataValidationError
from powerprior.prediction import summarize
from powerprior.report import (
    MEAN_DRAWS_FILE,
    SUMMARY_FILE,
    build_report,
    collect_runs,
    density_curve,
    sha256_file,
    write_frame,
    write_json,
    write_manifest,
)


def _fake_run(directory, scenario, seed, a_hpd=None):
    directory.mkdir(parents=True)
    draws = np.random.default_rng(seed).normal(25.0 + seed, 0.3, 500)
    write_frame(pd.DataFrame({"ybar": draws}), directory / MEAN_DRAWS_FILE)
    payload = {"scenario": scenario, "summary": summarize(draws).to_dict()}
    if a_hpd:
        payload["a_hpd"] = a_hpd
    write_json(payload, directory / SUMMARY_FILE)


class TestManifest:
    def test_hashes_and_no_timestamp(self, tmp_path):
        artifact = write_frame(pd.DataFrame({"v": [0.1, 1.0 / 3.0]}), tmp_path / "values.csv")
        path = write_manifest(tmp_path, "fit", {"seed": 3, "out": tmp_path}, [artifact])
        manifest = json.loads(path.read_text(encoding="utf-8"))
        assert manifest["artifacts"] == {"values.csv": sha256_file(artifact)}
        assert manifest["command"] == "fit"
        assert manifest["config"]["seed"] == 3
        assert "numpy" in manifest["versions"]
        assert not any("time" in key or "date" in key for key in manifest)

    def test_manifest_is_reproducible(self, tmp_path):
        artifact = write_frame(pd.DataFrame({"v": [1.5]}), tmp_path / "a.csv")
        first = write_manifest(tmp_path, "fit", {"seed": 1}, [artifact]).read_bytes()
        second = write_manifest(tmp_path, "fit", {"seed": 1}, [artifact]).read_bytes()
        assert first == second

    def test_floats_round_trip_exactly(self, tmp_path):
        values = np.random.default_rng(0).normal(size=50)
        path = write_frame(pd.DataFrame({"v": values}), tmp_path / "v.csv")
        np.testing.assert_array_equal(pd.read_csv(path)["v"].to_numpy(), values)


class TestDensity:
    def test_integrates_to_one(self):
        draws = np.random.default_rng(1).gamma(3.0, 2.0, 4000)
        curve = density_curve(draws)
        assert trapezoid(curve["density"], curve["grid"]) == pytest.approx(1.0, abs=1e-3)

    def test_constant_draws(self):
        curve = density_curve(np.full(200, 4.0))
        assert np.all(np.isfinite(curve["density"]))


class TestBuildReport:
    def test_five_runs_in_scenario_order(self, tmp_path):
        for i, scenario in enumerate(["G", "E", "D", "C", "B"]):
            hpd = [0.4, 0.7] if scenario in ("C", "D") else None
            _fake_run(tmp_path / f"run_{i}", scenario, i, hpd)
        table, artifacts = build_report(tmp_path, tmp_path / "report")
        assert list(table["Model"]) == ["B", "C", "D", "E", "G"]
        assert list(table.columns[:6]) == ["Model", "PM", "PSD", "PCV", "CI_low", "CI_high"]
        assert len([p for p in artifacts if p.name.startswith("density_")]) == 5
        notes = json.loads((tmp_path / "report" / "comparison.json").read_text(encoding="utf-8"))["notes"]
        assert notes == ["C: 95% HPD of a is (0.400, 0.700)", "D: 95% HPD of a is (0.400, 0.700)"]

    def test_single_run(self, tmp_path):
        _fake_run(tmp_path / "only", "E", 0)
        table, _ = build_report(tmp_path)
        assert table.shape[0] == 1
        assert table["source"].iloc[0] == "only"

    def test_method_label(self, tmp_path):
        _fake_run(tmp_path / "boot", "B", 2)
        payload = json.loads((tmp_path / "boot" / SUMMARY_FILE).read_text(encoding="utf-8"))
        payload["method"] = "bootstrap"
        write_json(payload, tmp_path / "boot" / SUMMARY_FILE)
        table, _ = build_report(tmp_path)
        assert table["Model"].iloc[0] == "B (bootstrap)"

    def test_no_runs(self, tmp_path):
        with pytest.raises(DataValidationError):
            build_report(tmp_path)

    def test_foreign_json_is_ignored(self, tmp_path):
        (tmp_path / "other").mkdir()
        write_json({"hello": 1}, tmp_path / "other" / SUMMARY_FILE)
        assert collect_runs(tmp_path) == []
