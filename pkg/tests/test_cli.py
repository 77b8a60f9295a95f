"""
명령행 인터페이스 테스트 (종료 코드, 산출물, 설정 병합)
"""

import json

import pandas as pd
import pytest

from app import build_parser, main
from data.survey_store import write_sample


@pytest.fixture
def sample_files(tmp_path, sample_pair):
    nps, ps = sample_pair
    write_sample(nps, tmp_path / "nps.csv")
    write_sample(ps, tmp_path / "ps.csv")
    return tmp_path


def _sample_args(directory):
    return ["--nps", str(directory / "nps.csv"), "--ps", str(directory / "ps.csv"), "--covariates", "x1,x2,x3"]


class TestExitCodes:
    def test_missing_scenario_is_usage_error(self, sample_files, capsys):
        code = main(["fit", *_sample_args(sample_files), "--out", str(sample_files / "out")])
        assert code == 1
        assert "error=usage" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self):
        assert main(["fit", "--no-such-flag"]) == 1

    def test_missing_command(self):
        assert main([]) == 1

    def test_non_numeric_cell_is_data_error(self, sample_files, capsys):
        frame = pd.read_csv(sample_files / "nps.csv", dtype=str)
        frame.loc[2, "x1"] = "abc"
        frame.to_csv(sample_files / "nps.csv", index=False)
        code = main(["weights", *_sample_args(sample_files), "--out", str(sample_files / "out")])
        assert code == 2
        err = capsys.readouterr().err
        assert "error=non_numeric_cell" in err
        assert "row 3" in err

    def test_missing_ps_weights(self, sample_files, capsys):
        code = main(
            ["weights", *_sample_args(sample_files), "--weight-column", "w", "--out", str(sample_files / "out")]
        )
        assert code == 2
        assert "missing design weights for ps" in capsys.readouterr().err

    def test_missing_facts_file_is_data_error(self, tmp_path, capsys):
        draws = tmp_path / "draws.csv"
        draws.write_text("a,sigma2,beta_1\n1,1,1\n", encoding="utf-8")
        code = main(
            ["predict", "--draws", str(draws), "--facts", str(tmp_path / "nope.json"), "--scenario", "E", "--out", str(tmp_path / "out")]
        )
        assert code == 2
        assert "population facts file not found" in capsys.readouterr().err

    def test_missing_calibration_totals_is_data_error(self, sample_files, capsys):
        args = ["weights", *_sample_args(sample_files), "--calibrate-totals", str(sample_files / "nope.json")]
        assert main([*args, "--out", str(sample_files / "out")]) == 2
        assert "error=schema" in capsys.readouterr().err

    def test_malformed_facts_file_is_data_error(self, sample_files):
        (sample_files / "facts.json").write_text('{"N_hat": -5, "xbar_hat": [], "columns": []}', encoding="utf-8")
        args = ["weights", *_sample_args(sample_files), "--calibrate-totals", str(sample_files / "facts.json")]
        assert main([*args, "--out", str(sample_files / "out")]) == 2


class TestCommands:
    def test_weights(self, sample_files, sample_pair):
        out = sample_files / "weights"
        assert main(["weights", *_sample_args(sample_files), "--out", str(out)]) == 0
        frame = pd.read_csv(out / "weights.csv")
        assert list(frame.columns) == ["row_id", "pi", "W1_raw", "W1_winsorized", "W1_calibrated"]
        assert frame.shape[0] == sample_pair[0].n
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert set(manifest["artifacts"]) == {"weights.csv", "facts.json", "propensity.json"}

    def test_fit_then_predict(self, sample_files):
        out = sample_files / "fit"
        args = ["fit", *_sample_args(sample_files), "--scenario", "C", "--draws", "300", "--grid-size", "100"]
        assert main([*args, "--out", str(out), "--seed", "4"]) == 0
        draws = pd.read_csv(out / "draws.csv")
        assert list(draws.columns) == ["a", "sigma2", "beta_1", "beta_2", "beta_3", "beta_4"]
        assert draws.shape[0] == 300

        predicted = sample_files / "predict"
        code = main(
            ["predict", "--draws", str(out / "draws.csv"), "--facts", str(out / "facts.json"), "--out", str(predicted)]
        )
        assert code == 0
        summary = json.loads((predicted / "summary.json").read_text(encoding="utf-8"))
        assert summary["scenario"] == "C"
        assert summary["summary"]["M"] == 300

    def test_fit_is_deterministic_across_threads(self, sample_files):
        args = ["fit", *_sample_args(sample_files), "--scenario", "D", "--draws", "300", "--grid-size", "100"]
        assert main([*args, "--out", str(sample_files / "one"), "--threads", "1"]) == 0
        assert main([*args, "--out", str(sample_files / "two"), "--threads", "3"]) == 0
        assert (sample_files / "one" / "draws.csv").read_bytes() == (sample_files / "two" / "draws.csv").read_bytes()

    def test_simulate_twice_is_byte_identical(self, tmp_path):
        args = [
            "simulate", "--rho-list", "0.5", "--replications", "2", "--seed", "7",
            "--N", "3000", "--n1", "300", "--n2", "80", "--draws", "200", "--grid-size", "50",
        ]
        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        assert main([*args, "--out", str(tmp_path / "b"), "--threads", "2"]) == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        metrics = pd.read_csv(tmp_path / "a" / "metrics.csv")
        assert list(metrics["scenario"]) == ["B", "C", "D", "E", "G"]

    def test_bootstrap(self, sample_files):
        out = sample_files / "boot"
        args = ["bootstrap", *_sample_args(sample_files), "--scenario", "E", "--draws", "200"]
        assert main([*args, "--replicates", "3", "--inner-draws", "40", "--out", str(out)]) == 0
        assert pd.read_csv(out / "replicates.csv").shape[0] == 3
        assert list(pd.read_csv(out / "comparison.csv")["method"]) == ["plain", "bootstrap"]
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert summary["method"] == "bootstrap"
        assert summary["summary"]["M"] == 120

    def test_fit_binary(self, sample_files):
        for name in ("nps.csv", "ps.csv"):
            frame = pd.read_csv(sample_files / name)
            frame["y"] = (frame["y"] > frame["y"].median()).astype(int)
            frame.to_csv(sample_files / name, index=False)
        out = sample_files / "binary"
        args = [
            "fit-binary", *_sample_args(sample_files), "--burnin", "20", "--draws", "100", "--thin", "1",
            "--grid-points", "41", "--fixed-population", "--out", str(out),
        ]
        assert main(args) == 0
        draws = pd.read_csv(out / "binary_draws.csv")
        assert list(draws.columns) == ["a", "beta_1", "beta_2", "beta_3", "beta_4"]
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert 0.0 < summary["summary"]["PM"] < 1.0
        assert summary["populations"] == 1

    def test_fit_binary_refreshes_populations(self, sample_files):
        for name in ("nps.csv", "ps.csv"):
            frame = pd.read_csv(sample_files / name)
            frame["y"] = (frame["y"] > frame["y"].median()).astype(int)
            frame.to_csv(sample_files / name, index=False)
        out = sample_files / "binary"
        args = [
            "fit-binary", *_sample_args(sample_files), "--burnin", "20", "--draws", "100", "--thin", "1",
            "--grid-points", "41", "--refresh-every", "25", "--out", str(out),
        ]
        assert main(args) == 0
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert summary["populations"] == 4
        assert pd.read_csv(out / "ybar_draws.csv").shape[0] == 100

    def test_nps_weight_column_skips_clw(self, sample_files):
        frame = pd.read_csv(sample_files / "nps.csv")
        frame["w1"] = 2.0 + (frame.index % 7)
        frame.to_csv(sample_files / "nps.csv", index=False)
        out = sample_files / "supplied"
        assert main(["weights", *_sample_args(sample_files), "--nps-weight", "w1", "--out", str(out)]) == 0
        propensity = json.loads((out / "propensity.json").read_text(encoding="utf-8"))
        assert propensity["method"] == "supplied"
        weights = pd.read_csv(out / "weights.csv")
        assert weights["W1_raw"].tolist() == frame["w1"].astype(float).tolist()

    def test_counts_flag_changes_integrated_fit(self, sample_files):
        args = ["fit", *_sample_args(sample_files), "--scenario", "D", "--draws", "200", "--grid-size", "100"]
        assert main([*args, "--out", str(sample_files / "eff")]) == 0
        assert main([*args, "--counts", "rows", "--out", str(sample_files / "rows")]) == 0
        manifest = json.loads((sample_files / "rows" / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["config"]["counts"] == "rows"
        eff = pd.read_csv(sample_files / "eff" / "draws.csv")
        rows = pd.read_csv(sample_files / "rows" / "draws.csv")
        assert not eff["sigma2"].equals(rows["sigma2"])

    def test_report_over_fit_runs(self, sample_files):
        runs = sample_files / "runs"
        for scenario in ("E", "B"):
            fit_dir = runs / f"fit_{scenario}"
            fit = ["fit", *_sample_args(sample_files), "--scenario", scenario, "--draws", "200"]
            assert main([*fit, "--out", str(fit_dir)]) == 0
            predict = ["predict", "--draws", str(fit_dir / "draws.csv"), "--facts", str(fit_dir / "facts.json")]
            assert main([*predict, "--out", str(runs / f"mean_{scenario}")]) == 0
        assert main(["report", "--runs", str(runs), "--out", str(sample_files / "report")]) == 0
        table = pd.read_csv(sample_files / "report" / "comparison.csv")
        assert list(table["Model"]) == ["B", "E"]


class TestConfigMerge:
    def test_config_file_fills_missing_flags(self, sample_files):
        config = sample_files / "run.env"
        config.write_text("scenario=E\ndraws=250\n", encoding="utf-8")
        out = sample_files / "cfg"
        assert main(["fit", *_sample_args(sample_files), "--config", str(config), "--out", str(out)]) == 0
        assert pd.read_csv(out / "draws.csv").shape[0] == 250

    def test_flags_override_config_file(self, sample_files):
        config = sample_files / "run.env"
        config.write_text("scenario=E\ndraws=250\n", encoding="utf-8")
        out = sample_files / "cfg"
        code = main(["fit", *_sample_args(sample_files), "--config", str(config), "--draws", "120", "--out", str(out)])
        assert code == 0
        assert pd.read_csv(out / "draws.csv").shape[0] == 120
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["config"]["draws"] == 120
        assert manifest["config"]["scenario"] == "E"

    def test_unknown_config_key(self, sample_files):
        config = sample_files / "bad.env"
        config.write_text("colour=blue\n", encoding="utf-8")
        assert main(["fit", *_sample_args(sample_files), "--config", str(config)]) == 1

    def test_subcommands_are_registered(self):
        parser = build_parser()
        args = parser.parse_args(["bootstrap", "--replicates", "10", "--mode", "dirichlet_weights"])
        assert (args.command, args.replicates, args.mode) == ("bootstrap", 10, "dirichlet_weights")
