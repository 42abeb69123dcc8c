from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from ascend.cli import main
from ascend.service import create_app


@pytest.fixture()
def runner():
    return CliRunner()


SMALL_CONFIG = {
    "name": "cli-test",
    "space": {
        "elements": [
            {"name": "headline", "values": ["a", "b", "c"]},
            {"name": "button", "values": ["x", "y", "z"]},
        ]
    },
    "evolution": {
        "population_size": 4,
        "maturity_age": 200,
        "max_generations": 3,
        "rng_seed": 42,
    },
    "scenario": {
        "model": {
            "base_rate": 0.05,
            "main_effects": [
                {"element": 0, "value": 1, "delta": 0.3},
                {"element": 1, "value": 2, "delta": 0.2},
            ],
        },
        "budget": 8000,
        "users_per_day": 2000,
        "seed": 42,
    },
}


def write_config(tmp_path: Path) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG), encoding="utf-8")
    return path


class TestInit:
    def test_writes_template(self, runner, tmp_path):
        path = tmp_path / "new.json"
        result = runner.invoke(main, ["init", str(path)])
        assert result.exit_code == 0
        doc = json.loads(path.read_text(encoding="utf-8"))
        assert doc["space"]["elements"]
        assert "scenario" in doc

    def test_refuses_overwrite(self, runner, tmp_path):
        path = tmp_path / "existing.json"
        path.write_text("{}", encoding="utf-8")
        result = runner.invoke(main, ["init", str(path)])
        assert result.exit_code == 1
        assert "refusing" in result.output

    def test_template_is_simulatable(self, runner, tmp_path):
        config = tmp_path / "t.json"
        assert runner.invoke(main, ["init", str(config)]).exit_code == 0
        result = runner.invoke(
            main, ["oracle", str(config)]
        )
        assert result.exit_code == 0
        assert "optimum genome" in result.output


class TestSimulate:
    def test_writes_artifacts(self, runner, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        result = runner.invoke(
            main, ["simulate", str(config), "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        for name in ("events.jsonl", "daily.csv", "generations.csv",
                     "report.json"):
            assert (out / name).exists()
        report = json.loads((out / "report.json").read_text())
        assert report["status"] == "stopped"
        assert report["simulation"]["stop_reason"] in {
            "generations", "budget"
        }
        assert report["simulation"]["oracle_optimum"]["true_rate"] > 0.05

    def test_daily_csv_header(self, runner, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        runner.invoke(main, ["simulate", str(config), "--out", str(out)])
        header = (out / "daily.csv").read_text().splitlines()[0]
        assert header == (
            "day,best_rate,best_ci_low,best_ci_high,population_mean_rate,"
            "control_rate,control_ci_low,control_ci_high"
        )

    def test_same_seed_byte_identical(self, runner, tmp_path):
        config = write_config(tmp_path)
        outputs = []
        for name in ("run-a", "run-b"):
            out = tmp_path / name
            result = runner.invoke(
                main,
                ["simulate", str(config), "--seed", "7", "--out", str(out)],
            )
            assert result.exit_code == 0, result.output
            outputs.append(out)
        for artifact in ("events.jsonl", "daily.csv", "generations.csv",
                         "report.json"):
            assert (outputs[0] / artifact).read_bytes() == (
                outputs[1] / artifact
            ).read_bytes()

    def test_different_seed_differs(self, runner, tmp_path):
        config = write_config(tmp_path)
        logs = []
        for seed in ("7", "8"):
            out = tmp_path / f"seed-{seed}"
            runner.invoke(
                main,
                ["simulate", str(config), "--seed", seed, "--out", str(out)],
            )
            logs.append((out / "events.jsonl").read_bytes())
        assert logs[0] != logs[1]

    def test_missing_config_is_validation_error(self, runner, tmp_path):
        result = runner.invoke(
            main, ["simulate", str(tmp_path / "nope.json")]
        )
        assert result.exit_code == 1

    def test_no_args_is_validation_error(self, runner):
        result = runner.invoke(main, ["simulate"])
        assert result.exit_code == 1
        assert "--case-study" in result.output

    def test_invalid_json_is_validation_error(self, runner, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        result = runner.invoke(main, ["simulate", str(path)])
        assert result.exit_code == 1


class TestOracle:
    def test_prints_optimum(self, runner, tmp_path):
        config = write_config(tmp_path)
        result = runner.invoke(main, ["oracle", str(config)])
        assert result.exit_code == 0
        assert "optimum genome: [1, 2]" in result.output
        assert "improvement over control" in result.output

    def test_case_study_oracle(self, runner):
        result = runner.invoke(main, ["oracle", "--case-study"])
        assert result.exit_code == 0
        assert "optimum genome: [3, 2, 1, 2, 1, 4, 1, 2, 0]" in result.output
        assert "true rate: 0.0822" in result.output
        assert "control rate: 0.0561" in result.output


class TestReport:
    def make_data_dir(self, tmp_path: Path) -> Path:
        data_dir = tmp_path / "data"
        doc = {
            "name": "report-test",
            "experiment_id": "exp1",
            "space": SMALL_CONFIG["space"],
            "evolution": {"population_size": 3, "maturity_age": 5},
        }
        with TestClient(create_app(data_dir)) as client:
            assert client.post("/experiments", json=doc).status_code == 201
            client.post("/experiments/exp1/start")
            for i in range(60):
                client.post(
                    "/experiments/exp1/assign", json={"user_id": f"u{i}"}
                )
                if i % 4 == 0:
                    client.post(
                        "/experiments/exp1/convert",
                        json={"user_id": f"u{i}"},
                    )
        return data_dir

    def test_json_report_matches_service_shape(self, runner, tmp_path):
        data_dir = self.make_data_dir(tmp_path)
        result = runner.invoke(main, ["report", str(data_dir), "exp1"])
        assert result.exit_code == 0, result.output
        doc = json.loads(result.output)
        assert doc["experiment"] == "report-test"
        assert doc["top_candidates"]

    def test_csv_report(self, runner, tmp_path):
        data_dir = self.make_data_dir(tmp_path)
        result = runner.invoke(
            main, ["report", str(data_dir), "exp1", "--csv"]
        )
        assert result.exit_code == 0
        lines = result.output.strip().splitlines()
        assert lines[0] == (
            "candidate_id,genome,impressions,conversions,rate,ci_low,"
            "ci_high,improvement_pct,significant_95"
        )
        assert len(lines) > 1

    def test_unknown_experiment(self, runner, tmp_path):
        (tmp_path / "data").mkdir()
        result = runner.invoke(
            main, ["report", str(tmp_path / "data"), "ghost"]
        )
        assert result.exit_code == 1


class TestServe:
    def test_help_mentions_env_vars(self, runner):
        result = runner.invoke(main, ["serve", "--help"])
        assert result.exit_code == 0
        assert "ASCEND_PORT" in result.output or "--port" in result.output
