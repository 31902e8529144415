import json

import pytest
from click.testing import CliRunner

from debiaslab.cli import main


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, runner):
    """A dataset, split and trained model shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    result = runner.invoke(
        main,
        ["synth", "--n", "60", "--size", "32", "--seed", "5",
         "--rho", "ruler=0.5", "--marginal", "ruler=0.5", "--out", str(data)],
    )
    assert result.exit_code == 0, result.output

    split_dir = root / "split"
    result = runner.invoke(
        main,
        ["split", "--manifest", str(data / "manifest.csv"), "--factor", "1.0",
         "--seed", "3", "--out", str(split_dir)],
    )
    assert result.exit_code == 0, result.output

    train_dir = root / "train"
    config = root / "train_config.json"
    config.write_text(json.dumps(
        {"max_epochs": 1, "batch_size": 16, "val_fraction": 0.25, "augment": False}
    ))
    result = runner.invoke(
        main,
        ["train", "--manifest", str(data / "manifest.csv"),
         "--split", str(split_dir / "split.json"), "--config", str(config),
         "--out", str(train_dir)],
    )
    assert result.exit_code == 0, result.output
    return root, data, split_dir, train_dir


def _manifest_of(out_dir):
    return json.loads((out_dir / "run_manifest.json").read_text())


class TestSynth:
    def test_outputs_and_run_manifest(self, workspace):
        _, data, _, _ = workspace
        assert (data / "manifest.csv").exists()
        run = _manifest_of(data)
        assert run["status"] == "ok"
        assert run["command"] == "synth"
        assert run["version"]
        assert str(data / "manifest.csv") in run["outputs"]

    def test_validation_error_exits_one(self, runner, tmp_path):
        out = tmp_path / "bad"
        result = runner.invoke(main, ["synth", "--n", "-5", "--out", str(out)])
        assert result.exit_code == 1
        assert _manifest_of(out)["status"] == "validation-error"

    def test_flag_overrides_config_file(self, runner, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_samples": 500, "image_size": 32}))
        out = tmp_path / "out"
        result = runner.invoke(
            main, ["synth", "--config", str(cfg), "--n", "10", "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        assert _manifest_of(out)["config"]["n_samples"] == 10


class TestAudit:
    def test_audit_whole_manifest(self, workspace, runner, tmp_path):
        _, data, _, _ = workspace
        out = tmp_path / "audit"
        result = runner.invoke(
            main, ["audit", "--manifest", str(data / "manifest.csv"), "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        assert (out / "correlations.csv").exists()
        assert (out / "correlations.png").exists()

    def test_audit_with_split(self, workspace, runner, tmp_path):
        _, data, split_dir, _ = workspace
        out = tmp_path / "audit2"
        result = runner.invoke(
            main,
            ["audit", "--manifest", str(data / "manifest.csv"),
             "--split", str(split_dir / "split.json"), "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        text = (out / "correlations.csv").read_text()
        assert "train" in text and "test" in text


class TestSplitCommand:
    def test_split_json_written(self, workspace):
        _, _, split_dir, _ = workspace
        payload = json.loads((split_dir / "split.json").read_text())
        assert payload["factor"] == 1.0
        assert payload["train_ids"] and payload["test_ids"]

    def test_invalid_factor_exits_one(self, workspace, runner, tmp_path):
        _, data, _, _ = workspace
        out = tmp_path / "bad"
        result = runner.invoke(
            main,
            ["split", "--manifest", str(data / "manifest.csv"), "--factor", "2.0",
             "--out", str(out)],
        )
        assert result.exit_code == 1


class TestEnvs:
    def test_environments_json(self, workspace, runner, tmp_path):
        _, data, split_dir, _ = workspace
        out = tmp_path / "envs"
        result = runner.invoke(
            main,
            ["envs", "--manifest", str(data / "manifest.csv"),
             "--split", str(split_dir / "split.json"), "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads((out / "environments.json").read_text())
        split = json.loads((split_dir / "split.json").read_text())
        assert sum(v["size"] for v in payload.values()) == len(split["train_ids"])


class TestTrainCommand:
    def test_artifacts_written(self, workspace):
        _, _, _, train_dir = workspace
        assert (train_dir / "model.bin").exists()
        assert (train_dir / "metrics.jsonl").exists()
        run = _manifest_of(train_dir)
        assert run["status"] == "ok"
        assert run["inputs"]  # manifest and split hashed


class TestNoiseCropCommand:
    def test_censored_dataset(self, workspace, runner, tmp_path):
        _, data, _, _ = workspace
        out = tmp_path / "nc"
        result = runner.invoke(
            main,
            ["noisecrop", "--manifest", str(data / "manifest.csv"), "--size", "32",
             "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert (out / "manifest.csv").exists()
        assert "censored 60 images" in result.output


class TestEvalCommand:
    def test_eval_report(self, workspace, runner, tmp_path):
        _, data, _, train_dir = workspace
        out = tmp_path / "eval"
        result = runner.invoke(
            main,
            ["eval", "--model", str(train_dir / "model.bin"),
             "--manifest", str(data / "manifest.csv"), "--replicas", "1",
             "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads((out / "eval_report.json").read_text())
        assert 0.0 <= payload["auc"] <= 1.0
        assert payload["tta_replicas"] == 1


class TestSaliencyCommand:
    def test_overlay_written(self, workspace, runner, tmp_path):
        _, data, _, train_dir = workspace
        out = tmp_path / "sal"
        result = runner.invoke(
            main,
            ["saliency", "--model", str(train_dir / "model.bin"),
             "--manifest", str(data / "manifest.csv"), "--ids", "s00000,s00001",
             "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert (out / "saliency.png").stat().st_size > 0


class TestSweepCommand:
    def test_tiny_sweep(self, workspace, runner, tmp_path):
        _, data, _, _ = workspace
        cfg = tmp_path / "sweep.json"
        cfg.write_text(json.dumps({
            "factors": [0.0], "methods": ["erm"], "n_seeds": 1,
            "tta_replicas": 1, "tta_augment": False,
            "train_configs": {"erm": {"max_epochs": 1, "batch_size": 16,
                                      "val_fraction": 0.25, "augment": False}},
        }))
        out = tmp_path / "sweep"
        result = runner.invoke(
            main,
            ["sweep", "--manifest", str(data / "manifest.csv"), "--config", str(cfg),
             "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert (out / "sweep_result.json").exists()
        assert (out / "report" / "sweep.png").exists()
        assert (out / "report" / "sweep.csv").exists()


class TestReportCommand:
    def test_report_from_split(self, workspace, runner, tmp_path):
        _, _, split_dir, _ = workspace
        out = tmp_path / "report"
        result = runner.invoke(
            main, ["report", "--split", str(split_dir / "split.json"), "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        assert (out / "correlations.png").exists()

    def test_no_inputs_is_validation_error(self, runner, tmp_path):
        out = tmp_path / "r"
        result = runner.invoke(main, ["report", "--out", str(out)])
        assert result.exit_code == 1
