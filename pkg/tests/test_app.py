import json
import os

import pandas as pd
import pytest

import app
import fedrg.federation as federation_module
from fedrg.errors import LearnerError
from tests.manifests import small_payload, write_payload


@pytest.fixture
def settings_file(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDRG_OUTPUT_DIR", raising=False)
    return str(tmp_path / "config.yaml")


def manifest_file(tmp_path, name="run.json", **sections):
    sections.setdefault("output_dir", str(tmp_path / "out"))
    return write_payload(tmp_path / name, small_payload(**sections))


def cli(settings_file, *args):
    return app.main(["--config", settings_file, *args])


class TestValidate:
    """Manifest checking without running."""

    def test_prints_resolved_manifest(self, tmp_path, settings_file, capsys):
        path = manifest_file(tmp_path)
        assert cli(settings_file, "validate", path) == app.EXIT_OK
        resolved = json.loads(capsys.readouterr().out)
        assert resolved["data"]["num_clients"] == 4
        assert resolved["rounds"]["detector"] == "geometry"

    def test_invalid_manifest_exit_code(self, tmp_path, settings_file, capsys):
        path = manifest_file(tmp_path, noise={"flavor": "pairflip", "rate": 0.6})
        assert cli(settings_file, "validate", path) == app.EXIT_INVALID
        assert "noise.rate" in capsys.readouterr().err

    def test_unknown_field_exit_code(self, tmp_path, settings_file):
        path = manifest_file(tmp_path, rounds={"bogus": 1})
        assert cli(settings_file, "validate", path) == app.EXIT_INVALID

    def test_missing_manifest(self, tmp_path, settings_file):
        assert cli(settings_file, "validate", str(tmp_path / "absent.json")) == app.EXIT_INVALID

    def test_settings_file_created(self, tmp_path, settings_file):
        cli(settings_file, "validate", manifest_file(tmp_path))
        assert os.path.exists(settings_file)


class TestRun:
    """Single experiment runs."""

    def test_zero_rounds_writes_one_row(self, tmp_path, settings_file):
        path = manifest_file(tmp_path, rounds={"total_rounds": 0, "stage1_rounds": 0})
        assert cli(settings_file, "run", path) == app.EXIT_OK
        out = tmp_path / "out"
        metrics = pd.read_csv(out / "metrics.csv")
        assert len(metrics) == 1
        assert metrics["round"].tolist() == [0]
        for name in ("summary.json", "shards.csv", "manifest.resolved.json"):
            assert (out / name).exists()
        assert len(os.listdir(out / "kernels")) == 4
        assert len(os.listdir(out / "corruption")) == 4

    def test_run_directory_contents(self, tmp_path, settings_file):
        path = manifest_file(tmp_path, rounds={"total_rounds": 2, "stage1_rounds": 1, "checkpoint_every": 2})
        assert cli(settings_file, "run", path) == app.EXIT_OK
        out = tmp_path / "out"
        partitions = sorted(os.listdir(out / "partitions"))
        assert partitions and all(name.startswith("round_002_") for name in partitions)
        frame = pd.read_csv(out / "partitions" / partitions[0])
        assert list(frame.columns) == ["sample_id", "p_clean", "is_clean_pred", "is_clean_true"]
        assert os.listdir(out / "absorption")
        checkpoint = json.loads((out / "checkpoints" / "round_002.json").read_text())
        assert checkpoint["round"] == 2
        assert set(checkpoint["clients"]) == {"0", "1", "2", "3"}
        summary = json.loads((out / "summary.json").read_text())
        assert summary["rounds"] == 2

    def test_identical_bytes_across_runs(self, tmp_path, settings_file):
        first = manifest_file(tmp_path, "a.json", output_dir=str(tmp_path / "a"), rounds={"total_rounds": 3})
        second = manifest_file(tmp_path, "b.json", output_dir=str(tmp_path / "b"), rounds={"total_rounds": 3})
        assert cli(settings_file, "run", first) == app.EXIT_OK
        assert cli(settings_file, "run", second) == app.EXIT_OK
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_output_dir_from_environment(self, tmp_path, settings_file, monkeypatch):
        target = tmp_path / "from_env"
        monkeypatch.setenv("FEDRG_OUTPUT_DIR", str(target))
        path = manifest_file(tmp_path, rounds={"total_rounds": 0, "stage1_rounds": 0})
        assert cli(settings_file, "run", path) == app.EXIT_OK
        assert (target / "metrics.csv").exists()
        assert not (tmp_path / "out").exists()

    def test_runtime_failure_exit_code(self, tmp_path, settings_file, monkeypatch):
        def fail(*args, **kwargs):
            raise LearnerError("non-finite gradient")

        monkeypatch.setattr(app, "execute_run", fail)
        assert cli(settings_file, "run", manifest_file(tmp_path)) == app.EXIT_RUNTIME

    def test_failed_run_keeps_finished_rounds(self, tmp_path, settings_file, monkeypatch):
        def fail(*args, **kwargs):
            raise LearnerError("non-finite gradient")

        monkeypatch.setattr(federation_module, "stage2_client_round", fail)
        path = manifest_file(tmp_path, rounds={"total_rounds": 4, "stage1_rounds": 2})
        assert cli(settings_file, "run", path) == app.EXIT_RUNTIME
        metrics = pd.read_csv(tmp_path / "out" / "metrics.csv")
        assert metrics["round"].tolist() == [0, 1, 2]
        assert metrics["stage"].tolist() == ["init", "stage1", "stage1"]
        assert not (tmp_path / "out" / "summary.json").exists()


class TestAblateAndSweep:
    """Multi-run commands."""

    def test_ablate_writes_comparison(self, tmp_path, settings_file):
        path = manifest_file(tmp_path, rounds={"total_rounds": 2, "stage1_rounds": 1})
        assert cli(settings_file, "ablate", path, "--variant", "no_absorption") == app.EXIT_OK
        out = tmp_path / "out"
        assert (out / "base" / "metrics.csv").exists()
        assert (out / "no_absorption" / "metrics.csv").exists()
        comparison = pd.read_csv(out / "comparison.csv")
        assert len(comparison) == 3
        assert set(comparison["variant"]) == {"no_absorption"}
        resolved = json.loads((out / "no_absorption" / "manifest.resolved.json").read_text())
        assert resolved["loss"]["lambda_n"] == 0.0

    def test_unknown_variant_rejected_by_parser(self, tmp_path, settings_file):
        with pytest.raises(SystemExit):
            cli(settings_file, "ablate", manifest_file(tmp_path), "--variant", "nothing")

    def test_sweep_writes_one_row_per_value(self, tmp_path, settings_file):
        path = manifest_file(tmp_path, rounds={"total_rounds": 1, "stage1_rounds": 0})
        assert cli(settings_file, "sweep", path, "--param", "rounds.num_clusters", "--values", "2", "3") == app.EXIT_OK
        sweep = pd.read_csv(tmp_path / "out" / "sweep.csv")
        assert sweep["value"].tolist() == [2, 3]
        assert (tmp_path / "out" / "rounds.num_clusters=2" / "metrics.csv").exists()

    def test_sweep_with_invalid_value(self, tmp_path, settings_file):
        path = manifest_file(tmp_path, rounds={"total_rounds": 1, "stage1_rounds": 0})
        assert cli(settings_file, "sweep", path, "--param", "noise.rate", "--values", "1.5") == app.EXIT_INVALID
