"""Tests for the command-line interface: exit codes, JSON output, and the
artifacts each subcommand writes."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from softcascade.cli import main
from softcascade.config import load_service_config
from softcascade.datasets import DatasetManifest, ManifestEntry, save_manifest
from softcascade.evaluation import read_records_jsonl
from softcascade.service import create_app
from softcascade.training import load_checkpoint, make_toy_ensemble

from conftest import AMBIGUOUS_ID, CLASS_NAMES, CONFIDENT_ID, STORE_A


def run_cli(capsys, *argv) -> tuple[int, str, str]:
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestClassify:
    def test_high_confidence_sample_is_not_routed(self, service_env, capsys):
        code, out, _ = run_cli(capsys, "classify",
                               "--config", str(service_env(mode="no-arbiter")),
                               "--sample-id", CONFIDENT_ID)
        assert code == 0
        data = json.loads(out)
        assert data["routed"] is False
        assert data["final_label_index"] == 0
        assert data["final_label_name"] == CLASS_NAMES[0]

    def test_ambiguous_sample_arbitrates_in_mock_mode(self, service_env, capsys):
        code, out, _ = run_cli(capsys, "classify",
                               "--config", str(service_env(mode="mock")),
                               "--sample-id", AMBIGUOUS_ID)
        assert code == 0
        data = json.loads(out)
        assert data["routed"] is True
        assert data["fell_back"] is False
        # Without extracted attributes every candidate scores zero and the
        # overlap arbiter keeps the shortlist leader.
        assert data["final_label_index"] == data["candidates"][0]["index"]

    def test_mode_flag_overrides_config(self, service_env, capsys):
        code, out, _ = run_cli(capsys, "classify",
                               "--config", str(service_env(mode="mock")),
                               "--sample-id", AMBIGUOUS_ID,
                               "--mode", "no-arbiter")
        assert code == 0
        assert json.loads(out)["routed"] is False

    def test_missing_config_exits_2(self, tmp_path, capsys):
        code, out, err = run_cli(capsys, "classify",
                                 "--config", str(tmp_path / "absent.yaml"),
                                 "--sample-id", "x")
        assert code == 2
        assert out == ""
        assert "cannot read config" in err

    def test_unknown_sample_exits_3(self, service_env, capsys):
        code, _, err = run_cli(capsys, "classify",
                               "--config", str(service_env()),
                               "--sample-id", "never-seen")
        assert code == 3
        assert "never-seen" in err

    def test_matches_service_response(self, service_env, capsys):
        # CLI and HTTP service share one pipeline path, so everything but
        # the wall-clock latencies must match exactly.
        config_path = service_env(mode="mock")
        code, out, _ = run_cli(capsys, "classify",
                               "--config", str(config_path),
                               "--sample-id", AMBIGUOUS_ID)
        assert code == 0
        from_cli = json.loads(out)
        client = TestClient(create_app(load_service_config(config_path)))
        from_http = client.post("/classify",
                                json={"sample_id": AMBIGUOUS_ID}).json()
        from_cli.pop("latencies_ms")
        from_http.pop("latencies_ms")
        assert from_cli == from_http


class TestEvaluate:
    def write_manifest(self, tmp_path):
        entries = [ManifestEntry(CONFIDENT_ID, 0, "test"),
                   ManifestEntry(AMBIGUOUS_ID, 1, "test")]
        manifest = DatasetManifest(class_names=CLASS_NAMES, entries=entries)
        path = tmp_path / "manifest.json"
        save_manifest(path, manifest)
        return path

    def test_writes_records_and_metrics(self, service_env, tmp_path, capsys):
        manifest = self.write_manifest(tmp_path)
        out_dir = tmp_path / "eval"
        code, out, _ = run_cli(capsys, "evaluate",
                               "--config", str(service_env(mode="mock")),
                               "--manifest", str(manifest),
                               "--split", "test",
                               "--out", str(out_dir))
        assert code == 0
        assert "Top-1 accuracy" in out
        records = read_records_jsonl(out_dir / "records.jsonl")
        assert [r.sample_id for r in records] == sorted(
            [CONFIDENT_ID, AMBIGUOUS_ID])
        report = json.loads((out_dir / "metrics.json").read_text())
        assert report["n_records"] == 2
        assert report["trigger_rate"] == pytest.approx(0.5)

    def test_empty_split_exits_2(self, service_env, tmp_path, capsys):
        manifest = self.write_manifest(tmp_path)
        code, _, err = run_cli(capsys, "evaluate",
                               "--config", str(service_env()),
                               "--manifest", str(manifest),
                               "--split", "val",
                               "--out", str(tmp_path / "eval"))
        assert code == 2
        assert "no samples" in err


class TestSweep:
    def records_path(self, service_env, tmp_path, capsys):
        manifest_path = tmp_path / "manifest.json"
        entries = [ManifestEntry(CONFIDENT_ID, 0, "test"),
                   ManifestEntry(AMBIGUOUS_ID, 1, "test")]
        save_manifest(manifest_path,
                      DatasetManifest(class_names=CLASS_NAMES, entries=entries))
        out_dir = tmp_path / "eval"
        assert run_cli(capsys, "evaluate",
                       "--config", str(service_env()),
                       "--manifest", str(manifest_path),
                       "--split", "test", "--out", str(out_dir))[0] == 0
        return out_dir / "records.jsonl"

    def test_writes_csv_and_operating_point(self, service_env, tmp_path, capsys):
        records = self.records_path(service_env, tmp_path, capsys)
        csv_path = tmp_path / "sweep.csv"
        code, out, _ = run_cli(capsys, "sweep",
                               "--records", str(records),
                               "--out", str(csv_path),
                               "--tau-conf", "0.2,0.5,0.8",
                               "--tau-gap", "0.1")
        assert code == 0
        assert "operating point:" in out
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "tau_conf,tau_gap,trigger_rate,top1"
        assert len(lines) == 4

    def test_fixed_accuracy_model_accepted(self, service_env, tmp_path, capsys):
        records = self.records_path(service_env, tmp_path, capsys)
        code, _, _ = run_cli(capsys, "sweep",
                             "--records", str(records),
                             "--out", str(tmp_path / "sweep.csv"),
                             "--arbiter-model", "fixed:0.75",
                             "--seed", "7")
        assert code == 0

    def test_bad_arbiter_model_exits_2(self, service_env, tmp_path, capsys):
        records = self.records_path(service_env, tmp_path, capsys)
        code, _, err = run_cli(capsys, "sweep",
                               "--records", str(records),
                               "--out", str(tmp_path / "sweep.csv"),
                               "--arbiter-model", "clairvoyant")
        assert code == 2
        assert "arbiter model" in err


class TestTrainToy:
    def test_zero_epochs_leaves_checkpoint_untouched(self, tmp_path, capsys):
        out_dir = tmp_path / "run"
        code, out, _ = run_cli(capsys, "train-toy",
                               "--out", str(out_dir),
                               "--epochs", "0", "--seed", "42")
        assert code == 0
        assert "trained 0 epochs" in out
        params, header = load_checkpoint(out_dir / "checkpoint.bin")
        fresh = make_toy_ensemble(seed=42)
        assert header["model_ids"] == [bb.model_id for bb in fresh]
        for bb in fresh:
            for group, arr in bb.param_groups().items():
                np.testing.assert_array_equal(params[f"{bb.model_id}/{group}"],
                                              arr)

    def test_short_run_writes_curves(self, tmp_path, capsys):
        out_dir = tmp_path / "run"
        code, out, _ = run_cli(capsys, "train-toy",
                               "--out", str(out_dir),
                               "--epochs", "2", "--seed", "1")
        assert code == 0
        curves = (out_dir / "curves.csv").read_text().strip().splitlines()
        assert curves[0].startswith("epoch,")
        assert len(curves) == 3
        assert (out_dir / "checkpoint.bin").exists()


class TestStats:
    def write_manifest(self, tmp_path):
        entries = [ManifestEntry(f"s{i}", 0, "train") for i in range(4)]
        entries += [ManifestEntry("odd", 1, "val")]
        manifest = DatasetManifest(class_names=["common", "rare"],
                                   entries=entries)
        path = tmp_path / "manifest.json"
        save_manifest(path, manifest)
        return path

    def test_table_output(self, tmp_path, capsys):
        code, out, _ = run_cli(capsys, "stats",
                               "--manifest", str(self.write_manifest(tmp_path)))
        assert code == 0
        assert "samples          5" in out
        assert "largest class    common (4)" in out
        assert "imbalance        4.00:1" in out

    def test_json_output(self, tmp_path, capsys):
        code, out, _ = run_cli(capsys, "stats",
                               "--manifest", str(self.write_manifest(tmp_path)),
                               "--json")
        assert code == 0
        blob = json.loads(out)
        assert blob["total_samples"] == 5
        assert blob["imbalance_ratio"] == pytest.approx(4.0)
        assert blob["cumulative_share"] == pytest.approx([0.8, 1.0])

    def test_scan_mode(self, tmp_path, capsys):
        for cls, n in [("alpha", 2), ("beta", 1)]:
            d = tmp_path / "train" / cls
            d.mkdir(parents=True)
            for i in range(n):
                (d / f"{i}.png").write_bytes(b"x")
        code, out, _ = run_cli(capsys, "stats", "--scan", str(tmp_path))
        assert code == 0
        assert "classes          2" in out

    def test_requires_exactly_one_source(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "stats")
        assert code == 2
        assert "exactly one" in err
        code, _, err = run_cli(capsys, "stats",
                               "--manifest", "m.json", "--scan", "root")
        assert code == 2


class TestParsing:
    def test_unknown_subcommand_raises_system_exit(self, capsys):
        with pytest.raises(SystemExit):
            main(["transmogrify"])

    def test_bad_feature_list_exits_2(self, service_env, capsys):
        code, _, err = run_cli(capsys, "classify",
                               "--config", str(service_env()),
                               "--sample-id", CONFIDENT_ID,
                               "--features", "1.0,two,3")
        assert code == 2
        assert "comma-separated numbers" in err
