import json
import math
import shutil

import numpy as np
import pytest
import yaml

from compcil import cli
from compcil.buffer import read_manifest
from compcil.experiments import (INCOMPLETE_MARKER, RunConfig, StageFailure, aggregate_metrics, apply_overrides,
                                 domain_shift_report, emit_report, recompute_accuracies, run_pipeline)
from compcil.tasks import ConfigurationError

TINY = {
    "dataset": {"name": "synthetic", "num_classes": 4, "train_per_class": 16, "test_per_class": 6, "size": 16},
    "protocol": {"kind": "LFS", "num_tasks": 2, "shuffle_seed": 1993},
    "budget": {"reference_images": 8},
    "method": "icarl",
    "train": {"epochs_initial": 1, "epochs_incremental": 1, "milestones": [], "backbone": "resnet8",
              "width": 4, "batch_size": 16},
    "seed": 3,
}


def tiny(tmp_path, **kw):
    return RunConfig.from_dict({**TINY, "output_dir": str(tmp_path / "run"), **kw})


class TestAggregate:
    def test_avg_and_last(self):
        assert aggregate_metrics([0.9, 0.7, 0.5]) == (pytest.approx(0.7), 0.5)

    def test_single_step(self):
        assert aggregate_metrics([0.42]) == (0.42, 0.42)

    def test_avg_at_least_last_when_decreasing(self):
        accs = np.linspace(0.9, 0.5, 10)
        avg, last = aggregate_metrics(accs)
        assert avg >= last

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_metrics([])


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="unknown config keys"):
            RunConfig.from_dict({"datset": {}})

    def test_overrides_parse_yaml_scalars(self):
        d = apply_overrides({"train": {"lr": 0.1}}, ["train.lr=0.01", "protocol.num_tasks=5", "method=wa"])
        assert d == {"train": {"lr": 0.01}, "protocol": {"num_tasks": 5}, "method": "wa"}

    def test_bad_override(self):
        with pytest.raises(ConfigurationError):
            apply_overrides({}, ["noequals"])

    @pytest.mark.parametrize("bad", [{"method": "podnet"}, {"preprocess": "both"},
                                     {"protocol": {"kind": "LFS", "num_tasks": 0}},
                                     {"codecs": [{"method": "jpeg", "qualities": []}]},
                                     {"codec": {"method": "jpeg", "quality": 900}},
                                     {"budget": {}}, {"dataset": {"name": "cifar100"}}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            RunConfig.from_dict({**TINY, **bad})

    def test_yaml_round_trip(self, tmp_path):
        cfg = tiny(tmp_path, codec={"method": "jpeg", "quality": 40})
        cfg.save(tmp_path / "c.yaml")
        assert RunConfig.load(tmp_path / "c.yaml").to_dict() == cfg.to_dict()


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipeline")
    cfg = RunConfig.from_dict({**TINY, "output_dir": str(tmp / "run"), "codec": {"method": "jpeg", "quality": 30}})
    record = run_pipeline(cfg)
    return cfg, record, tmp / "run"


class TestPipeline:
    def test_artifacts(self, finished_run):
        _, record, out = finished_run
        assert record.complete and len(record.accuracies) == 2
        assert not (out / INCOMPLETE_MARKER).exists()
        for name in ("config.yaml", "summary.json", "metrics.jsonl", "buffer_manifest.csv", "report.json",
                     "metrics.csv", "summary.md", "accuracy.png", "run.json"):
            assert (out / name).exists(), name
        assert math.isnan(record.old_accuracies[0])

    def test_budget_audit_from_manifest(self, finished_run):
        _, record, out = finished_run
        rows = read_manifest(out / "buffer_manifest.csv")
        for step in (0, 1):
            assert sum(r["bits"] for r in rows if r["step"] == step) <= record.budget_bits
        summary = json.loads((out / "summary.json").read_text())
        assert summary["provenance"]["capacity"] > 8

    def test_report_reproduces_accuracies(self, finished_run):
        _, record, out = finished_run
        rec = recompute_accuracies(out)
        for step, acc in enumerate(record.accuracies):
            assert abs(rec[step]["accuracy"] - acc) < 1e-6
        report = json.loads((out / "report.json").read_text())
        assert abs(report["average"] - record.average) < 1e-6
        assert report["complete"]

    def test_partial_run_marks_missing(self, finished_run, tmp_path):
        _, _, out = finished_run
        part = tmp_path / "partial"
        shutil.copytree(out, part)
        (part / "predictions" / "step_1.npz").unlink()
        emit_report(part)
        report = json.loads((part / "report.json").read_text())
        assert report["missing_steps"] == [1] and not report["complete"]
        assert "missing" in (part / "summary.md").read_text()

    def test_resume_skips_finished_steps(self, finished_run, tmp_path):
        cfg, record, out = finished_run
        copy = tmp_path / "resumed"
        shutil.copytree(out, copy)
        again = run_pipeline(RunConfig.from_dict({**cfg.to_dict(), "output_dir": str(copy)}))
        assert again.accuracies == record.accuracies

    def test_resume_after_interruption(self, finished_run, tmp_path):
        cfg, record, out = finished_run
        copy = tmp_path / "interrupted"
        shutil.copytree(out, copy)
        lines = (copy / "metrics.jsonl").read_text().splitlines()
        (copy / "metrics.jsonl").write_text(lines[0] + "\n")
        (copy / "checkpoints" / "step_1.pt").unlink()
        again = run_pipeline(RunConfig.from_dict({**cfg.to_dict(), "output_dir": str(copy)}))
        assert again.accuracies[0] == record.accuracies[0]
        assert abs(again.accuracies[1] - record.accuracies[1]) < 1e-6

    def test_rerun_is_deterministic(self, finished_run, tmp_path):
        cfg, record, _ = finished_run
        again = run_pipeline(RunConfig.from_dict({**cfg.to_dict(), "output_dir": str(tmp_path / "b")}))
        assert again.accuracies == record.accuracies
        assert again.provenance["class_order"] == record.provenance["class_order"]

    def test_identity_codec_keeps_reference_count(self, tmp_path):
        rec = run_pipeline(tiny(tmp_path, codec={"method": "raw"}))
        assert rec.provenance["capacity"] == 8 and max(rec.buffer_sizes) == 8

    def test_single_task(self, tmp_path):
        rec = run_pipeline(tiny(tmp_path, protocol={"kind": "LFS", "num_tasks": 1}))
        assert rec.average == rec.last

    def test_failure_leaves_marker(self, tmp_path):
        cfg = tiny(tmp_path, budget={"reference_images": 1}, codec={"method": "raw"})
        with pytest.raises(StageFailure, match="stage train"):
            run_pipeline(cfg)
        assert "failed at stage train" in (tmp_path / "run" / INCOMPLETE_MARKER).read_text()


def test_pipeline_with_selection(tmp_path):
    cfg = tiny(tmp_path, codecs=[{"method": "jpeg", "qualities": [10, 60]}, {"method": "webp", "qualities": [30]}],
               probe={"fmse_samples": 8})
    rec = run_pipeline(cfg)
    sel = tmp_path / "run" / "selection"
    for name in ("probe.csv", "forgetting.png", "codec_scores.csv", "selected_codec.json"):
        assert (sel / name).exists()
    chosen = json.loads((sel / "selected_codec.json").read_text())
    assert rec.provenance["codec"] == chosen
    assert set(rec.provenance["rate_choice"]) == {"jpeg", "webp"}


class TestDomainShift:
    def test_identity_codec_curves_match(self, tmp_path):
        base = {**TINY, "codec": {"method": "raw"}, "output_dir": str(tmp_path)}
        report = domain_shift_report(RunConfig.from_dict({**base, "preprocess": "matched"}),
                                     RunConfig.from_dict({**base, "preprocess": "mismatched"}), tmp_path / "ds")
        assert report["matched_accuracy"] == report["mismatched_accuracy"]
        assert (tmp_path / "ds" / "domain_shift.png").exists()

    def test_configs_must_differ_only_in_flag(self, tmp_path):
        a = tiny(tmp_path, codec={"method": "jpeg", "quality": 10})
        b = tiny(tmp_path, codec={"method": "jpeg", "quality": 10}, preprocess="mismatched", method="wa")
        with pytest.raises(ConfigurationError, match="method"):
            domain_shift_report(a, b)


class TestCli:
    def write(self, tmp_path, **kw):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({**TINY, "output_dir": str(tmp_path / "out"), **kw}))
        return str(path)

    def test_train_and_report(self, tmp_path, capsys):
        path = self.write(tmp_path, codec={"method": "jpeg", "quality": 50})
        assert cli.main(["train", "--config", path]) == 0
        assert json.loads(capsys.readouterr().out)["last"] >= 0
        assert cli.main(["report", "--config", path]) == 0

    def test_rd_curve(self, tmp_path):
        path = self.write(tmp_path, codecs=[{"method": "jpeg", "qualities": [20, 80]}])
        assert cli.main(["rd-curve", "--config", path, "--limit", "5"]) == 0
        assert (tmp_path / "out" / "rd.csv").exists()

    def test_prepare_and_probe(self, tmp_path, monkeypatch):
        monkeypatch.delenv("COMPCIL_CACHE", raising=False)
        path = self.write(tmp_path, codecs=[{"method": "jpeg", "qualities": [20]}])
        assert cli.main(["prepare", "--config", path]) == 0
        assert list((tmp_path / "out" / "cache" / "prepared").rglob("manifest.json"))
        assert cli.main(["probe-rate", "--config", path]) == 0
        assert cli.main(["select-codec", "--config", path]) == 0

    def test_config_error_exit_code(self, tmp_path, capsys):
        path = self.write(tmp_path)
        assert cli.main(["train", "--config", path, "--set", "protocol.num_tasks=3"]) == 2
        assert "3 tasks" in capsys.readouterr().err
        assert cli.main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
        assert cli.main(["probe-rate", "--config", path]) == 2

    def test_stage_failure_exit_code(self, tmp_path):
        path = self.write(tmp_path, budget={"reference_images": 1})
        assert cli.main(["train", "--config", path]) == 3
