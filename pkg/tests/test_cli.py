"""End-to-end command-line flows plus output formatting details."""

import hashlib
import json

import numpy as np
import pytest

from flocknet.blocks import load_checkpoint
from flocknet.cli import _eval_lines, main
from flocknet.data import read_records
from flocknet.ensemble import load_ensemble, parse_weights
from flocknet.metrics import (
    ConfusionMatrix,
    MetricsReport,
    accuracy,
    f1,
    precision,
    read_report_json,
    recall,
)
from flocknet.optim import read_history


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_dataset(out, per_class=8, size=8, seed=7):
    rc = main(["dataset-build", "--synthetic", "--per-class", str(per_class),
               "--image-size", str(size), "--seed", str(seed), "--out", str(out)])
    assert rc == 0
    return out


def train_member(data, out, arch="xception_sep", epochs=2, seed=0, extra=()):
    rc = main(["train", "--data", str(data), "--arch", arch, "--depth", "1",
               "--width", "4", "--epochs", str(epochs), "--batch-size", "8",
               "--seed", str(seed), "--out", str(out), *extra])
    assert rc == 0
    return out / "checkpoints" / "best.ckpt"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One dataset, two trained members, one fitted ensemble."""
    root = tmp_path_factory.mktemp("pipeline")
    data = build_dataset(root / "data")
    ckpt_a = train_member(data, root / "train_a", arch="xception_sep", seed=0)
    ckpt_b = train_member(data, root / "train_b", arch="resnetv2_preact", seed=1)
    ens = root / "ens"
    rc = main(["ensemble", "--members", str(ckpt_a), str(ckpt_b),
               "--data", str(data), "--steps", "30", "--out", str(ens)])
    assert rc == 0
    return {"root": root, "data": data, "ckpt_a": ckpt_a, "ckpt_b": ckpt_b,
            "ens": ens}


class TestDatasetBuild:
    def test_creates_records_and_manifest(self, tmp_path):
        out = build_dataset(tmp_path / "ds", per_class=8, size=8)
        for split in ("train", "val", "test"):
            assert (out / f"{split}.efrc").exists()
        manifest = json.loads((out / "split_manifest.json").read_text())
        counts = [manifest["files"][s]["records"] for s in ("train", "val", "test")]
        assert sum(counts) == 16
        assert manifest["counts"] == counts
        assert (out / "config.txt").exists()
        train = read_records(out / "train.efrc")
        assert train.images.shape[1:] == (8, 8, 3)

    def test_rerun_is_bit_identical(self, tmp_path):
        a = build_dataset(tmp_path / "a")
        b = build_dataset(tmp_path / "b")
        for split in ("train", "val", "test"):
            assert sha(a / f"{split}.efrc") == sha(b / f"{split}.efrc")

    def test_reference_counts_accepted(self, tmp_path):
        rc = main(["dataset-build", "--synthetic", "--per-class", "2928",
                   "--image-size", "4", "--seed", "0",
                   "--counts", "3748,936,1172", "--out", str(tmp_path / "big")])
        assert rc == 0
        manifest = json.loads((tmp_path / "big" / "split_manifest.json").read_text())
        assert manifest["counts"] == [3748, 936, 1172]

    def test_count_mismatch_fails(self, tmp_path, capsys):
        rc = main(["dataset-build", "--synthetic", "--per-class", "2928",
                   "--image-size", "4", "--counts", "3748,936,1173",
                   "--out", str(tmp_path / "bad")])
        assert rc == 1
        assert "do not sum" in capsys.readouterr().err

    def test_env_var_default_out(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FLOCKNET_OUT", str(tmp_path / "envroot"))
        rc = main(["dataset-build", "--synthetic", "--per-class", "4",
                   "--image-size", "8"])
        assert rc == 0
        assert (tmp_path / "envroot" / "dataset-build" / "train.efrc").exists()


class TestTrain:
    def test_outputs_and_history(self, pipeline):
        out = pipeline["ckpt_a"].parent.parent
        assert pipeline["ckpt_a"].exists()
        history = read_history(out / "history.csv")
        assert len(history) == 2
        assert all(np.isfinite(row["val_loss"]) for row in history)
        config = (out / "config.txt").read_text()
        assert "arch=xception_sep" in config
        assert "command=train" in config
        model = load_checkpoint(pipeline["ckpt_a"])
        assert model.architecture == "xception_sep"

    def test_rerun_is_bit_identical(self, tmp_path):
        data = build_dataset(tmp_path / "data")
        a = train_member(data, tmp_path / "a", epochs=1, seed=3)
        b = train_member(data, tmp_path / "b", epochs=1, seed=3)
        assert sha(a) == sha(b)

    def test_missing_dataset_fails(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nope"), "--arch",
                   "xception_sep", "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "missing record file" in capsys.readouterr().err

    def test_divergence_exit_code(self, tmp_path, capsys):
        data = build_dataset(tmp_path / "data", per_class=4)
        with np.errstate(over="ignore", invalid="ignore"):
            rc = main(["train", "--data", str(data), "--arch", "xception_sep",
                       "--depth", "1", "--width", "4", "--epochs", "3",
                       "--batch-size", "8", "--lr", "1e300",
                       "--out", str(tmp_path / "out")])
        assert rc == 3
        assert "diverged" in capsys.readouterr().err

    def test_config_file_merges_flags_win(self, tmp_path):
        data = build_dataset(tmp_path / "data", per_class=4)
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# defaults for smoke runs\ndepth=1\nwidth=4\n"
                       "epochs=2\nbatch-size=8\naugment=false\n")
        out = tmp_path / "out"
        rc = main(["train", "--data", str(data), "--arch", "xception_sep",
                   "--config", str(cfg), "--epochs", "1", "--out", str(out)])
        assert rc == 0
        history = read_history(out / "history.csv")
        assert len(history) == 1
        config = (out / "config.txt").read_text()
        assert "epochs=1" in config and "width=4" in config and "augment=False" in config

    def test_unknown_config_key_fails(self, tmp_path, capsys):
        data = build_dataset(tmp_path / "data", per_class=4)
        cfg = tmp_path / "run.cfg"
        cfg.write_text("depht=1\n")
        rc = main(["train", "--data", str(data), "--arch", "xception_sep",
                   "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "unknown config key" in capsys.readouterr().err


class TestEnsembleCommand:
    def test_manifest_and_report(self, pipeline):
        ens = pipeline["ens"]
        assert (ens / "manifest.json").exists()
        loaded = load_ensemble(ens / "manifest.json")
        assert len(loaded.members) == 2
        parsed = parse_weights((ens / "report.txt").read_text())
        assert list(parsed) == ["xception_sep", "resnetv2_preact"]
        assert abs(sum(parsed.values()) - 1.0) <= 0.02

    def test_single_member_rejected(self, pipeline, capsys):
        rc = main(["ensemble", "--members", str(pipeline["ckpt_a"]),
                   "--data", str(pipeline["data"]),
                   "--out", str(pipeline["root"] / "bad_ens")])
        assert rc == 1
        assert "requires >= 2 members" in capsys.readouterr().err

    def test_duplicate_member_names_disambiguated(self, pipeline, tmp_path):
        ens = tmp_path / "ens"
        rc = main(["ensemble", "--members", str(pipeline["ckpt_a"]),
                   str(pipeline["ckpt_a"]), "--data", str(pipeline["data"]),
                   "--steps", "5", "--out", str(ens)])
        assert rc == 0
        parsed = parse_weights((ens / "report.txt").read_text())
        assert list(parsed) == ["xception_sep", "xception_sep_2"]


class TestEval:
    def test_eval_member(self, pipeline, tmp_path, capsys):
        out = tmp_path / "eval"
        rc = main(["eval", "--model", str(pipeline["ckpt_a"]),
                   "--data", str(pipeline["data"]), "--out", str(out)])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("tn, fp, fn, tp: ")
        assert lines[1].startswith("accuracy, precision, recall, f1: ")
        for name in ("report.txt", "report.json", "roc.csv"):
            assert (out / name).exists()
        report, cm = read_report_json(out / "report.json")
        assert cm.total == 4
        assert 0.0 <= report.accuracy <= 1.0

    def test_eval_manifest(self, pipeline, tmp_path, capsys):
        out = tmp_path / "eval"
        rc = main(["eval", "--manifest", str(pipeline["ens"] / "manifest.json"),
                   "--data", str(pipeline["data"]), "--split", "val",
                   "--out", str(out)])
        assert rc == 0
        assert "accuracy, precision, recall, f1" in capsys.readouterr().out

    def test_explicit_record_file(self, pipeline, tmp_path):
        out = tmp_path / "eval"
        rc = main(["eval", "--model", str(pipeline["ckpt_a"]),
                   "--records", str(pipeline["data"] / "test.efrc"),
                   "--out", str(out)])
        assert rc == 0

    def test_needs_data_or_records(self, pipeline, tmp_path, capsys):
        rc = main(["eval", "--model", str(pipeline["ckpt_a"]),
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "eval needs" in capsys.readouterr().err

    def test_model_and_manifest_conflict(self, pipeline, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--model", "a", "--manifest", "b",
                  "--out", str(tmp_path / "x")])
        assert exc.value.code == 2

    def test_engineered_counts_row(self):
        cm = ConfusionMatrix(303, 14, 4, 851)
        report = MetricsReport(accuracy=accuracy(cm), precision=precision(cm),
                               recall=recall(cm), f1=f1(cm), auc=0.99, loss=0.05)
        lines = _eval_lines(cm, report)
        assert lines[0] == "tn, fp, fn, tp: 303, 14, 4, 851"
        assert lines[1] == "accuracy, precision, recall, f1: 98.46, 98.38, 99.53, 98.95"

    def test_undefined_metric_prints_na(self):
        cm = ConfusionMatrix(4, 0, 0, 0)
        report = MetricsReport(accuracy=1.0, precision=None, recall=None,
                               f1=None, auc=0.5, loss=0.0)
        assert "n/a" in _eval_lines(cm, report)[1]


class TestReportCommand:
    def test_prints_run_digest(self, pipeline, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main(["eval", "--model", str(pipeline["ckpt_a"]),
                     "--data", str(pipeline["data"]), "--out", str(out)]) == 0
        capsys.readouterr()
        rc = main(["report", "--run", str(out)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "report.txt" in text and "accuracy" in text

    def test_train_run_digest_shows_history(self, pipeline, capsys):
        rc = main(["report", "--run", str(pipeline["ckpt_a"].parent.parent)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "history.csv" in text and "val_loss" in text

    def test_missing_run_fails(self, tmp_path, capsys):
        rc = main(["report", "--run", str(tmp_path / "ghost")])
        assert rc == 1
        assert "does not exist" in capsys.readouterr().err
