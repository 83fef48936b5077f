import csv
import json
import os
import subprocess
import sys

import jsonschema
import pytest

from scanet import archspec as A
from scanet.cli import SCHEMAS, main
from scanet.synthetic import separable_images, write_image_folder

TINY_ARCH = "input 3 16 16 name=tiny\nconv c1 out=4 k=3 s=2\nconv c2 out=8 k=3 s=2\nhead 2\n"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, command, *argv):
    code, out, err = run(capsys, command, *argv, "--json")
    assert code == 0, err
    payload = json.loads(out)
    jsonschema.validate(payload, SCHEMAS[command])
    return payload


@pytest.fixture
def placeholder_manifest(tmp_path):
    path = tmp_path / "manifest.csv"
    rows = [(f"img_{i:05d}.png", "malignant" if i % 2 else "benign") for i in range(1200)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        w.writerows(rows)
    return path


@pytest.fixture(scope="module")
def image_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("imgs")
    manifest = write_image_folder(separable_images(48, 16, seed=0), root)
    out = root / "prep"
    assert main(["prepare", "--manifest", str(manifest), "--test-per-class", "6",
                 "--val-fraction", "0.2", "--out", str(out)]) == 0
    arch = root / "tiny.arch"
    arch.write_text(TINY_ARCH)
    return out / "split.csv", arch


@pytest.fixture(scope="module")
def checkpoint(image_split, tmp_path_factory):
    split, arch = image_split
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--arch", str(arch), "--split", str(split), "--epochs", "3",
                 "--lr", "0.01", "--batch-size", "8", "--out", str(out)]) == 0
    return out / "checkpoint.bin"


def test_analyze_reference(capsys):
    code, out, _ = run(capsys, "analyze", "builtin:resnet50")
    assert code == 0
    assert "Params: 23.51M, FLOPs: 7.71G" in out
    payload = run_json(capsys, "analyze", "builtin:resnet50")
    rep = payload["reports"][0]
    assert abs(rep["total_params"] - 23.52e6) / 23.52e6 <= 0.005
    assert abs(rep["total_flops"] - 7.72e9) / 7.72e9 <= 0.02


def test_analyze_compare(capsys, tmp_path):
    arch = tmp_path / "tiny.arch"
    arch.write_text(TINY_ARCH)
    code, out, _ = run(capsys, "analyze", "builtin:resnet50", arch, "--compare", "--input-size", "16")
    assert code == 0 and "tiny" in out
    payload = run_json(capsys, "analyze", "builtin:resnet50", arch, "--compare",
                       "--accuracy", "0.9", "0.8")
    assert payload["comparison"]["has_accuracy"]


def test_analyze_bad_spec(capsys, tmp_path):
    bad = tmp_path / "bad.arch"
    bad.write_text("input 3 16 16\nconv c1 out=4 k=3\nfrobnicate x\nhead 2\n")
    code, out, err = run(capsys, "analyze", bad)
    assert code == 2 and out == ""
    assert "line 3" in err
    code, _, err = run(capsys, "analyze", tmp_path / "missing.arch")
    assert code == 2 and "not found" in err


def test_prepare_reference_counts(capsys, placeholder_manifest, tmp_path):
    payload = run_json(capsys, "prepare", "--manifest", placeholder_manifest, "--no-check-files",
                       "--out", tmp_path / "a")
    assert payload["splits"]["test"] == {"benign": 221, "malignant": 221}
    assert payload["records"] == 1200
    run(capsys, "prepare", "--manifest", placeholder_manifest, "--no-check-files",
        "--out", tmp_path / "b")
    assert (tmp_path / "a" / "split.csv").read_bytes() == (tmp_path / "b" / "split.csv").read_bytes()
    code, _, err = run(capsys, "prepare", "--manifest", placeholder_manifest, "--no-check-files",
                       "--test-per-class", "700", "--out", tmp_path / "c")
    assert code == 2 and "error" in err


def test_prepare_missing_files_flagged(capsys, placeholder_manifest, tmp_path):
    code, _, _ = run(capsys, "prepare", "--manifest", placeholder_manifest, "--out", tmp_path)
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["missing_files"] == 1200


def test_train_zero_epochs(capsys, image_split, tmp_path):
    split, arch = image_split
    payload = run_json(capsys, "train", "--arch", arch, "--split", split, "--epochs", "0",
                       "--out", tmp_path)
    assert payload["steps"] == 0 and payload["history"] == []
    assert (tmp_path / "checkpoint.bin").is_file()


def test_train_and_eval(capsys, image_split, checkpoint, tmp_path):
    split, _ = image_split
    with (checkpoint.parent / "history.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 3
    payload = run_json(capsys, "eval", "--checkpoint", checkpoint, "--split", split,
                       "--out", tmp_path)
    assert payload["total"] == 12
    assert (tmp_path / "metrics.txt").read_text().startswith("Accuracy")


def _predictions(tmp_path, tp, fn, fp, tn):
    path = tmp_path / "pred.csv"
    rows = ([("malignant", "malignant")] * tp + [("malignant", "benign")] * fn
            + [("benign", "malignant")] * fp + [("benign", "benign")] * tn)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "prediction"])
        w.writerows(rows)
    return path


def test_eval_perfect_predictor(capsys, tmp_path):
    code, out, _ = run(capsys, "eval", "--predictions", _predictions(tmp_path, 221, 0, 0, 221),
                       "--out", tmp_path)
    assert code == 0
    assert "Accuracy 100.0 / Sensitivity 100.0 / PPV 100.0" in out


def test_eval_reference_matrix(capsys, tmp_path):
    code, out, _ = run(capsys, "eval", "--predictions", _predictions(tmp_path, 174, 47, 49, 172),
                       "--out", tmp_path)
    assert code == 0
    assert "TP 174  FN 47  FP 49  TN 172  (n=442)" in out
    assert "Accuracy 78.3 / Sensitivity 78.7 / PPV 78.0" in out
    data = json.loads((tmp_path / "metrics.json").read_text())
    assert data["confusion_matrix"] == {"tp": 174, "fn": 47, "fp": 49, "tn": 172}


def test_eval_usage_errors(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--out", tmp_path)
    assert code == 2 and "--predictions" in err
    bad = tmp_path / "bad.csv"
    bad.write_text("y,yhat\n1,1\n")
    code, _, err = run(capsys, "eval", "--predictions", bad, "--out", tmp_path)
    assert code == 2


def test_explain_artifacts(capsys, image_split, checkpoint, tmp_path):
    split, _ = image_split
    payload = run_json(capsys, "explain", "--checkpoint", checkpoint, "--split", split,
                       "--patch", "4", "--stride", "4", "--limit", "3", "--out", tmp_path)
    assert len(payload["entries"]) == 3
    assert sorted(p.name for p in tmp_path.glob("overlay_*.png")) == [
        "overlay_000.png", "overlay_001.png", "overlay_002.png"]
    assert json.loads((tmp_path / "audit.json").read_text())["pass_rate"] == payload["pass_rate"]


SEARCH_ARGS = ("--budget", "3", "--population", "2", "--train-steps", "4", "--synthetic-size",
               "120", "--batch-size", "16")


def test_search_artifacts(capsys, tmp_path):
    space = tmp_path / "space.json"
    space.write_text(json.dumps({"input_shape": [3, 16, 16], "channels": [4, 8],
                                 "max_stages": 2, "stem_channels": 8}))
    payload = run_json(capsys, "search", "--space", space, *SEARCH_ARGS,
                       "--baseline-accuracy", "0.0", "--out", tmp_path / "s")
    assert payload["evaluated"] == 3 and len(payload["archive"]) == 3
    assert (tmp_path / "s" / "archive" / "index.csv").is_file()
    assert (tmp_path / "s" / "tradeoff.txt").is_file()
    assert set(payload["pareto_ids"]) <= {c["id"] for c in payload["archive"]}
    for c in payload["archive"]:
        spec = A.load_archspec(tmp_path / "s" / "archive" / f"cand{c['id']:03d}.arch")
        assert A.analyze(spec).total_params == c["params"]


def test_search_bad_space(capsys, tmp_path):
    space = tmp_path / "space.json"
    space.write_text(json.dumps({"kinds": ["transformer"]}))
    code, _, err = run(capsys, "search", "--space", space, "--out", tmp_path)
    assert code == 2 and "space" in err


def test_config_merge_and_echo(capsys, tmp_path, placeholder_manifest):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"test_per_class": 100, "val_fraction": 0.3, "check_files": False}))
    out = tmp_path / "o"
    code, _, _ = run(capsys, "prepare", "--manifest", placeholder_manifest, "--config", cfg,
                     "--test-per-class", "50", "--out", out)
    assert code == 0
    echo = json.loads((out / "run_config.json").read_text())
    assert echo["test_per_class"] == 50  # flag beats config
    assert echo["val_fraction"] == 0.3  # config beats default
    summary = json.loads((out / "summary.json").read_text())
    assert summary["splits"]["test"] == {"benign": 50, "malignant": 50}
    code, _, err = run(capsys, "prepare", "--manifest", placeholder_manifest,
                       "--config", tmp_path / "nope.json", "--out", out)
    assert code == 2 and "config" in err


def test_output_dir_env(capsys, monkeypatch, tmp_path, placeholder_manifest):
    monkeypatch.setenv("SCANET_OUTPUT_DIR", str(tmp_path / "env"))
    code, _, _ = run(capsys, "prepare", "--manifest", placeholder_manifest, "--no-check-files")
    assert code == 0
    assert (tmp_path / "env" / "prepare" / "split.csv").is_file()


def test_seed_reproducibility(capsys, image_split, tmp_path):
    split, arch = image_split
    blobs = []
    for name in ("a", "b"):
        run(capsys, "train", "--arch", arch, "--split", split, "--epochs", "1", "--seed", "7",
            "--out", tmp_path / name)
        blobs.append((tmp_path / name / "checkpoint.bin").read_bytes())
    assert blobs[0] == blobs[1]
    run(capsys, "train", "--arch", arch, "--split", split, "--epochs", "1", "--seed", "8",
        "--out", tmp_path / "c")
    assert (tmp_path / "c" / "checkpoint.bin").read_bytes() != blobs[0]


def test_module_entry_point(tmp_path):
    env = dict(os.environ, SCANET_OUTPUT_DIR=str(tmp_path))
    res = subprocess.run([sys.executable, "-m", "scanet", "analyze", "resnet50"],
                         capture_output=True, text=True, env=env, timeout=120)
    assert res.returncode == 0 and "23.51M" in res.stdout
    res = subprocess.run([sys.executable, "-m", "scanet", "bogus"], capture_output=True, text=True,
                         env=env, timeout=120)
    assert res.returncode == 2
