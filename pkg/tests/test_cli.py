import csv

import pytest

from msranet import tensor
from msranet.cli import main


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(root), "--classes", "3", "--per-class", "10", "--size", "32", "--seed", "1"]) == 0
    return root


def _cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text("model.input_size = 32\nmodel.c1 = 16\nmodel.c2 = 32\nmodel.r = 4\nmodel.n_classes = 3\n"
                 "model.hidden = 16\nmodel.bn_momentum = 0.9\ntrain.epochs = 1\ntrain.learning_rate = 0.001\n")
    return p


def test_synth_and_split(tree, tmp_path):
    assert len(list(tree.rglob("*.png"))) == 30
    assert (tree / "manifest.csv").exists()
    assert main(["split", "--root", str(tree), "--out", str(tmp_path), "--seed", "2"]) == 0
    rows = (tmp_path / "folds.txt").read_text().splitlines()
    assert rows
    assert main(["split", "--root", str(tree), "--out", str(tmp_path), "--k", "0"]) == 3
    assert main(["synth", "--out", str(tmp_path / "x"), "--size", "50"]) == 3


def test_train_evaluate_explain(tree, tmp_path, capsys):
    cfg = _cfg(tmp_path)
    out = tmp_path / "run"
    args = ["train", "--config", str(cfg), "--root", str(tree), "--out", str(out), "--folds", "0",
            "--seed", "3", "--deterministic"]
    assert main(args) == 0
    for name in ("run.cfg", "folds.txt", "fold0.msrw", "train_log.jsonl", "metrics.csv", "metrics_val.csv",
                 "report.txt", "fold0_test_confusion.csv"):
        assert (out / name).exists(), name
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    macro = [r for r in rows if r["fold"] == "0" and r["class"] == "macro_avg"][0]

    ev = ["evaluate", "--config", str(out / "run.cfg"), "--weights", str(out / "fold0.msrw"), "--fold", "0",
          "--root", str(tree), "--plan", str(out / "folds.txt"), "--out", str(tmp_path / "ev")]
    assert main(ev) == 0
    erows = list(csv.DictReader((tmp_path / "ev" / "eval_fold0_test_metrics.csv").open()))
    emacro = [r for r in erows if r["class"] == "macro_avg"][0]
    assert emacro["accuracy"] == macro["accuracy"] and emacro["auc"] == macro["auc"]

    img = sorted(tree.rglob("*.png"))[0]
    ex = ["explain", "--config", str(out / "run.cfg"), "--weights", str(out / "fold0.msrw"), "--image", str(img),
          "--out", str(tmp_path / "cam")]
    assert main(ex) == 0
    pngs = sorted(p.name for p in (tmp_path / "cam").iterdir())
    assert len(pngs) == 3 and all("_argmax" in p and "_F_merged_" in p for p in pngs)
    assert main([*ex, "--class", "1", "--layer", "F1_att"]) == 0
    assert any("_c1_F1_att_heat" in p.name for p in (tmp_path / "cam").iterdir())
    assert main([*ex, "--layer", "bogus"]) == 3
    # weights do not fit a different head
    assert main([*ev, "--set", "model.hidden=8"]) == 5
    assert main([*ev, "--set", "model.n_classes=4"]) == 3

    again = [a if a != str(out) else str(tmp_path / "run2") for a in args]
    assert main(again) == 0
    for name in ("fold0.msrw", "train_log.jsonl", "metrics.csv"):
        assert (out / name).read_bytes() == (tmp_path / "run2" / name).read_bytes(), name


def test_train_errors(tree, tmp_path):
    cfg = _cfg(tmp_path)
    assert main(["train", "--config", str(cfg), "--root", str(tree), "--out", str(tmp_path / "r"),
                 "--set", "train.batch_size=1"]) == 3
    assert main(["train", "--config", str(cfg), "--root", str(tree), "--out", str(tmp_path / "r"),
                 "--set", "model.n_classes=5"]) == 3
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 6


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--instances", "1", "--inject-fault", "matmul=1.2"]) == 1
    out = capsys.readouterr().out
    assert "FAIL matmul" in out and "FAIL dense" in out and "PASS conv2d_1x1" in out
    assert "matmul" not in tensor._FAULTS
