import csv
import json

import numpy as np
import pytest

from hanet.cli import main
from hanet.groundtruth import read_dmap


def synth(out, *extra):
    return main(["synth", "--out", str(out), "--images", "3", "--size", "32x32", "--heads", "2:6", "--seed", "7", *extra])


def test_synth_files_and_determinism(tmp_path):
    assert synth(tmp_path / "a") == 0
    assert synth(tmp_path / "b") == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert sum(f.endswith(".png") for f in files) == 3 and sum(f.endswith(".json") for f in files) == 5
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_rejects_bad_size(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--images", "1", "--size", "65x64"]) == 2
    assert "divisible by 8" in capsys.readouterr().err


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["synth", "--out", str(tmp_path), "--images", "1", "--size", "big"])
    assert e.value.code == 1


@pytest.mark.parametrize("mode", ["fixed", "adaptive"])
def test_make_gt_counts(tmp_path, capsys, mode):
    synth(tmp_path / "d")
    out = tmp_path / "gt"
    assert main(["make-gt", "--manifest", str(tmp_path / "d" / "manifest.json"), "--mode", mode, "--out", str(out)]) == 0
    for ann in sorted((tmp_path / "d").glob("img_*.json")):
        n = len(json.loads(ann.read_text()))
        assert abs(read_dmap(out / f"{ann.stem}.dmap").sum() - n) < 1e-6
        assert (out / f"{ann.stem}.pgm").read_bytes().startswith(b"P5\n32 32\n255\n")
    assert json.loads((out / "config.json").read_text())["recipe"]["mode"] == mode


def test_make_gt_fallback_and_partial_failure(tmp_path, capsys):
    synth(tmp_path / "d")
    (tmp_path / "d" / "img_0000.json").write_text("[[4.0, 4.0]]")
    (tmp_path / "d" / "img_0001.json").write_text("[[40.0, 4.0]]")
    rc = main(["make-gt", "--manifest", str(tmp_path / "d" / "manifest.json"), "--mode", "adaptive", "--out", str(tmp_path / "gt")])
    captured = capsys.readouterr()
    assert rc == 2
    assert "fixed fallback" in captured.out
    assert "img_0001\tFAILED" in captured.err
    assert (tmp_path / "gt" / "img_0002.dmap").exists()


def test_train_eval_predict_roundtrip(tmp_path, capsys):
    synth(tmp_path / "d")
    man = str(tmp_path / "d" / "manifest.json")
    tr = tmp_path / "run"
    flags = ["--manifest", man, "--plan", "toy", "--scales", "1,2", "--batch-size", "2", "--iterations", "3", "--seed", "5"]
    assert main(["train", *flags, "--out", str(tr)]) == 0
    echo = json.loads((tr / "config.json").read_text())
    assert echo["model"]["scales"] == [1, 2] and echo["iterations"] == 3 and echo["policy"]["m"] == 32
    loss1 = (tr / "loss.csv").read_text()

    # rerunning from the echoed config reproduces the run
    assert main(["train", "--config", str(tr / "config.json"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "loss.csv").read_text() == loss1
    assert (tmp_path / "again" / "checkpoint.bin").read_bytes() == (tr / "checkpoint.bin").read_bytes()

    # flags override the config file
    assert main(["train", "--config", str(tr / "config.json"), "--iterations", "1", "--out", str(tmp_path / "one")]) == 0
    assert json.loads((tmp_path / "one" / "config.json").read_text())["iterations"] == 1

    ck = str(tr / "checkpoint.bin")
    for name in ("e1", "e2"):
        assert main(["eval", "--checkpoint", ck, "--manifest", man, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "e1" / "eval.csv").read_bytes() == (tmp_path / "e2" / "eval.csv").read_bytes()
    rows = list(csv.reader(open(tmp_path / "e1" / "eval.csv")))
    assert rows[0] == ["id", "estimate", "ground_truth"] and rows[-2][0] == "MAE"

    capsys.readouterr()
    img = tmp_path / "d" / "img_0000.png"
    assert main(["predict", "--checkpoint", ck, "--out", str(tmp_path / "p"), str(img)]) == 0
    stem, count = capsys.readouterr().out.strip().split("\t")
    dm = read_dmap(tmp_path / "p" / "img_0000.dmap")
    assert stem == "img_0000" and dm.shape == (4, 4)
    assert float(count) == pytest.approx(dm.sum(), abs=1e-4)


def test_train_validation_errors(tmp_path, capsys):
    synth(tmp_path / "d")
    man = str(tmp_path / "d" / "manifest.json")
    assert main(["train", "--manifest", man, "--scales", "1,6", "--iterations", "1", "--out", str(tmp_path / "r")]) == 2
    assert "exceeds" in capsys.readouterr().err
    assert main(["train", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path / "r2")]) == 2


def test_train_numeric_abort_exit_3(tmp_path):
    synth(tmp_path / "d")
    man = str(tmp_path / "d" / "manifest.json")
    with np.errstate(all="ignore"):
        rc = main(["train", "--manifest", man, "--scales", "1", "--lr", "1e6", "--iterations", "40", "--batch-size", "2",
                   "--out", str(tmp_path / "r")])
    assert rc == 3
    assert (tmp_path / "r" / "config.json").exists()


def test_ablate_fusion_order_csv(tmp_path):
    main(["synth", "--out", str(tmp_path / "d"), "--images", "2", "--size", "48x48", "--heads", "2:4", "--seed", "1"])
    out = tmp_path / "ab"
    rc = main(["ablate", "--suite", "fusion_order", "--manifest", str(tmp_path / "d" / "manifest.json"), "--plan", "toy",
               "--iterations", "1", "--batch-size", "2", "--out", str(out)])
    assert rc == 0
    rows = list(csv.reader(open(out / "ablation_fusion_order.csv")))
    assert len(rows) == 5
    assert [r[2] for r in rows[1:]] == ["3 2 1", "1 2 3", "6 3 2 1", "1 2 3 6"]
    assert all(r[-1] == "ok" for r in rows[1:])
