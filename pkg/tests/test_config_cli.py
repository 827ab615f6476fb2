import hashlib
import json
import os

import numpy as np
import pytest

from filsynth import config as cfgmod
from filsynth import data
from filsynth.cli import main
from filsynth.evaluation import FN_COLOR, FP_COLOR, TP_COLOR, TN_COLOR


@pytest.fixture
def run_root(tmp_path, monkeypatch):
    monkeypatch.setenv("FILSYNTH_RUN_ROOT", str(tmp_path / "runs"))
    return tmp_path / "runs"


def make_dataset(root, n=3, h=40, w=36):
    for sub in ("images", "gt"):
        (root / sub).mkdir(parents=True)
    for i, pair in enumerate(data.generate_synthetic_micro_dataset(n, 64, seed=7)):
        img = data.bicubic_resize(pair.image, h, w)
        data.write_png(root / "images" / f"im{i}.png", data.to_uint8(img).transpose(1, 2, 0))
        gt = data.nearest_resize(pair.segmentation[0], h, w)
        data.write_png(root / "gt" / f"im{i}.png", data.binary_to_png(gt))
    (root / "test.txt").write_text("im2\n")
    return root


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")
    return err[0]


# ------------------------------------------------------------------ config

def test_config_round_trip():
    cfg = cfgmod.defaults(target_size=32)
    text = cfgmod.dumps(cfg)
    again = cfgmod.resolve(text, {})
    assert cfgmod.dumps(again) == text
    assert "train.seed = 0" in text and "generator.image_size = 32" in text


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown config key 'train.sede'"):
        cfgmod.resolve("train.sede = 3\n", {})


def test_overrides_and_type_checks():
    cfg = cfgmod.resolve("train.seed = 4\ndataset.root = /data/x\n", {"train.epochs": 7})
    assert (cfg.train.seed, cfg.train.epochs, cfg.dataset.root) == (4, 7, "/data/x")
    with pytest.raises(ValueError):
        cfgmod.resolve("train.seed = fast\n", {})


def test_full_scale_config():
    cfg = cfgmod.resolve("run.scale = full\n", {})
    assert cfg.train.generator.image_size == 512
    assert cfg.train.epochs == 100


# -------------------------------------------------------------------- prepare

def test_prepare_manifest_and_idempotence(tmp_path, run_root, capsys):
    root = make_dataset(tmp_path / "ds")
    out = tmp_path / "prep"
    assert main(["prepare", str(root), "--kind", "drive-like", "--target-size", "16", "--run-dir", str(out)]) == 0
    cache = out / "cache.fstc"
    first = sha(cache)
    manifest = json.loads((out / "manifest.json").read_text())
    assert [p["split"] for p in manifest["pairs"]] == ["train", "train", "test"]
    assert main(["prepare", str(root), "--kind", "drive-like", "--target-size", "16", "--run-dir", str(out)]) == 0
    assert "up to date" in capsys.readouterr().out
    cache.unlink()
    main(["prepare", str(root), "--kind", "drive-like", "--target-size", "16", "--run-dir", str(out)])
    assert sha(cache) == first
    assert not run_root.exists()


def test_prepare_reports_missing_pairs(tmp_path, capsys):
    root = make_dataset(tmp_path / "ds")
    (root / "gt" / "im1.png").unlink()
    assert main(["prepare", str(root), "--run-dir", str(tmp_path / "p")]) == 1
    assert "im1" in error_line(capsys)


# ----------------------------------------------------------------------- train

def test_train_run_dir_and_reproducibility(tmp_path, run_root):
    args = ["train", "micro:2", "--target-size", "16", "--max-steps", "3", "--seed", "5"]
    assert main(args + ["--run-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--run-dir", str(tmp_path / "b")]) == 0
    for name in ("config.txt", "losses.jsonl", "checkpoints/final.fstc"):
        assert (tmp_path / "a" / name).exists()
    logs = [[{k: v for k, v in json.loads(l).items() if k != "wall_ms"}
             for l in (tmp_path / d / "losses.jsonl").read_text().splitlines()] for d in "ab"]
    assert logs[0] == logs[1] and len(logs[0]) == 3
    assert "train.seed = 5" in (tmp_path / "a" / "config.txt").read_text()


def test_train_default_run_dir_name(run_root):
    assert main(["train", "micro:1", "--target-size", "16", "--max-steps", "1", "--seed", "9"]) == 0
    (made,) = os.listdir(run_root)
    assert made.startswith("run-") and made.endswith("-9")


def test_train_resume(tmp_path, run_root):
    base = ["train", "micro:2", "--target-size", "16", "--set", "train.checkpoint_every=2"]
    main(base + ["--max-steps", "4", "--run-dir", str(tmp_path / "full")])
    main(base + ["--max-steps", "4", "--run-dir", str(tmp_path / "res"),
                 "--resume", str(tmp_path / "full" / "checkpoints" / "step-000002.fstc")])
    strip = lambda p: [{k: v for k, v in json.loads(l).items() if k != "wall_ms"}  # noqa: E731
                       for l in p.read_text().splitlines()]
    assert strip(tmp_path / "res" / "losses.jsonl") == strip(tmp_path / "full" / "losses.jsonl")[2:]


def test_train_style_logs_three_terms(tmp_path, run_root):
    assert main(["train-style", "micro:2", "--target-size", "32", "--max-steps", "2",
                 "--style", "micro:3", "--run-dir", str(tmp_path / "s")]) == 0
    rec = json.loads((tmp_path / "s" / "losses.jsonl").read_text().splitlines()[0])
    assert {"loss_sty", "loss_cont", "loss_tv"} <= set(rec)


def test_train_style_requires_style(tmp_path, capsys):
    assert main(["train-style", "micro:2", "--target-size", "32", "--run-dir", str(tmp_path / "x")]) == 1
    assert "--style" in error_line(capsys)


# ------------------------------------------------------------------ synthesize

def test_synthesize_count_size_and_distinct(tmp_path, run_root, capsys):
    main(["train", "micro:1", "--target-size", "16", "--max-steps", "1", "--run-dir", str(tmp_path / "t")])
    gt = np.zeros((30, 27), np.uint8)
    gt[10:20, 5:9] = 255
    data.write_png(tmp_path / "gt.png", gt)
    ckpt = str(tmp_path / "t" / "checkpoints" / "final.fstc")
    out = tmp_path / "syn"
    assert main(["synthesize", ckpt, str(tmp_path / "gt.png"), "--count", "3", "--seed", "1",
                 "--run-dir", str(out)]) == 0
    files = sorted(f for f in os.listdir(out) if f.endswith(".png"))
    assert files == ["gt_phantom000.png", "gt_phantom001.png", "gt_phantom002.png"]
    assert data.read_png(out / files[0]).shape == (30, 27, 3)
    assert len({sha(out / f) for f in files}) == 3
    (tmp_path / "bad.fstc").write_bytes(b"FSTC garbage")
    assert main(["synthesize", str(tmp_path / "bad.fstc"), str(tmp_path / "gt.png"),
                 "--run-dir", str(tmp_path / "z")]) == 1
    error_line(capsys)


# ---------------------------------------------------------- evaluate / overlay

def test_evaluate_schemes(tmp_path, run_root, capsys):
    seg = ["--target-size", "32", "--set", "segmenter.patches=300", "--set", "segmenter.epochs=1"]
    assert main(["evaluate", "scheme1", "--real-train", "micro:2:1", "--synthetic", "micro:2:2:alt",
                 "--test", "micro:2:3", "--run-dir", str(tmp_path / "e1"), *seg]) == 0
    out = capsys.readouterr().out
    assert all(s in out for s in ("synthetic images", "real images", "2x real images"))
    assert main(["evaluate", "scheme2", "--real-train", "micro:2:1", "--test", "micro:2:3",
                 "--phantom-test", "micro:2:3:alt", "--run-dir", str(tmp_path / "e2"), *seg]) == 0
    assert "average" in capsys.readouterr().out
    assert len([f for f in os.listdir(tmp_path / "e2") if f.startswith("overlay_")]) == 4
    assert main(["evaluate", "scheme1", "--real-train", "micro:2", "--run-dir", str(tmp_path / "e3")]) == 1
    error_line(capsys)


def test_overlay_palette(tmp_path, capsys):
    pred = np.array([[255, 255], [0, 0]], np.uint8)
    gt = np.array([[255, 0], [255, 0]], np.uint8)
    data.write_png(tmp_path / "p.png", pred)
    data.write_png(tmp_path / "g.png", gt)
    assert main(["overlay", str(tmp_path / "p.png"), str(tmp_path / "g.png"), "--out", str(tmp_path / "o.png")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert (metrics["tp"], metrics["fp"], metrics["fn"], metrics["tn"]) == (1, 1, 1, 1)
    img = data.read_png(tmp_path / "o.png")
    assert [tuple(img[0, 0]), tuple(img[0, 1]), tuple(img[1, 0]), tuple(img[1, 1])] == \
        [TP_COLOR, FP_COLOR, FN_COLOR, TN_COLOR]


def test_errors_exit_nonzero_with_one_line(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nowhere"), "--run-dir", str(tmp_path / "r")]) == 1
    assert "FileNotFoundError" in error_line(capsys)
    assert main(["train", "micro:1", "--set", "train.bogus=1", "--run-dir", str(tmp_path / "r")]) == 1
    assert "unknown config key" in error_line(capsys)
