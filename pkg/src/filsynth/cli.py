"""Command-line entry points: prepare, train, train-style, synthesize, evaluate, overlay.

Every command exits 0 on success; on failure it prints a single line
``error: <ExceptionType>: <message>`` to stderr and exits 1.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import checkpoint
from . import config as cfgmod
from .data import (
    DatasetSpec,
    ImagePair,
    bicubic_resize,
    find_pairs,
    generate_synthetic_micro_dataset,
    load_dataset,
    nearest_resize,
    postprocess,
    read_png,
    to_unit_range,
    write_png,
)
from .evaluation import f1, overlay, scheme1, scheme2, train_segmenter, write_report
from .trainer import load_checkpoint, load_generator, synthesize, train

log = logging.getLogger("filsynth")

RUN_ROOT_ENV = "FILSYNTH_RUN_ROOT"
CACHE_NAME = "cache.fstc"
MANIFEST_NAME = "manifest.json"


# ------------------------------------------------------------------ helpers

def run_dir_for(args, seed):
    """``--run-dir`` if given, else ``<root>/run-<timestamp>-<seed>`` under the run root."""
    if args.run_dir:
        os.makedirs(args.run_dir, exist_ok=True)
        return args.run_dir
    root = os.environ.get(RUN_ROOT_ENV, "runs")
    base = os.path.join(root, f"run-{time.strftime('%Y%m%d-%H%M%S')}-{seed}")
    path, n = base, 1
    while os.path.exists(path):
        path, n = f"{base}-{n}", n + 1
    os.makedirs(path)
    return path


def _overrides(args):
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        out[key] = cfgmod.parse(f"{key} = {value}")[key]
    flag_keys = {
        "seed": "train.seed", "epochs": "train.epochs", "target_size": "dataset.target_size",
        "mode": "train.mode", "max_steps": "train.max_steps", "style": "run.style_image",
        "kind": "dataset.kind",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    return out


def resolve_config(args, **forced):
    text = ""
    if getattr(args, "config", None):
        with open(args.config) as fh:
            text = fh.read()
    return cfgmod.resolve(text, {**_overrides(args), **forced})


def write_config(cfg, run_dir):
    with open(os.path.join(run_dir, "config.txt"), "w") as fh:
        fh.write(cfgmod.dumps(cfg))


def save_cache(path, pairs, meta):
    arrays, sizes = {}, {}
    for p in pairs:
        arrays[f"{p.id}/image"] = p.image
        arrays[f"{p.id}/segmentation"] = p.segmentation
        if p.mask is not None:
            arrays[f"{p.id}/mask"] = p.mask
        sizes[p.id] = list(p.original_size)
    checkpoint.save(path, arrays, {"kind": "dataset_cache", "ids": [p.id for p in pairs],
                                   "original_sizes": sizes, **meta})


def load_cache(path):
    header, arrays = checkpoint.load(path)
    if header.get("kind") != "dataset_cache":
        raise checkpoint.CheckpointError(f"{path} is not a dataset cache")
    return [ImagePair(arrays[f"{i}/image"], arrays[f"{i}/segmentation"], arrays.get(f"{i}/mask"),
                      tuple(header["original_sizes"][i]), i) for i in header["ids"]]


def load_pairs(source, cfg):
    """Pairs from ``micro:N[:seed[:palette]]``, a cache file, a prepared directory or a dataset root."""
    if source.startswith("micro:"):
        parts = source.split(":")[1:]
        n = int(parts[0])
        seed = int(parts[1]) if len(parts) > 1 else 0
        palette = parts[2] if len(parts) > 2 else "fundus"
        return generate_synthetic_micro_dataset(n, cfg.dataset.target_size, seed, palette)
    if os.path.isfile(source):
        pairs = load_cache(source)
    elif os.path.isfile(os.path.join(source, CACHE_NAME)):
        pairs = load_cache(os.path.join(source, CACHE_NAME))
    elif os.path.isdir(source):
        spec = DatasetSpec(**{**cfg.dataset.__dict__, "root": source})
        return load_dataset(spec)
    else:
        raise FileNotFoundError(f"no dataset at {source}")
    size = cfg.dataset.target_size
    if pairs and pairs[0].size != size:
        raise ValueError(f"{source} was prepared at {pairs[0].size}x{pairs[0].size}, config wants {size}x{size}")
    return pairs


def load_style(source, size):
    """Style image as an :class:`ImagePair` (its segmentation is unused)."""
    if source.startswith("micro:"):
        return generate_synthetic_micro_dataset(1, size, int(source.split(":")[1]))[0]
    rgb = read_png(source, "RGB")
    img = np.clip(bicubic_resize(to_unit_range(rgb).transpose(2, 0, 1), size, size), -1, 1).astype(np.float32)
    return ImagePair(img, -np.ones((1, size, size), np.float32), id=os.path.basename(source))


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ----------------------------------------------------------------- commands

def cmd_prepare(args):
    cfg = resolve_config(args)
    out = args.run_dir or os.path.join(os.environ.get(RUN_ROOT_ENV, "runs"),
                                       f"prepared-{cfg.dataset.kind}-{cfg.dataset.target_size}")
    os.makedirs(out, exist_ok=True)
    spec = DatasetSpec(**{**cfg.dataset.__dict__, "root": args.dataset})
    test_ids = set()
    split_file = os.path.join(spec.root, "test.txt")
    if os.path.isfile(split_file):
        with open(split_file) as fh:
            test_ids = {line.strip() for line in fh if line.strip()}
    entries = []
    for stem, img, gt, mask in find_pairs(spec):
        entry = {"id": stem, "split": "test" if stem in test_ids else "train",
                 "image": os.path.relpath(img, spec.root), "image_sha256": _sha256(img),
                 "gt": os.path.relpath(gt, spec.root), "gt_sha256": _sha256(gt)}
        if mask:
            entry.update(mask=os.path.relpath(mask, spec.root), mask_sha256=_sha256(mask))
        entries.append(entry)
    settings = {"kind": spec.kind, "target_size": spec.target_size, "crop_size": spec.crop_size}
    manifest_path = os.path.join(out, MANIFEST_NAME)
    cache_path = os.path.join(out, CACHE_NAME)
    if os.path.isfile(manifest_path) and os.path.isfile(cache_path):
        with open(manifest_path) as fh:
            old = json.load(fh)
        if (old.get("settings") == settings and old.get("pairs") == entries
                and old.get("cache_sha256") == _sha256(cache_path)):
            print(f"cache up to date: {cache_path}")
            return 0
    pairs = load_dataset(spec)
    save_cache(cache_path, pairs, {"settings": settings})
    manifest = {"settings": settings, "pairs": entries, "cache": CACHE_NAME, "cache_sha256": _sha256(cache_path)}
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"prepared {len(pairs)} pairs -> {cache_path}")
    return 0


def _train(args, mode):
    forced = {"train.mode": mode}
    cfg = resolve_config(args, **forced)
    if mode == "sgan" and not cfg.run.style_image:
        raise ValueError("train-style needs --style")
    dataset = load_pairs(args.data, cfg)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        free = ("epochs", "max_steps", "checkpoint_every")
        old, new = state.config.to_dict(), cfg.train.to_dict()
        if {k: v for k, v in old.items() if k not in free} != {k: v for k, v in new.items() if k not in free}:
            raise ValueError("--resume checkpoint was written with a different configuration")
        state.config = cfg.train
    style = load_style(cfg.run.style_image, cfg.dataset.target_size) if mode == "sgan" else None
    run_dir = run_dir_for(args, cfg.train.seed)
    write_config(cfg, run_dir)
    state = train(dataset, cfg.train, style=style, run_dir=run_dir, state=state)
    last = state.log[-1] if state.log else {}
    print(f"{run_dir}: {state.step} steps, " + ", ".join(
        f"{k}={v:.4g}" for k, v in last.items() if k.startswith("loss")))
    return 0


def cmd_train(args):
    return _train(args, "gan")


def cmd_train_style(args):
    return _train(args, "sgan")


def cmd_synthesize(args):
    gen, train_cfg = load_generator(args.checkpoint)
    raw = read_png(args.gt, "L")
    size = gen.config.image_size
    gt = raw > (raw.max() / 2 if raw.max() > 1 else 0.5)
    y = np.where(nearest_resize(gt.astype(np.float32), size, size) >= 0.5, 1.0, -1.0).astype(np.float32)[None]
    mask = None
    if args.mask:
        m = read_png(args.mask, "L")
        mask = (m > (m.max() / 2 if m.max() > 1 else 0.5)).astype(np.float32)
        if mask.shape != raw.shape:
            raise ValueError(f"mask {mask.shape} does not match ground truth {raw.shape}")
    seed = args.seed if args.seed is not None else 0
    run_dir = run_dir_for(args, seed)
    cfg = cfgmod.defaults(target_size=size)
    cfg = cfgmod.RunConfig(cfg.run, train_cfg, cfg.dataset, cfg.segmenter)
    write_config(cfg, run_dir)
    phantoms = synthesize(gen, y, args.count, seed, train_cfg.noise_std_test)
    stem = os.path.splitext(os.path.basename(args.gt))[0]
    for i, ph in enumerate(phantoms):
        write_png(os.path.join(run_dir, f"{stem}_phantom{i:03d}.png"), postprocess(ph, raw.shape, mask))
    print(f"wrote {len(phantoms)} phantoms to {run_dir}")
    return 0


def cmd_evaluate(args):
    cfg = resolve_config(args)
    seed = cfg.train.seed
    run_dir = run_dir_for(args, seed)
    write_config(cfg, run_dir)
    if args.scheme == "scheme1":
        if not (args.real_train and args.synthetic and args.test):
            raise ValueError("scheme1 needs --real-train, --synthetic and --test")
        report = scheme1(load_pairs(args.real_train, cfg), load_pairs(args.synthetic, cfg),
                         load_pairs(args.test, cfg), cfg.segmenter, seed)
    else:
        if not (args.real_train and args.test and args.phantom_test):
            raise ValueError("scheme2 needs --real-train, --test and --phantom-test")
        seg = train_segmenter(load_pairs(args.real_train, cfg), cfg.segmenter, seed)
        report = scheme2(seg, load_pairs(args.test, cfg), load_pairs(args.phantom_test, cfg))
    write_report(report, run_dir, args.scheme)
    sys.stdout.write(report.to_text())
    return 0


def cmd_overlay(args):
    pred, gt = read_png(args.pred, "L") > 127, read_png(args.gt, "L") > 127
    mask = read_png(args.mask, "L") > 127 if args.mask else None
    metrics = f1(pred, gt, mask)
    out = args.out
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_png(out, overlay(pred, gt, mask))
    print(json.dumps(metrics.__dict__))
    return 0


# ------------------------------------------------------------------- parser

def _common(p, seed=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--run-dir", help=f"output directory (default: ${RUN_ROOT_ENV}/run-<timestamp>-<seed>)")
    if seed:
        p.add_argument("--seed", type=int)
    p.add_argument("--target-size", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="filsynth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="preprocess a dataset into a tensor cache")
    p.add_argument("dataset", help="dataset root with images/, gt/ and optional masks/")
    p.add_argument("--kind", choices=["drive-like", "stare-like", "hrf-like", "neuron-like", "generic"])
    _common(p, seed=False)
    p.set_defaults(func=cmd_prepare)

    for name, func in (("train", cmd_train), ("train-style", cmd_train_style)):
        p = sub.add_parser(name, help="train the adversarial model" + (" with style transfer" if func is cmd_train_style else ""))
        p.add_argument("data", help="prepared dir, cache file, dataset root or micro:N[:seed]")
        _common(p)
        p.add_argument("--epochs", type=int)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--resume", help="training checkpoint to continue from")
        if func is cmd_train_style:
            p.add_argument("--style", help="style image (PNG or micro:seed)")
        p.set_defaults(func=func)

    p = sub.add_parser("synthesize", help="generate phantoms for one ground-truth map")
    p.add_argument("checkpoint")
    p.add_argument("gt", help="ground-truth PNG")
    p.add_argument("--mask", help="field-of-view PNG at the ground-truth size")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="segmentation-based evaluation")
    p.add_argument("scheme", choices=["scheme1", "scheme2"])
    p.add_argument("--real-train", help="real training pairs (segmenter training set)")
    p.add_argument("--synthetic", help="synthetic training pairs (scheme1)")
    p.add_argument("--test", help="real test pairs")
    p.add_argument("--phantom-test", help="phantoms of the test pairs (scheme2)")
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("overlay", help="colour-coded comparison of a binary prediction with ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--mask")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one parsable line, no traceback
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1


if __name__ == "__main__":
    sys.exit(main())
