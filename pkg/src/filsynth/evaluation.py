"""Segmentation-based evaluation of phantoms.

Scheme 1 measures how much phantoms help a patch-based segmenter when
added to its training data; scheme 2 segments real images and their
phantoms with one model and compares the results.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .nets import NetworkParams
from .tensor_core import Tensor, activation, backward, bce_with_logits, conv2d, no_grad, sigmoid
from .trainer import AdamState, adam_step

FULL_PATCHES = 400_000
FULL_AREA = 512 * 512
SCENARIOS = ("synthetic images", "real images", "real + synthetic images", "2x real images")
AVERAGING_NOTE = "average F1 = mean of per-image F1 (not pooled over pixels)"

TP_COLOR = (0, 0, 0)
FP_COLOR = (0, 255, 0)
FN_COLOR = (255, 0, 0)
TN_COLOR = (255, 255, 255)


@dataclass
class SegmenterConfig:
    patch_size: int = 17
    channels: tuple = (8, 16)
    kernels: tuple = (5, 5)
    patches: int = 0  # per scenario; 0 -> 400K scaled by image area
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 4
    slope: float = 0.2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.kernels = tuple(int(k) for k in self.kernels)

    def validate(self):
        if self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd")
        if self.last_kernel < 1:
            raise ValueError("patch_size too small for the configured kernels")
        return self

    @property
    def last_kernel(self):
        return self.patch_size - sum(k - 1 for k in self.kernels)

    def budget(self, image_size):
        return self.patches or max(2, round(FULL_PATCHES * image_size * image_size / FULL_AREA))


@dataclass
class SegMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float


def f1(pred, gt, mask=None):
    """Confusion counts and F1 over in-mask pixels; inputs are binary (> 0 is foreground)."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    p = p[0] if p.ndim == 3 else p
    g = g[0] if g.ndim == 3 else g
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    p, g = p > 0, g > 0
    m = np.ones_like(p) if mask is None else (np.asarray(mask).reshape(p.shape) > 0.5)
    tp = int((p & g & m).sum())
    fp = int((p & ~g & m).sum())
    fn = int((~p & g & m).sum())
    tn = int((~p & ~g & m).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    score = 2 * precision * recall / (precision + recall) if tp else 0.0
    return SegMetrics(tp, fp, fn, tn, precision, recall, score)


def overlay(pred, gt, mask=None):
    """RGB confusion map: TP black, FP green, FN red, TN and out-of-mask white."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    p = (p[0] if p.ndim == 3 else p) > 0
    g = (g[0] if g.ndim == 3 else g) > 0
    m = np.ones_like(p) if mask is None else (np.asarray(mask).reshape(p.shape) > 0.5)
    out = np.empty(p.shape + (3,), np.uint8)
    out[...] = TN_COLOR
    out[p & g & m] = TP_COLOR
    out[p & ~g & m] = FP_COLOR
    out[~p & g & m] = FN_COLOR
    return out


# -------------------------------------------------------------- segmenter

@dataclass
class PatchSet:
    """Patch centers ``(rows, cols)`` in ``images[index]`` with center labels."""

    images: list
    index: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.index)

    def __add__(self, other):
        return PatchSet(
            self.images + other.images,
            np.concatenate([self.index, other.index + len(self.images)]),
            np.concatenate([self.rows, other.rows]),
            np.concatenate([self.cols, other.cols]),
            np.concatenate([self.labels, other.labels]),
        )


def _stream(seed, stream):
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def sample_patches(pairs, count, rng):
    """``count`` patch centers spread over ``pairs``, half foreground, half background."""
    if not pairs:
        raise ValueError("cannot sample patches from an empty image set")
    n = len(pairs)
    idx, rows, cols, labels = [], [], [], []
    for i, pair in enumerate(pairs):
        k = count // n + (1 if i < count % n else 0)
        fg = pair.segmentation[0] > 0
        valid = np.ones_like(fg) if pair.mask is None else pair.mask[0] > 0.5
        pools = [np.flatnonzero(fg & valid), np.flatnonzero(~fg & valid)]
        n_fg = k // 2 if len(pools[0]) else 0
        for pool, take, label in ((pools[0], n_fg, 1), (pools[1], k - n_fg, 0)):
            if take == 0:
                continue
            if not len(pool):
                pool = np.flatnonzero(valid)
            pick = pool[rng.integers(0, len(pool), size=take)]
            r, c = np.divmod(pick, fg.shape[1])
            idx.append(np.full(take, i))
            rows.append(r)
            cols.append(c)
            labels.append((fg.reshape(-1)[pick]).astype(np.int64))
    cat = np.concatenate
    return PatchSet(list(pairs), cat(idx), cat(rows), cat(cols), cat(labels))


def init_segmenter(config, seed):
    config.validate()
    rng = np.random.default_rng(seed)
    chans = (3, *config.channels, 1)
    kernels = (*config.kernels, config.last_kernel)
    tensors = {}
    for i, (c_in, c_out, k) in enumerate(zip(chans[:-1], chans[1:], kernels)):
        std = np.sqrt(2.0 / (c_in * k * k))
        tensors[f"seg{i}/kernel"] = Tensor(rng.normal(0, std, (c_out, c_in, k, k)), requires_grad=True)
        tensors[f"seg{i}/bias"] = Tensor(np.zeros(c_out), requires_grad=True)
    return NetworkParams(config, tensors)


def segmenter_logits(params, image):
    """Per-pixel logits [1, H, W]; each pixel sees the patch centered on it (background-padded)."""
    cfg = params.config
    r = cfg.patch_size // 2
    img = np.pad(np.asarray(getattr(image, "data", image), np.float32), ((0, 0), (r, r), (r, r)),
                 constant_values=-1.0)
    h = Tensor(img)
    n_layers = len(cfg.channels) + 1
    for i in range(n_layers):
        h = conv2d(h, params[f"seg{i}/kernel"], params[f"seg{i}/bias"], 1, 0)
        if i < n_layers - 1:
            h = activation(h, "leaky_relu", cfg.slope)
    return h


def train_segmenter(pairs, config=None, seed=0, patches=None):
    """Fit the patch classifier; ``patches`` defaults to a balanced sample of ``pairs``."""
    config = (config or SegmenterConfig()).validate()
    if patches is None:
        if not pairs:
            raise ValueError("cannot train a segmenter on an empty set")
        patches = sample_patches(pairs, config.budget(pairs[0].size), _stream(seed, 0))
    if len(patches) == 0:
        raise ValueError("cannot train a segmenter on an empty set")
    params = init_segmenter(config, seed)
    moments = AdamState.zeros_like(params)
    rng = _stream(seed, 99)
    for _ in range(config.epochs):
        chunks = []
        for i in range(len(patches.images)):
            sel = np.flatnonzero(patches.index == i)
            sel = sel[rng.permutation(len(sel))]
            chunks += [sel[j:j + config.batch_size] for j in range(0, len(sel), config.batch_size)]
        for c in rng.permutation(len(chunks)):
            sel = chunks[c]
            pair = patches.images[patches.index[sel[0]]]
            weight = np.zeros(pair.segmentation.shape, np.float32)
            np.add.at(weight[0], (patches.rows[sel], patches.cols[sel]), 1.0)
            target = (pair.segmentation > 0).astype(np.float32)
            loss = bce_with_logits(segmenter_logits(params, pair.image), target, weight)
            backward(loss, params=params.values())
            adam_step(params.tensors, params.grads(), moments, config.lr, 0.9, 0.999, 1e-8)
    params.requires_grad_(False)
    return params


def patch_accuracy(params, patches):
    hits = 0
    for i, pair in enumerate(patches.images):
        sel = patches.index == i
        if not sel.any():
            continue
        _, binary = segment(params, pair.image)
        hits += int((binary[patches.rows[sel], patches.cols[sel]] == patches.labels[sel].astype(bool)).sum())
    return hits / len(patches)


def segment(params, image):
    """Foreground probability map [H, W] and its 0.5-threshold binary map."""
    with no_grad():
        prob = sigmoid(segmenter_logits(params, image)).data[0]
    return prob, prob >= 0.5


# ---------------------------------------------------------------- schemes

def evaluate_set(params, pairs):
    rows = []
    for pair in pairs:
        _, binary = segment(params, pair.image)
        rows.append((pair.id, f1(binary, pair.segmentation, pair.mask), binary))
    return rows


@dataclass
class Scheme1Report:
    rows: list  # (scenario, average f1, [(id, SegMetrics)])
    patches_per_scenario: int
    seed: int

    def average(self, scenario):
        return next(avg for name, avg, _ in self.rows if name == scenario)

    def to_text(self):
        lines = [f"# scheme 1: {AVERAGING_NOTE}",
                 f"# {self.patches_per_scenario} patches per patch set, seed {self.seed}",
                 f"{'training set':<26}{'avg F1 (%)':>12}"]
        lines += [f"{name:<26}{100 * avg:>12.2f}" for name, avg, _ in self.rows]
        ordered = self.average(SCENARIOS[0]) < self.average(SCENARIOS[1])
        lines.append(f"# synthetic-only below real-only: {'yes' if ordered else 'no'} (annotation only)")
        return "\n".join(lines) + "\n"

    def records(self):
        out = []
        for name, avg, per in self.rows:
            out.append({"scenario": name, "avg_f1": avg, "n_images": len(per)})
            out += [{"scenario": name, "id": i, **m.__dict__} for i, m in per]
        return out


def scheme1(real_train, synthetic_train, test_set, config=None, seed=0):
    """Train the four training-set scenarios with equal seeds and patch budgets; score each on ``test_set``.

    The synthetic patch set is drawn with the same random stream as the
    second real patch set, so substituting real images for the synthetic
    ones reproduces the 2x-real scenario exactly.
    """
    config = (config or SegmenterConfig()).validate()
    if not real_train or not synthetic_train or not test_set:
        raise ValueError("scheme1 needs non-empty real, synthetic and test sets")
    budget = config.budget(real_train[0].size)
    if budget < 2 * len(real_train):
        raise ValueError(f"patch budget {budget} is too small to split {len(real_train)} real images in two")
    first = sample_patches(real_train, budget, _stream(seed, 1))
    second = sample_patches(real_train, budget, _stream(seed, 2))
    synth = sample_patches(synthetic_train, budget, _stream(seed, 2))
    sets = dict(zip(SCENARIOS, (synth, first, first + synth, first + second)))
    rows = []
    for name in SCENARIOS:
        params = train_segmenter(None, config, seed, patches=sets[name])
        per = [(i, m) for i, m, _ in evaluate_set(params, test_set)]
        rows.append((name, float(np.mean([m.f1 for _, m in per])), per))
    return Scheme1Report(rows, budget, seed)


def filament_width(gt):
    """Local filament width at every foreground pixel (0 elsewhere).

    Width is read at the nearest skeleton pixel as ``2 * distance - 1``.
    """
    g = np.asarray(gt)
    g = (g[0] if g.ndim == 3 else g) > 0
    if not g.any():
        return np.zeros(g.shape)
    dist = ndimage.distance_transform_edt(g)
    skel = skeletonize(g)
    _, (ri, ci) = ndimage.distance_transform_edt(~skel, return_indices=True)
    return np.where(g, 2 * dist[ri, ci] - 1, 0.0)


@dataclass
class Scheme2Report:
    rows: list  # (id, SegMetrics real, SegMetrics phantom)
    overlays: dict = field(repr=False, default_factory=dict)
    width_disagreement: float = float("nan")
    width_overall: float = float("nan")

    @property
    def average_real(self):
        return float(np.mean([r.f1 for _, r, _ in self.rows]))

    @property
    def average_phantom(self):
        return float(np.mean([p.f1 for _, _, p in self.rows]))

    def to_text(self):
        lines = [f"# scheme 2: {AVERAGING_NOTE}",
                 f"{'image':<24}{'F1 real (%)':>13}{'F1 phantom (%)':>16}"]
        lines += [f"{i:<24}{100 * r.f1:>13.2f}{100 * p.f1:>16.2f}" for i, r, p in self.rows]
        lines.append(f"{'average':<24}{100 * self.average_real:>13.2f}{100 * self.average_phantom:>16.2f}")
        lines.append(f"# mean filament width: disagreement pixels {self.width_disagreement:.3f}, "
                     f"all foreground {self.width_overall:.3f}")
        return "\n".join(lines) + "\n"

    def records(self):
        out = [{"id": i, "f1_real": r.f1, "f1_phantom": p.f1, "real": r.__dict__, "phantom": p.__dict__}
               for i, r, p in self.rows]
        out.append({"id": "average", "f1_real": self.average_real, "f1_phantom": self.average_phantom,
                    "width_disagreement": self.width_disagreement, "width_overall": self.width_overall})
        return out


def scheme2(seg_params, real_test, phantom_test):
    """Segment each real test image and its phantom (same ground truth) with one model."""
    if len(real_test) != len(phantom_test):
        raise ValueError("real and phantom sets must pair up one to one")
    rows, overlays = [], {}
    dis_w, all_w = [], []
    for (rid, mr, br), (_, mp, bp), real, ph in zip(
            evaluate_set(seg_params, real_test), evaluate_set(seg_params, phantom_test), real_test, phantom_test):
        if real.segmentation.shape != ph.segmentation.shape:
            raise ValueError(f"{rid}: phantom size differs from the real image")
        rows.append((rid, mr, mp))
        overlays[rid] = (overlay(br, real.segmentation, real.mask), overlay(bp, ph.segmentation, ph.mask))
        fg = real.segmentation[0] > 0
        width = filament_width(fg)
        all_w.append(width[fg])
        dis_w.append(width[fg & (br != bp)])
    all_w, dis_w = np.concatenate(all_w), np.concatenate(dis_w)
    return Scheme2Report(
        rows, overlays,
        float(dis_w.mean()) if dis_w.size else float("nan"),
        float(all_w.mean()) if all_w.size else float("nan"),
    )


def write_report(report, out_dir, name):
    """Write ``<name>.txt``, ``<name>.jsonl`` and (scheme 2) overlay PNGs."""
    from .data import write_png

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}.txt"), "w") as fh:
        fh.write(report.to_text())
    with open(os.path.join(out_dir, f"{name}.jsonl"), "w") as fh:
        for rec in report.records():
            fh.write(json.dumps(rec) + "\n")
    for rid, (o_real, o_ph) in getattr(report, "overlays", {}).items():
        write_png(os.path.join(out_dir, f"overlay_{rid}_real.png"), o_real)
        write_png(os.path.join(out_dir, f"overlay_{rid}_phantom.png"), o_ph)
