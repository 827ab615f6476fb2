"""Loading, preprocessing and post-processing of image / ground-truth pairs."""

import glob
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

KINDS = ("drive-like", "stare-like", "hrf-like", "neuron-like", "generic")
BACKGROUND = -1.0


@dataclass
class ImagePair:
    image: np.ndarray  # [3, H, W] in [-1, 1]
    segmentation: np.ndarray  # [1, H, W] in {-1, 1}
    mask: np.ndarray = None  # [1, H, W] in {0, 1} or None
    original_size: tuple = None
    id: str = ""

    def __post_init__(self):
        if self.original_size is None:
            self.original_size = tuple(self.image.shape[1:])

    @property
    def size(self):
        return self.image.shape[1]

    def check(self):
        if not set(np.unique(self.segmentation)) <= {-1.0, 1.0}:
            raise ValueError(f"{self.id}: segmentation is not in {{-1, 1}}")
        if self.image.min() < -1 or self.image.max() > 1:
            raise ValueError(f"{self.id}: image leaves [-1, 1]")
        return self


@dataclass
class DatasetSpec:
    root: str
    kind: str = "generic"
    target_size: int = 64
    image_glob: str = "images/*.png"
    gt_glob: str = "gt/*.png"
    mask_glob: str = "masks/*.png"
    crop_size: int = 0  # drive-like only; 0 -> the short side


# ---------------------------------------------------------------- resizing

def _cubic(t, a=-0.5):
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resize_matrix(n_in, n_out):
    """Rows of Catmull-Rom weights with edge clamping; the kernel widens when shrinking."""
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    reach = int(np.ceil(2 * support))
    mat = np.zeros((n_out, n_in))
    base = np.floor(centers).astype(int)
    rows = np.arange(n_out)
    for off in range(-reach + 1, reach + 1):
        idx = base + off
        w = _cubic((centers - idx) / support)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), w)
    return mat / mat.sum(axis=1, keepdims=True)


def bicubic_resize(image, new_h, new_w):
    """Resize a ``[C, H, W]`` or ``[H, W]`` array with the a=-0.5 cubic kernel."""
    if new_h <= 0 or new_w <= 0:
        raise ValueError(f"target size must be positive, got {new_h}x{new_w}")
    arr = np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    _, h, w = arr.shape
    if (h, w) == (new_h, new_w):
        out = arr.copy()
    else:
        out = _resize_matrix(h, new_h) @ arr @ _resize_matrix(w, new_w).T
    return out[0] if squeeze else out


def nearest_resize(image, new_h, new_w):
    arr = np.asarray(image)
    h, w = arr.shape[-2:]
    ri = np.minimum(((np.arange(new_h) + 0.5) * h / new_h).astype(int), h - 1)
    ci = np.minimum(((np.arange(new_w) + 0.5) * w / new_w).astype(int), w - 1)
    return arr[..., ri[:, None], ci[None, :]]


# ------------------------------------------------------------ value ranges

def to_unit_range(raw):
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return (np.asarray(raw, np.float32) / 127.5 - 1.0).astype(np.float32)


def to_uint8(image):
    """[-1, 1] -> uint8 with 127.5 rounding half up to 128."""
    v = np.floor((np.asarray(image, np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def apply_mask(image, mask):
    """Set pixels outside ``mask`` to the background value -1."""
    m = np.asarray(mask) > 0.5
    if m.ndim == 3:
        m = m[0]
    return np.where(m, image, np.asarray(image).dtype.type(BACKGROUND))


def derive_mask(raw_rgb):
    """Field-of-view mask: luminance above 10/255, largest component, holes filled."""
    lum = np.asarray(raw_rgb, np.float64)
    if lum.ndim == 3:
        lum = lum @ np.array([0.299, 0.587, 0.114])
    fg = lum > 10
    labels, n = ndimage.label(fg)
    if n == 0:
        return np.ones_like(fg)
    sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, n + 1))
    return ndimage.binary_fill_holes(labels == 1 + int(np.argmax(sizes)))


# --------------------------------------------------------------- pipeline

def _as_rgb(raw):
    raw = np.asarray(raw)
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=-1)
    if raw.ndim != 3 or raw.shape[2] < 3:
        raise ValueError(f"expected an RGB image, got shape {raw.shape}")
    return raw[..., :3]


def _center_crop(arr, size):
    h, w = arr.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return arr[top:top + size, left:left + size]


def preprocess(raw_image, raw_gt, raw_mask=None, kind="generic", target_size=64, id="", crop_size=0):
    """Turn raw uint8 arrays (``[H, W, 3]`` image, ``[H, W]`` maps) into an :class:`ImagePair`.

    drive-like images are center-cropped to a square first (the short side
    unless ``crop_size`` is given); every kind is then resized to
    ``target_size`` squared. Ground truth and masks use nearest-neighbour
    sampling and are re-binarized at 0.5.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    rgb = _as_rgb(raw_image)
    gt = np.asarray(raw_gt)
    if gt.ndim == 3:
        gt = gt[..., 0]
    h, w = rgb.shape[:2]
    if gt.shape != (h, w):
        raise ValueError(f"{id}: ground truth {gt.shape} does not match image {(h, w)}")
    gt = gt > (gt.max() / 2 if gt.max() > 1 else 0.5)
    mask = None
    if raw_mask is not None:
        mask = np.asarray(raw_mask)
        if mask.ndim == 3:
            mask = mask[..., 0]
        mask = mask > (mask.max() / 2 if mask.max() > 1 else 0.5)
    elif kind == "generic":
        mask = derive_mask(rgb)
    if kind == "drive-like":
        size = crop_size or min(h, w)
        if size > min(h, w):
            raise ValueError(f"{id}: image {h}x{w} is smaller than the {size}x{size} crop window")
        rgb, gt = _center_crop(rgb, size), _center_crop(gt, size)
        mask = None if mask is None else _center_crop(mask, size)
    t = target_size
    img = bicubic_resize(to_unit_range(rgb).transpose(2, 0, 1), t, t)
    img = np.clip(img, -1.0, 1.0).astype(np.float32)
    seg = nearest_resize(gt.astype(np.float32), t, t) >= 0.5
    seg = np.where(seg, 1.0, -1.0).astype(np.float32)[None]
    if mask is not None:
        mask = (nearest_resize(mask.astype(np.float32), t, t) >= 0.5).astype(np.float32)[None]
    return ImagePair(img, seg, mask, (h, w), id).check()


def postprocess(phantom, original_size, mask=None):
    """Upsample a [-1, 1] phantom to ``original_size``; return a uint8 ``[H, W, 3]`` image.

    Pixels outside ``mask`` (resized to the original size if needed) are 0.
    """
    arr = getattr(phantom, "data", phantom)
    h, w = original_size
    up = np.clip(bicubic_resize(arr, h, w), -1.0, 1.0)
    if mask is not None:
        m = np.asarray(mask, np.float32)
        if m.ndim == 3:
            m = m[0]
        if m.shape != (h, w):
            m = nearest_resize(m, h, w)
        up = apply_mask(up, m)
    return to_uint8(up).transpose(1, 2, 0)


def psnr(a, b, peak=255.0):
    err = np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)
    return float("inf") if err == 0 else float(10 * np.log10(peak * peak / err))


# --------------------------------------------------------------- file i/o

def read_png(path, mode=None):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode) if mode else im)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc


def write_png(path, array):
    Image.fromarray(np.asarray(array, np.uint8)).save(path, format="PNG")


def binary_to_png(binary):
    return (np.asarray(binary) > 0).astype(np.uint8) * 255


def find_pairs(spec):
    """Match images to ground truth (and optional masks) by file stem."""
    def stems(pattern):
        return {os.path.splitext(os.path.basename(p))[0]: p
                for p in sorted(glob.glob(os.path.join(spec.root, pattern)))}

    images, gts, masks = stems(spec.image_glob), stems(spec.gt_glob), stems(spec.mask_glob)
    missing = sorted(set(images) ^ set(gts))
    if missing:
        raise ValueError(f"unpaired files (need exactly one ground truth per image): {', '.join(missing)}")
    if not images:
        raise ValueError(f"no images match {os.path.join(spec.root, spec.image_glob)}")
    return [(s, images[s], gts[s], masks.get(s)) for s in sorted(images)]


def load_dataset(spec):
    pairs = []
    for stem, img, gt, mask in find_pairs(spec):
        pairs.append(preprocess(
            read_png(img, "RGB"), read_png(gt, "L"), None if mask is None else read_png(mask, "L"),
            spec.kind, spec.target_size, stem, spec.crop_size,
        ))
    return pairs


# ------------------------------------------------------- synthetic phantoms

PALETTES = {
    "fundus": dict(color=(0.78, 0.36, 0.16), vessel=0.45, texture=0.05, freq=1.5),
    "alt": dict(color=(0.35, 0.55, 0.70), vessel=0.55, texture=0.07, freq=0.8),
}


def _draw_curve(canvas, rng, start, heading, length, width, depth):
    h, w = canvas.shape
    y, x = start
    width0 = width
    for step in range(int(length)):
        heading += rng.normal(0.0, 0.18)
        y += np.sin(heading)
        x += np.cos(heading)
        if not (0 <= y < h and 0 <= x < w):
            break
        r = max(width0 * (1 - 0.6 * step / length), 0.5) / 2
        y0, y1 = int(max(y - r - 1, 0)), int(min(y + r + 2, h))
        x0, x1 = int(max(x - r - 1, 0)), int(min(x + r + 2, w))
        yy, xx = np.mgrid[y0:y1, x0:x1]
        canvas[y0:y1, x0:x1] |= (yy - y) ** 2 + (xx - x) ** 2 <= r * r + 0.25
        if depth > 0 and step > 4 and rng.random() < 0.035:
            side = rng.choice([-1.0, 1.0])
            _draw_curve(canvas, rng, (y, x), heading + side * rng.uniform(0.5, 1.1),
                        length * rng.uniform(0.3, 0.6), max(r * 2 * 0.7, 1.0), depth - 1)


def _skeleton_map(rng, size):
    for _ in range(20):
        canvas = np.zeros((size, size), bool)
        c = size / 2
        for _ in range(rng.integers(2, 4)):
            ang = rng.uniform(0, 2 * np.pi)
            start = (c + rng.normal(0, size * 0.05), c + rng.normal(0, size * 0.05))
            _draw_curve(canvas, rng, start, ang, size * rng.uniform(0.5, 0.8),
                        rng.uniform(size / 22, size / 14), depth=2)
        frac = canvas.mean()
        if 0.02 < frac < 0.25:
            return canvas
    return canvas


def render_filaments(gt, rng, palette="fundus"):
    """Textured RGB rendering in [0, 1] of a binary filament map."""
    p = PALETTES[palette]
    size = gt.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    illum = 1.0 - 0.6 * (yy ** 2 + xx ** 2) + 0.15 * ndimage.gaussian_filter(
        rng.normal(size=gt.shape), size / 8, mode="reflect") * size / 8
    texture = ndimage.gaussian_filter(rng.normal(size=(3, *gt.shape)), (0, p["freq"], p["freq"]), mode="reflect")
    vessels = ndimage.gaussian_filter(gt.astype(float), 0.7)
    img = np.empty((3, size, size))
    for ch, base in enumerate(p["color"]):
        img[ch] = base * illum * (1 - p["vessel"] * vessels) + p["texture"] * texture[ch] * 3
    return np.clip(img, 0.0, 1.0)


def circular_mask(size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5 - size / 2
    return (yy ** 2 + xx ** 2 <= (0.48 * size) ** 2).astype(np.float32)[None]


def generate_synthetic_micro_dataset(n, size, seed, palette="fundus", with_mask=False):
    """``n`` deterministic image/ground-truth pairs with branching filaments."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        gt = _skeleton_map(rng, size)
        img = render_filaments(gt, rng, palette) * 2 - 1
        mask = circular_mask(size) if with_mask else None
        seg = np.where(gt, 1.0, -1.0).astype(np.float32)[None]
        pairs.append(ImagePair(img.astype(np.float32), seg, mask, (size, size), f"micro{seed}_{i:03d}"))
    return pairs
