"""Frozen multi-scale feature network used for the style and content terms.

Stands in for an ImageNet-trained VGG-19: five blocks of 3x3 convolutions
with leaky-ReLU, a 2x average pool closing each block, and features
addressed by 1-based ``(block, layer)`` pairs. Weights are either seeded
random (He-scaled, so activations keep their scale through depth) or
loaded from a tensor container file.
"""

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .nets import NetworkParams
from .tensor_core import Tensor, activation, avg_pool2d, conv2d

DESK_BLOCKS = ((2, 8), (2, 16), (2, 32), (2, 64), (2, 64))
VGG19_BLOCKS = ((2, 64), (2, 128), (4, 256), (4, 512), (4, 512))
STYLE_LAYERS = ((1, 1), (2, 1), (3, 1), (4, 1), (5, 1))
CONTENT_LAYERS = ((4, 2),)


@dataclass
class FeatureNetConfig:
    blocks: tuple = DESK_BLOCKS
    style_selection: tuple = STYLE_LAYERS
    content_selection: tuple = CONTENT_LAYERS
    in_channels: int = 3
    slope: float = 0.2
    weights_source: str = "seeded-random"  # "seeded-random" | "file"
    weights_path: str = ""

    def __post_init__(self):
        self.blocks = tuple(tuple(int(v) for v in b) for b in self.blocks)
        self.style_selection = tuple(tuple(int(v) for v in s) for s in self.style_selection)
        self.content_selection = tuple(tuple(int(v) for v in s) for s in self.content_selection)

    @classmethod
    def full(cls, **kw):
        return cls(blocks=VGG19_BLOCKS, **kw)

    def layer_names(self):
        return [(b, l) for b, (n, _) in enumerate(self.blocks, 1) for l in range(1, n + 1)]

    def validate(self):
        known = set(self.layer_names())
        for key in (*self.style_selection, *self.content_selection):
            if key not in known:
                raise ValueError(f"feature layer {key} does not exist in a {len(self.blocks)}-block net")
        if self.weights_source not in ("seeded-random", "file"):
            raise ValueError(f"unknown weights_source {self.weights_source!r}")
        return self


def feature_param_count(config):
    total, c_in = 0, config.in_channels
    for n, c in config.blocks:
        for _ in range(n):
            total += 3 * 3 * c_in * c + c
            c_in = c
    return total


def _shapes(config):
    out, c_in = [], config.in_channels
    for b, (n, c) in enumerate(config.blocks, 1):
        for l in range(1, n + 1):
            out.append((f"b{b}l{l}/kernel", (c, c_in, 3, 3)))
            out.append((f"b{b}l{l}/bias", (c,)))
            c_in = c
    return out


def build_feature_net(config=None, seed=0):
    """Create the frozen net; its tensors never require gradients."""
    config = (config or FeatureNetConfig()).validate()
    shapes = _shapes(config)
    if config.weights_source == "file":
        header, arrays = checkpoint.load(config.weights_path)
        tensors = {}
        for name, shape in shapes:
            if name not in arrays:
                raise checkpoint.CheckpointError(f"weights file lacks {name!r}")
            if tuple(arrays[name].shape) != shape:
                raise checkpoint.CheckpointError(f"{name!r} has shape {arrays[name].shape}, expected {shape}")
            tensors[name] = Tensor(arrays[name], name=name)
        return NetworkParams(config, tensors)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in shapes:
        if name.endswith("/kernel"):
            fan_in = shape[1] * 9
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = Tensor(arr, name=name)
    return NetworkParams(config, tensors)


def save_feature_net(net, path):
    checkpoint.save(path, {k: t.data for k, t in net.items()}, {"kind": "feature_net"})


def extract_features(net, x, selection):
    """Activations of the requested ``(block, layer)`` pairs for image ``x`` [3,H,W]."""
    cfg = net.config
    selection = [tuple(s) for s in selection]
    known = set(cfg.layer_names())
    for key in selection:
        if key not in known:
            raise ValueError(f"feature layer {key} does not exist")
    factor = 2 ** len(cfg.blocks)
    if x.shape[1] % factor or x.shape[2] % factor:
        raise ValueError(f"input {x.shape[1]}x{x.shape[2]} must be divisible by {factor}")
    last = max(selection) if selection else (0, 0)
    out = {}
    h = x
    t = net.tensors
    for b, (n, _) in enumerate(cfg.blocks, 1):
        if b > last[0]:
            break
        for l in range(1, n + 1):
            h = conv2d(h, t[f"b{b}l{l}/kernel"], t[f"b{b}l{l}/bias"], 1, 1)
            h = activation(h, "leaky_relu", cfg.slope)
            if (b, l) in selection:
                out[(b, l)] = h
            if (b, l) == last:
                return out
        h = avg_pool2d(h, 2)
    return out
