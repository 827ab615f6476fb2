"""Generator (U-Net encoder/decoder with noise code) and conditional discriminator."""

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import (
    RunningStats,
    Tensor,
    activation,
    affine,
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    reshape,
)

KERNEL = 4
STRIDE = 2
PAD = 1
INIT_STD = 0.02


def _check_pow2(n, what):
    if n < 1 or n & (n - 1):
        raise ValueError(f"{what} must be a power of two, got {n}")


def _filters(base, cap, depth):
    return [min(base * 2 ** i, cap) for i in range(depth)]


@dataclass
class GeneratorConfig:
    image_size: int = 512
    in_channels: int = 1
    out_channels: int = 3
    base_filters: int = 32
    max_filters: int = 512
    z_dim: int = 400
    depth: int = 6
    noise_channels: int = 0  # 0 -> half the bottleneck filters
    noise_at: str = "bottleneck"  # "bottleneck" | "input"
    skips: bool = True
    slope: float = 0.2

    @classmethod
    def full(cls, image_size=512):
        return cls(image_size=image_size, depth=int(math.log2(image_size // 8)))

    @classmethod
    def desk(cls, image_size=64, **kw):
        kw = {"depth": int(math.log2(image_size)) - 2, "base_filters": 8, "max_filters": 64, "z_dim": 16, **kw}
        return cls(image_size=image_size, **kw)

    def validate(self):
        _check_pow2(self.image_size, "image_size")
        if self.depth < 1 or self.image_size >> self.depth < 4:
            raise ValueError(f"depth {self.depth} leaves a bottleneck below 4x4 for size {self.image_size}")
        if self.noise_at not in ("bottleneck", "input"):
            raise ValueError(f"noise_at must be 'bottleneck' or 'input', got {self.noise_at!r}")
        return self

    @property
    def encoder_filters(self):
        return _filters(self.base_filters, self.max_filters, self.depth)

    @property
    def bottleneck_size(self):
        return self.image_size >> self.depth

    @property
    def noise_maps(self):
        return self.noise_channels or max(self.encoder_filters[-1] // 2, 1)


@dataclass
class DiscriminatorConfig:
    image_size: int = 512
    in_channels: int = 4
    base_filters: int = 32
    max_filters: int = 512
    depth: int = 5
    slope: float = 0.2

    @classmethod
    def full(cls, image_size=512):
        return cls(image_size=image_size)

    @classmethod
    def desk(cls, image_size=64, **kw):
        kw = {"depth": min(4, int(math.log2(image_size)) - 2), "base_filters": 8, "max_filters": 64, **kw}
        return cls(image_size=image_size, **kw)

    def validate(self):
        _check_pow2(self.image_size, "image_size")
        if self.depth < 1 or self.image_size >> self.depth < 1:
            raise ValueError(f"depth {self.depth} too deep for size {self.image_size}")
        return self

    @property
    def filters(self):
        return _filters(self.base_filters, self.max_filters, self.depth)


class NetworkParams:
    """Named parameter tensors of one network plus its batch-norm running stats."""

    def __init__(self, config, tensors=None, buffers=None):
        self.config = config
        self.tensors = dict(tensors or {})
        self.buffers = dict(buffers or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def num_parameters(self):
        return sum(t.size for t in self.tensors.values())

    def requires_grad_(self, flag=True):
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def grads(self):
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.tensors.items()}

    def to_arrays(self, prefix=""):
        out = {prefix + k: t.data for k, t in self.tensors.items()}
        for k, st in self.buffers.items():
            out[f"{prefix}{k}/running_mean"] = st.mean
            out[f"{prefix}{k}/running_var"] = st.var
        return out

    def load_arrays(self, arrays, prefix=""):
        """Overwrite values in place from ``arrays``; names and shapes must match exactly."""
        for k, t in self.tensors.items():
            arr = _fetch(arrays, prefix + k, t.shape)
            t.data = arr.astype(t.data.dtype).copy()
        for k, st in self.buffers.items():
            st.mean[...] = _fetch(arrays, f"{prefix}{k}/running_mean", st.mean.shape)
            st.var[...] = _fetch(arrays, f"{prefix}{k}/running_var", st.var.shape)
        return self

    def copy(self):
        tensors = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()}
        buffers = {k: RunningStats(st.mean.copy(), st.var.copy(), st.momentum) for k, st in self.buffers.items()}
        return NetworkParams(self.config, tensors, buffers)


def _fetch(arrays, name, shape):
    if name not in arrays:
        raise ValueError(f"missing tensor {name!r}")
    arr = arrays[name]
    if tuple(arr.shape) != tuple(shape):
        raise ValueError(f"tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}")
    return arr


def truncated_normal(rng, shape, std=INIT_STD, bound=None):
    """Zero-mean normal samples, redrawing any outside ``[-bound, bound]`` (default 2 std)."""
    bound = 2 * std if bound is None else bound
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(np.float32)


def _generator_layout(cfg):
    """Ordered (name, shape) of every generator parameter plus the BN layer names."""
    f = cfg.encoder_filters
    k = KERNEL
    shapes, bn = [], []
    size = cfg.image_size
    c_prev = cfg.in_channels
    if cfg.noise_at == "input":
        shapes += [("noise/weight", (size * size, cfg.z_dim)), ("noise/bias", (size * size,))]
        c_prev += 1
    for i in range(cfg.depth):
        shapes += [(f"enc{i}/kernel", (f[i], c_prev, k, k)), (f"enc{i}/bias", (f[i],))]
        bn.append((f"enc{i}", f[i]))
        c_prev = f[i]
    if cfg.noise_at == "bottleneck":
        s = cfg.bottleneck_size
        n = cfg.noise_maps * s * s
        shapes += [("noise/weight", (n, cfg.z_dim)), ("noise/bias", (n,))]
        c_prev += cfg.noise_maps
    for d in range(cfg.depth - 1, -1, -1):
        if d < cfg.depth - 1:
            c_prev = f[d] * (2 if cfg.skips else 1)
        c_out = f[d - 1] if d > 0 else cfg.out_channels
        shapes += [(f"dec{d}/kernel", (c_prev, c_out, k, k)), (f"dec{d}/bias", (c_out,))]
        if d > 0:
            bn.append((f"dec{d}", c_out))
    return shapes, bn


def _discriminator_layout(cfg):
    f = cfg.filters
    shapes, bn = [], []
    c_prev = cfg.in_channels
    for i in range(cfg.depth):
        shapes += [(f"conv{i}/kernel", (f[i], c_prev, KERNEL, KERNEL)), (f"conv{i}/bias", (f[i],))]
        if i > 0:
            bn.append((f"conv{i}", f[i]))
        c_prev = f[i]
    s = cfg.image_size >> cfg.depth
    shapes += [("head/weight", (1, c_prev * s * s)), ("head/bias", (1,))]
    return shapes, bn


def layout(config):
    if isinstance(config, GeneratorConfig):
        return _generator_layout(config.validate())
    if isinstance(config, DiscriminatorConfig):
        return _discriminator_layout(config.validate())
    raise TypeError(f"no layout for {type(config).__name__}")


def param_shapes(config):
    """Every parameter name and shape (batch-norm scale/shift included)."""
    shapes, bn = layout(config)
    out = dict(shapes)
    for name, c in bn:
        out[f"{name}/bn_gamma"] = (c,)
        out[f"{name}/bn_beta"] = (c,)
    return out


def init_params(config, seed):
    """Weights ~ N(0, 0.02) truncated to [-0.04, 0.04]; biases 0; BN scale 1, shift 0."""
    shapes, bn = layout(config)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in shapes:
        if name.endswith(("/kernel", "/weight")):
            arr = truncated_normal(rng, shape)
        else:
            arr = np.zeros(shape, np.float32)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    buffers = {}
    for name, c in bn:
        tensors[f"{name}/bn_gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True, name=f"{name}/bn_gamma")
        tensors[f"{name}/bn_beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True, name=f"{name}/bn_beta")
        buffers[name] = RunningStats.fresh(c)
    return NetworkParams(config, tensors, buffers)


def _norm_act(params, name, h, mode, slope):
    t = params.tensors
    h = batch_norm(h, t[f"{name}/bn_gamma"], t[f"{name}/bn_beta"], mode=mode, state=params.buffers[name])
    return activation(h, "leaky_relu", slope)


def generator_forward(params, y, z, mode="train", trace=None):
    """Map a segmentation ``y`` [1,H,W] and noise code ``z`` to an image in [-1,1]^{3xHxW}.

    ``trace``, if a list, receives the spatial shape after each layer.
    """
    cfg = params.config
    t = params.tensors
    s = cfg.image_size
    if y.shape != (cfg.in_channels, s, s):
        raise ValueError(f"generator expects input {(cfg.in_channels, s, s)}, got {y.shape}")
    if z.shape != (cfg.z_dim,):
        raise ValueError(f"generator expects a noise code of length {cfg.z_dim}, got {z.shape}")
    h = y
    if cfg.noise_at == "input":
        h = concat_channels(h, reshape(affine(z, t["noise/weight"], t["noise/bias"]), (1, s, s)))
    skips = []
    for i in range(cfg.depth):
        h = conv2d(h, t[f"enc{i}/kernel"], t[f"enc{i}/bias"], STRIDE, PAD)
        h = _norm_act(params, f"enc{i}", h, mode, cfg.slope)
        skips.append(h)
        if trace is not None:
            trace.append(("enc", i, h.shape))
    if cfg.noise_at == "bottleneck":
        b = cfg.bottleneck_size
        code = reshape(affine(z, t["noise/weight"], t["noise/bias"]), (cfg.noise_maps, b, b))
        h = concat_channels(h, code)
    for d in range(cfg.depth - 1, -1, -1):
        if d < cfg.depth - 1 and cfg.skips:
            h = concat_channels(h, skips[d])
        h = conv_transpose2d(h, t[f"dec{d}/kernel"], t[f"dec{d}/bias"], STRIDE, PAD)
        h = _norm_act(params, f"dec{d}", h, mode, cfg.slope) if d > 0 else activation(h, "tanh")
        if trace is not None:
            trace.append(("dec", d, h.shape))
    return h


def discriminator_forward(params, X, y, mode="train", trace=None):
    """Probability in (0, 1) that ``X`` is a real image for segmentation ``y``."""
    cfg = params.config
    t = params.tensors
    s = cfg.image_size
    if X.shape[1:] != (s, s) or y.shape[1:] != (s, s):
        raise ValueError(f"discriminator expects {s}x{s} inputs, got {X.shape} and {y.shape}")
    if X.shape[0] + y.shape[0] != cfg.in_channels:
        raise ValueError(f"discriminator expects {cfg.in_channels} channels in total")
    h = concat_channels(X, y)
    for i in range(cfg.depth):
        h = conv2d(h, t[f"conv{i}/kernel"], t[f"conv{i}/bias"], STRIDE, PAD)
        if i > 0:
            h = _norm_act(params, f"conv{i}", h, mode, cfg.slope)
        else:
            h = activation(h, "leaky_relu", cfg.slope)
        if trace is not None:
            trace.append(("conv", i, h.shape))
    logit = affine(reshape(h, (h.size,)), t["head/weight"], t["head/bias"])
    return reshape(activation(logit, "sigmoid"), ())


def sample_noise(z_dim, std, rng):
    """i.i.d. N(0, std^2) noise code drawn from the generator ``rng``."""
    if std <= 0:
        raise ValueError("noise std must be > 0")
    return Tensor(rng.normal(0.0, std, size=z_dim))
