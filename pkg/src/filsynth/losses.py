"""Objective terms for both training variants, all differentiable on the tape."""

from dataclasses import dataclass, field

import numpy as np

from .perceptual import extract_features
from .tensor_core import clamp, log, matmul, no_grad, reshape, square, sub, tabs, transpose, tsum
from .tensor_core.tensor import record

LOG_CLAMP = 1e-8


def _default_block_weights():
    return {1: 0.2, 2: 0.2, 3: 0.2, 4: 0.2, 5: 0.2}


@dataclass
class LossWeights:
    lambda_dev: float = 100.0
    w_cont: float = 1.0
    w_sty: float = 10.0
    w_tv: float = 100.0
    block_weights: dict = field(default_factory=_default_block_weights)
    dev_reduction: str = "mean"  # "mean" | "sum"

    def __post_init__(self):
        self.block_weights = {int(k): float(v) for k, v in self.block_weights.items()}
        vals = [self.lambda_dev, self.w_cont, self.w_sty, self.w_tv, *self.block_weights.values()]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if self.dev_reduction not in ("mean", "sum"):
            raise ValueError(f"dev_reduction must be 'mean' or 'sum', got {self.dev_reduction!r}")


def _safe_log(p):
    return log(clamp(p, LOG_CLAMP, 1 - LOG_CLAMP))


def dev_loss(x, x_hat, reduction="mean"):
    """L1 deviation between the real image and the phantom."""
    if x.shape != x_hat.shape:
        raise ValueError(f"dev_loss: shape mismatch {x.shape} vs {x_hat.shape}")
    total = tsum(tabs(sub(x, x_hat)))
    return total * (1.0 / x.size) if reduction == "mean" else total


def generator_gan_loss(d_fake):
    """Non-saturating generator term ``-log D(G(y, z), y)``."""
    return -_safe_log(d_fake)


def generator_total_loss_gan(d_fake, x, x_hat, weights=None):
    w = weights or LossWeights()
    return generator_gan_loss(d_fake) + dev_loss(x, x_hat, w.dev_reduction) * w.lambda_dev


def discriminator_loss(d_real, d_fake):
    """``log D(x, y) + log(1 - D(G(y, z), y))``, to be maximized."""
    return _safe_log(d_real) + _safe_log(1.0 - d_fake)


def gram(features):
    """Inner products between all pairs of feature maps of one layer.

    Products of 32-bit values are exact in 64 bits, so accumulating there
    makes the result independent of summation order after rounding back.
    """
    c = features.shape[0]
    if c == 0:
        raise ValueError("gram needs at least one feature map")
    if features.data.dtype == np.float32:
        f = features.data.reshape(c, -1).astype(np.float64)
        out = (f @ f.T).astype(np.float32)
        fd = features.data.reshape(c, -1)

        def backward(g):
            return (((g + g.T) @ fd).reshape(features.shape),)

        return record(out, (features,), backward)
    flat = reshape(features, (c, -1))
    return matmul(flat, transpose(flat))


def _frobenius_sq(a, b):
    return tsum(square(sub(a, b)))


def _check_selection(a, b):
    if set(a) != set(b):
        raise ValueError(f"feature selections differ: {sorted(a)} vs {sorted(b)}")


def style_loss(feat_style, feat_hat, weights=None):
    """Sum over selected layers of ``w_block / (W*H) * ||Gram(style) - Gram(hat)||_F^2``."""
    w = weights or LossWeights()
    _check_selection(feat_style, feat_hat)
    total = None
    for key in sorted(feat_hat):
        block = key[0]
        f_s, f_h = feat_style[key], feat_hat[key]
        area = f_h.shape[1] * f_h.shape[2]
        term = _frobenius_sq(gram(f_h), gram(f_s)) * (w.block_weights.get(block, 0.0) / area)
        total = term if total is None else total + term
    return total


def content_loss(feat_x, feat_hat):
    """Sum over selected layers of ``1 / (W*H) * ||phi(x) - phi(x_hat)||_F^2``."""
    _check_selection(feat_x, feat_hat)
    total = None
    for key in sorted(feat_hat):
        f_h = feat_hat[key]
        area = f_h.shape[1] * f_h.shape[2]
        term = _frobenius_sq(f_h, feat_x[key]) * (1.0 / area)
        total = term if total is None else total + term
    return total


def tv_loss(x_hat):
    """Squared differences between vertical and horizontal neighbours, summed over channels."""
    d = x_hat.data
    dv = d[:, 1:, :] - d[:, :-1, :]
    dh = d[:, :, 1:] - d[:, :, :-1]
    val = np.asarray((dv * dv).sum(dtype=np.float64) + (dh * dh).sum(dtype=np.float64), dtype=d.dtype)

    def backward(g):
        gx = np.zeros_like(d)
        gx[:, 1:, :] += 2 * dv
        gx[:, :-1, :] -= 2 * dv
        gx[:, :, 1:] += 2 * dh
        gx[:, :, :-1] -= 2 * dh
        return (g * gx,)

    return record(val, (x_hat,), backward)


def style_transfer_terms(x, x_s, x_hat, feature_net, weights=None, feat_x=None, feat_style=None):
    """The three perceptual terms as a dict: ``sty``, ``cont``, ``tv``.

    ``feat_x`` / ``feat_style`` may be passed to reuse already extracted
    target features; the targets are constants either way.
    """
    cfg = feature_net.config
    sel = sorted(set(cfg.style_selection) | set(cfg.content_selection))
    with no_grad():
        if feat_style is None:
            feat_style = extract_features(feature_net, x_s, cfg.style_selection)
        if feat_x is None:
            feat_x = extract_features(feature_net, x, cfg.content_selection)
    feats = extract_features(feature_net, x_hat, sel)
    return {
        "sty": style_loss({k: feat_style[k] for k in cfg.style_selection},
                          {k: feats[k] for k in cfg.style_selection}, weights),
        "cont": content_loss({k: feat_x[k] for k in cfg.content_selection},
                             {k: feats[k] for k in cfg.content_selection}),
        "tv": tv_loss(x_hat),
    }


def combine_style_terms(terms, weights=None):
    w = weights or LossWeights()
    return terms["cont"] * w.w_cont + terms["sty"] * w.w_sty + terms["tv"] * w.w_tv


def style_transfer_loss(x, x_s, x_hat, feature_net, weights=None, **cached):
    """``w_cont * l_cont + w_sty * l_sty + w_tv * l_tv``."""
    terms = style_transfer_terms(x, x_s, x_hat, feature_net, weights, **cached)
    return combine_style_terms(terms, weights)


def generator_total_loss_style(d_fake, x, x_s, x_hat, feature_net, weights=None, **cached):
    return generator_gan_loss(d_fake) + style_transfer_loss(x, x_s, x_hat, feature_net, weights, **cached)
