"""Alternating generator / discriminator optimization for both training modes."""

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .losses import (
    LossWeights,
    combine_style_terms,
    dev_loss,
    discriminator_loss,
    generator_gan_loss,
    style_transfer_terms,
)
from .nets import (
    DiscriminatorConfig,
    GeneratorConfig,
    NetworkParams,
    discriminator_forward,
    generator_forward,
    init_params,
    param_shapes,
    sample_noise,
)
from .perceptual import FeatureNetConfig, build_feature_net, extract_features
from .tensor_core import Tensor, backward, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    lr_g: float = 0.0002
    lr_d: float = 0.0001
    g_steps_per_d: int = 2
    lambda_dev: float = 100.0
    noise_std_train: float = 0.001
    noise_std_test: float = 1.0
    seed: int = 0
    mode: str = "gan"  # "gan" | "sgan"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0  # steps; 0 -> final checkpoint only
    max_steps: int = 0  # 0 -> epochs * dataset size
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    feature_net: FeatureNetConfig = field(default_factory=FeatureNetConfig.full)

    @classmethod
    def desk(cls, image_size=64, **kw):
        kw.setdefault("generator", GeneratorConfig.desk(image_size))
        kw.setdefault("discriminator", DiscriminatorConfig.desk(image_size))
        kw.setdefault("feature_net", FeatureNetConfig())
        return cls(**kw)

    def validate(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be > 0")
        if self.g_steps_per_d < 1:
            raise ValueError("g_steps_per_d must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only mini-batches of size 1 are supported")
        if self.mode not in ("gan", "sgan"):
            raise ValueError(f"mode must be 'gan' or 'sgan', got {self.mode!r}")
        if self.generator.image_size != self.discriminator.image_size:
            raise ValueError("generator and discriminator image sizes differ")
        self.generator.validate()
        self.discriminator.validate()
        return self

    @property
    def weights(self):
        """Loss weights with ``lambda_dev`` taken from this config."""
        return dataclasses.replace(self.loss_weights, lambda_dev=self.lambda_dev)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["loss_weights"] = LossWeights(**d["loss_weights"])
        d["generator"] = GeneratorConfig(**d["generator"])
        d["discriminator"] = DiscriminatorConfig(**d["discriminator"])
        d["feature_net"] = FeatureNetConfig(**d["feature_net"])
        return cls(**d)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params, grads, moments, lr, beta1=0.5, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of ``params`` (name -> Tensor), in place."""
    moments.t += 1
    c1 = 1.0 - beta1 ** moments.t
    c2 = 1.0 - beta2 ** moments.t
    for k, p in params.items():
        g = grads[k]
        m = moments.m[k] = beta1 * moments.m[k] + (1 - beta1) * g
        v = moments.v[k] = beta2 * moments.v[k] + (1 - beta2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return params, moments


def sgd_step(params, grads, lr):
    """Gradient ascent step ``p <- p + lr * grad`` on an objective to maximize."""
    for k, p in params.items():
        p.data = (p.data + lr * grads[k]).astype(p.data.dtype)
    return params


def _seeds(seed):
    children = np.random.SeedSequence(seed).spawn(4)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


@dataclass
class TrainState:
    config: TrainConfig
    gen: NetworkParams
    disc: NetworkParams
    adam: AdamState
    rng: np.random.Generator
    feature_net: NetworkParams = None
    step: int = 0
    epoch: int = 0
    order: list = field(default_factory=list)
    position: int = 0
    log: list = field(default_factory=list)
    run_dir: str = None
    cache: dict = field(default_factory=dict, repr=False)


def init_state(config):
    config.validate()
    s_gen, s_disc, s_feat, s_stream = _seeds(config.seed)
    gen = init_params(config.generator, s_gen)
    disc = init_params(config.discriminator, s_disc)
    feat = build_feature_net(config.feature_net, s_feat) if config.mode == "sgan" else None
    return TrainState(config, gen, disc, AdamState.zeros_like(gen), np.random.default_rng(s_stream), feat)


def _finite(metrics):
    return all(math.isfinite(v) for v in metrics.values())


def _content_features(state, pair, x):
    key = ("x", pair.id, id(pair))
    if key not in state.cache:
        with no_grad():
            state.cache[key] = extract_features(state.feature_net, x, state.config.feature_net.content_selection)
    return state.cache[key]


def _style_features(state, style):
    key = ("style", style.id, id(style))
    if key not in state.cache:
        with no_grad():
            state.cache[key] = extract_features(
                state.feature_net, Tensor(style.image), state.config.feature_net.style_selection)
    return state.cache[key]


def train_step(state, pair, style=None):
    """``g_steps_per_d`` generator updates, then one discriminator ascent step.

    Returns the per-term metrics (generator terms averaged over its updates).
    """
    cfg = state.config
    sgan = cfg.mode == "sgan"
    if sgan != (style is not None):
        raise ValueError("a style image is required in sgan mode and only there")
    weights = cfg.weights
    x = Tensor(pair.image)
    y = Tensor(pair.segmentation)
    gen, disc = state.gen, state.disc
    acc = {}

    disc.requires_grad_(False)
    gen.requires_grad_(True)
    for _ in range(cfg.g_steps_per_d):
        z = sample_noise(cfg.generator.z_dim, cfg.noise_std_train, state.rng)
        x_hat = generator_forward(gen, y, z, "train")
        d_fake = discriminator_forward(disc, x_hat, y, "train")
        g_gan = generator_gan_loss(d_fake)
        if sgan:
            terms = style_transfer_terms(
                x, None, x_hat, state.feature_net, weights,
                feat_x=_content_features(state, pair, x), feat_style=_style_features(state, style))
            loss = g_gan + combine_style_terms(terms, weights)
            parts = {"loss_sty": terms["sty"], "loss_cont": terms["cont"], "loss_tv": terms["tv"]}
        else:
            dev = dev_loss(x, x_hat, weights.dev_reduction)
            loss = g_gan + dev * weights.lambda_dev
            parts = {"loss_dev": dev}
        backward(loss, params=gen.values())
        adam_step(gen.tensors, gen.grads(), state.adam, cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        vals = {"loss_g_gan": g_gan, **parts, "loss_g": loss}
        for k, v in vals.items():
            acc[k] = acc.get(k, 0.0) + v.item() / cfg.g_steps_per_d

    gen.requires_grad_(False)
    disc.requires_grad_(True)
    z = sample_noise(cfg.generator.z_dim, cfg.noise_std_train, state.rng)
    with no_grad():
        x_hat = generator_forward(gen, y, z, "train")
    d_real = discriminator_forward(disc, x, y, "train")
    d_fake = discriminator_forward(disc, x_hat, y, "train")
    objective = discriminator_loss(d_real, d_fake)
    backward(objective, params=disc.values())
    sgd_step(disc.tensors, disc.grads(), cfg.lr_d)
    gen.requires_grad_(True)

    metrics = {**acc, "loss_d": objective.item(), "d_real": d_real.item(), "d_fake": d_fake.item()}
    if not _finite(metrics):
        _dump(state, metrics)
        raise TrainingDiverged(f"non-finite loss at step {state.step + 1}: {metrics}")
    return state, metrics


def _dump(state, metrics):
    if not state.run_dir:
        return
    path = os.path.join(state.run_dir, "diverged.fstc")
    save_checkpoint(state, path)
    with open(os.path.join(state.run_dir, "diverged.json"), "w") as fh:
        json.dump({"step": state.step + 1, "metrics": {k: repr(v) for k, v in metrics.items()}}, fh)
    log.error("training diverged; state dumped to %s", path)


def train(dataset, config=None, style=None, run_dir=None, state=None):
    """Run (or resume, given ``state``) training; returns the final :class:`TrainState`.

    With ``run_dir`` set, appends one JSON record per step to ``losses.jsonl``
    and writes checkpoints under ``checkpoints/``.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    state = state or init_state(config)
    cfg = state.config
    if cfg.mode == "sgan" and style is None:
        raise ValueError("sgan mode needs a style image")
    n = len(dataset)
    total = cfg.max_steps or cfg.epochs * n
    log_fh = None
    if run_dir:
        state.run_dir = run_dir
        os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
        log_fh = open(os.path.join(run_dir, "losses.jsonl"), "a")
    try:
        while state.step < total:
            if not state.order:
                state.order = [int(i) for i in state.rng.permutation(n)]
                state.position = 0
            t0 = time.perf_counter()
            _, metrics = train_step(state, dataset[state.order[state.position]],
                                    style if cfg.mode == "sgan" else None)
            epoch = state.epoch
            state.step += 1
            state.position += 1
            if state.position == n:
                state.epoch += 1
                state.order = []
                state.position = 0
            rec = {"step": state.step, "epoch": epoch, **metrics,
                   "wall_ms": round((time.perf_counter() - t0) * 1000, 3)}
            state.log.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if run_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, os.path.join(run_dir, "checkpoints", f"step-{state.step:06d}.fstc"))
    finally:
        if log_fh:
            log_fh.close()
    if run_dir:
        save_checkpoint(state, os.path.join(run_dir, "checkpoints", "final.fstc"))
    return state


# ------------------------------------------------------------ checkpoints

def state_to_container(state):
    arrays = {}
    arrays.update(state.gen.to_arrays("generator/"))
    arrays.update(state.disc.to_arrays("discriminator/"))
    arrays.update({f"adam_m/{k}": v for k, v in state.adam.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.adam.v.items()})
    header = {
        "kind": "train_state",
        "config": state.config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "order": state.order,
        "position": state.position,
        "adam_t": state.adam.t,
        "rng": state.rng.bit_generator.state,
    }
    return header, arrays


def save_checkpoint(state, path):
    header, arrays = state_to_container(state)
    checkpoint.save(path, arrays, header)


def load_checkpoint(path):
    """Rebuild a :class:`TrainState` that continues exactly where ``path`` left off."""
    header, arrays = checkpoint.load(path)
    if header.get("kind") != "train_state":
        raise checkpoint.CheckpointError(f"{path} is not a training checkpoint")
    config = TrainConfig.from_dict(header["config"])
    state = init_state(config)
    try:
        state.gen.load_arrays(arrays, "generator/")
        state.disc.load_arrays(arrays, "discriminator/")
        for k in state.adam.m:
            state.adam.m[k] = arrays[f"adam_m/{k}"].copy()
            state.adam.v[k] = arrays[f"adam_v/{k}"].copy()
    except (KeyError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"checkpoint does not match its config: {exc}") from exc
    state.adam.t = header["adam_t"]
    state.step, state.epoch = header["step"], header["epoch"]
    state.order, state.position = list(header["order"]), header["position"]
    state.rng.bit_generator.state = header["rng"]
    return state


def load_generator(path):
    """Generator parameters (and config) from a training checkpoint."""
    header, arrays = checkpoint.load(path)
    if "config" not in header:
        raise checkpoint.CheckpointError(f"{path} carries no config")
    config = TrainConfig.from_dict(header["config"])
    expected = param_shapes(config.generator)
    for name, shape in expected.items():
        got = arrays.get("generator/" + name)
        if got is None or tuple(got.shape) != tuple(shape):
            raise checkpoint.CheckpointError(f"checkpoint tensor generator/{name} does not match its config")
    gen = init_params(config.generator, 0)
    gen.load_arrays(arrays, "generator/")
    gen.requires_grad_(False)
    return gen, config


def synthesize(gen_params, y, count, seed, noise_std=1.0):
    """``count`` phantoms for segmentation ``y``, each from a fresh noise code."""
    rng = np.random.default_rng(seed)
    y = y if isinstance(y, Tensor) else Tensor(y)
    out = []
    with no_grad():
        for _ in range(count):
            z = sample_noise(gen_params.config.z_dim, noise_std, rng)
            out.append(generator_forward(gen_params, y, z, "infer"))
    return out
