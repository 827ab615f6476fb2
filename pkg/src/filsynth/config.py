"""Flat ``section.key = value`` run configuration.

Values are JSON literals; bare words that are not valid JSON are taken as
strings, so ``dataset.root = /data/drive`` works without quotes.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .data import DatasetSpec
from .evaluation import SegmenterConfig
from .nets import DiscriminatorConfig, GeneratorConfig
from .perceptual import FeatureNetConfig
from .trainer import TrainConfig

SCALES = ("desk", "full")
_NESTED = ("loss_weights", "generator", "discriminator", "feature_net")
_HIDDEN = {("train", n) for n in _NESTED} | {("loss", "lambda_dev")}  # lambda_dev lives in train


@dataclass
class RunSection:
    scale: str = "desk"  # "desk" | "full"
    style_image: str = ""


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(root=""))
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)

    def sections(self):
        return {
            "run": self.run,
            "train": self.train,
            "loss": self.train.loss_weights,
            "generator": self.train.generator,
            "discriminator": self.train.discriminator,
            "feature_net": self.train.feature_net,
            "dataset": self.dataset,
            "segmenter": self.segmenter,
        }


def defaults(scale="desk", target_size=None):
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale!r}")
    size = target_size or (64 if scale == "desk" else 512)
    if scale == "desk":
        train = TrainConfig.desk(size)
    else:
        train = TrainConfig(generator=GeneratorConfig.full(size), discriminator=DiscriminatorConfig.full(size),
                            feature_net=FeatureNetConfig.full())
    return RunConfig(RunSection(scale=scale), train, DatasetSpec(root="", target_size=size), SegmenterConfig())


def _encode(value):
    if isinstance(value, dict):
        value = {str(k): v for k, v in value.items()}
    return json.dumps(value)


def _decode(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def _fields(obj):
    return {f.name for f in dataclasses.fields(obj)}


def flatten(cfg):
    """``{"section.key": value}`` for every scalar setting."""
    out = {}
    for name, section in cfg.sections().items():
        for f in dataclasses.fields(section):
            if (name, f.name) in _HIDDEN:
                continue
            out[f"{name}.{f.name}"] = getattr(section, f.name)
    return out


def dumps(cfg):
    return "".join(f"{k} = {_encode(v)}\n" for k, v in sorted(flatten(cfg).items()))


def parse(text):
    """Parse config text into an ordered ``{key: value}`` mapping."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'section.key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _decode(value)
    return out


def _coerce(current, value, key):
    if isinstance(current, bool):
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        if not isinstance(value, bool):
            raise ValueError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise ValueError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        return value if isinstance(value, str) else json.dumps(value)
    return value


def apply(cfg, settings):
    """Return a copy of ``cfg`` with ``settings`` applied; unknown keys raise ``ValueError``."""
    grouped = {}
    for key, value in settings.items():
        section, _, name = key.partition(".")
        if section not in cfg.sections() or not name:
            raise ValueError(f"unknown config key {key!r}")
        grouped.setdefault(section, {})[name] = value
    secs = dict(cfg.sections())
    for section, values in grouped.items():
        obj = secs[section]
        for name, value in values.items():
            if name not in _fields(obj) or (section, name) in _HIDDEN:
                raise ValueError(f"unknown config key '{section}.{name}'")
            values[name] = _coerce(getattr(obj, name), value, f"{section}.{name}")
        secs[section] = dataclasses.replace(obj, **values)
    train = dataclasses.replace(
        secs["train"], loss_weights=secs["loss"], generator=secs["generator"],
        discriminator=secs["discriminator"], feature_net=secs["feature_net"],
    )
    return RunConfig(secs["run"], train, secs["dataset"], secs["segmenter"])


def resolve(file_text="", overrides=None):
    """Defaults for the requested scale and size, then the file, then ``overrides``."""
    settings = parse(file_text) if file_text else {}
    settings.update(overrides or {})
    scale = settings.get("run.scale", "desk")
    size = settings.get("dataset.target_size")
    cfg = defaults(scale, int(size) if size is not None else None)
    cfg = apply(cfg, settings)
    cfg.train.validate()
    cfg.segmenter.validate()
    if cfg.dataset.target_size != cfg.train.generator.image_size:
        raise ValueError(f"dataset.target_size {cfg.dataset.target_size} differs from "
                         f"generator.image_size {cfg.train.generator.image_size}")
    return cfg

