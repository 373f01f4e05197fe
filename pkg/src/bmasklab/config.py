"""Flat key=value experiment configuration with dotted keys.

Every key has a default; unknown keys are rejected by name. '#' starts a
comment; blank lines are ignored. The effective configuration is echoed to
the output directory so any artifact can be reproduced from its echo plus
the checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .fpn import BackboneConfig
from .heads import HeadConfig
from .losses import LossConfig
from .rng import mix64
from .synthdata import DatasetSpec
from .traineval import TrainConfig

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parse_bool(v):
    lv = v.lower()
    if lv in _TRUE:
        return True
    if lv in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _parse_int_list(v):
    return tuple(int(x) for x in v.split(",") if x.strip())


def _choice(*options):
    def parse(v):
        if v not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return v
    return parse


# key -> (default string, parser)
SCHEMA = {
    "seed": ("7", int),
    "output.dir": ("out", str),
    "dataset.train_count": ("500", int),
    "dataset.val_count": ("100", int),
    "dataset.height": ("128", int),
    "dataset.width": ("128", int),
    "dataset.max_overlap_iou": ("0.3", float),
    "dataset.noise": ("0.04", float),
    "dataset.file_train": ("", str),
    "dataset.file_val": ("", str),
    "dataset.save_train": ("", str),
    "dataset.save_val": ("", str),
    "backbone.stem_channels": ("32,64,128,256", _parse_int_list),
    "backbone.channels": ("256", int),
    "head.variant": ("bmask", _choice("plain", "bmask", "lmh", "sobel")),
    "head.channels": ("256", int),
    "head.num_classes": ("3", int),
    "head.m2b_fusion": ("true", _parse_bool),
    "head.b2m_fusion": ("true", _parse_bool),
    "head.boundary_source": ("p2", _choice("p2", "same")),
    "head.boundary_roi_size": ("28", int),
    "head.loss.kind": ("dice_bce", _choice("bce", "weighted_bce", "dice", "dice_bce")),
    "head.loss.lambda": ("1.0", float),
    "head.loss.epsilon": ("1.0", float),
    "head.loss.target": ("boundary", _choice("boundary", "mask", "none")),
    "train.iterations": ("2000", int),
    "train.base_lr": ("0.02", float),
    "train.batch_size": ("2", int),
    "train.momentum": ("0.9", float),
    "train.weight_decay": ("0.0001", float),
    "eval.checkpoint": ("", str),
    "visualize.count": ("4", int),
    "ablate.matrix": ("fusion", _choice("fusion", "loss", "target", "roi", "compute")),
    "ablate.seeds": ("1", int),
}

# seed tags for deriving per-component streams from the global seed
_TAG_TRAIN_DATA = 0x7261696E
_TAG_VAL_DATA = 0x76616C64
_TAG_MODEL = 0x6D6F6465
_TAG_SAMPLER = 0x73616D70


class ExperimentConfig:
    """Validated key -> typed value map with spec-object builders."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def dataset_spec(self, split: str) -> DatasetSpec:
        count = self.values[f"dataset.{split}_count"]
        tag = _TAG_TRAIN_DATA if split == "train" else _TAG_VAL_DATA
        return DatasetSpec(
            count=count,
            height=self.values["dataset.height"],
            width=self.values["dataset.width"],
            seed=mix64(self.seed, tag),
            max_overlap_iou=self.values["dataset.max_overlap_iou"],
            noise=self.values["dataset.noise"],
        ).validate()

    def backbone_cfg(self) -> BackboneConfig:
        return BackboneConfig(
            stem_channels=self.values["backbone.stem_channels"],
            channels=self.values["backbone.channels"],
            seed=mix64(self.seed, _TAG_MODEL),
        ).validate()

    def head_cfg(self) -> HeadConfig:
        loss = LossConfig(
            kind=self.values["head.loss.kind"],
            lam=self.values["head.loss.lambda"],
            epsilon=self.values["head.loss.epsilon"],
            target=self.values["head.loss.target"],
        )
        return HeadConfig(
            variant=self.values["head.variant"],
            channels=self.values["head.channels"],
            num_classes=self.values["head.num_classes"],
            m2b_fusion=self.values["head.m2b_fusion"],
            b2m_fusion=self.values["head.b2m_fusion"],
            boundary_source=self.values["head.boundary_source"],
            boundary_roi_size=self.values["head.boundary_roi_size"],
            loss=loss,
        ).validate()

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.values["train.iterations"],
            base_lr=self.values["train.base_lr"],
            batch_size=self.values["train.batch_size"],
            momentum=self.values["train.momentum"],
            weight_decay=self.values["train.weight_decay"],
            seed=mix64(self.seed, _TAG_SAMPLER),
        ).validate()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        merged = dict(self.values)
        for key, raw in overrides.items():
            merged[key] = _parse_value(key, raw)
        return ExperimentConfig(merged)

    def echo_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"


def _parse_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    _, parse = SCHEMA[key]
    try:
        return parse(raw.strip())
    except (ValueError, TypeError) as e:
        raise ConfigError(f"config key {key!r}: {e}") from None


def default_config() -> ExperimentConfig:
    return ExperimentConfig({k: parse(dflt) for k, (dflt, parse) in SCHEMA.items()})


def parse_config_text(text: str) -> ExperimentConfig:
    values = dict(default_config().values)
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw)
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text)
