"""Experiment configuration: JSON file, strict keys, published hyperparameters as defaults."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .models import ARCHITECTURES
from .preprocess import NormalizationConstants
from .training import TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    architecture: str = "resnet50"
    num_classes: int = 2
    width_multiplier: float = 1.0
    freeze_backbone: bool = False
    image_resize: int = 256
    crop: int = 224
    norm_mean: tuple = (0.485, 0.456, 0.406)
    norm_std: tuple = (0.229, 0.224, 0.225)
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 4
    max_epochs: int = 500
    patience: int = 5
    repeats: int = 5
    test_count: int = 90
    val_count: int = 40
    seed: int = 0
    data_root: Optional[str] = None
    output_dir: str = "runs"

    def validate(self) -> "ExperimentConfig":
        checks = [
            ("architecture", self.architecture in ARCHITECTURES, f"one of {', '.join(ARCHITECTURES)}"),
            ("num_classes", _int(self.num_classes) and self.num_classes >= 2, "an integer >= 2"),
            ("width_multiplier", _num(self.width_multiplier) and self.width_multiplier > 0, "> 0"),
            ("freeze_backbone", isinstance(self.freeze_backbone, bool), "a boolean"),
            ("image_resize", _int(self.image_resize) and self.image_resize >= 1, "an integer >= 1"),
            ("crop", _int(self.crop) and 1 <= self.crop <= self.image_resize, "an integer in [1, image_resize]"),
            ("norm_mean", _triple(self.norm_mean), "three numbers"),
            ("norm_std", _triple(self.norm_std) and min(self.norm_std) > 0, "three positive numbers"),
            ("learning_rate", _num(self.learning_rate) and self.learning_rate > 0, "> 0"),
            ("momentum", _num(self.momentum) and 0 <= self.momentum < 1, "in [0, 1)"),
            ("batch_size", _int(self.batch_size) and self.batch_size >= 1, "an integer >= 1"),
            ("max_epochs", _int(self.max_epochs) and self.max_epochs >= 1, "an integer >= 1"),
            ("patience", _int(self.patience) and self.patience >= 1, "an integer >= 1"),
            ("repeats", _int(self.repeats) and self.repeats >= 1, "an integer >= 1"),
            ("test_count", _int(self.test_count) and self.test_count >= 0, "an integer >= 0"),
            ("val_count", _int(self.val_count) and self.val_count >= 0, "an integer >= 0"),
            ("seed", _int(self.seed) and self.seed >= 0, "a non-negative integer"),
            ("data_root", self.data_root is None or isinstance(self.data_root, str), "a path string"),
            ("output_dir", isinstance(self.output_dir, str), "a path string"),
        ]
        for key, ok, constraint in checks:
            if not ok:
                raise ConfigError(f"{key}: must be {constraint}, got {getattr(self, key)!r}")
        self.norm_mean = tuple(float(v) for v in self.norm_mean)
        self.norm_std = tuple(float(v) for v in self.norm_std)
        return self

    @property
    def normalization(self) -> NormalizationConstants:
        return NormalizationConstants(tuple(self.norm_mean), tuple(self.norm_std))

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.max_epochs, self.patience, self.batch_size, self.repeats, self.seed,
                           self.architecture, self.learning_rate, self.momentum)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _triple(v) -> bool:
    return isinstance(v, (list, tuple)) and len(v) == 3 and all(_num(x) for x in v)


KEYS = tuple(f.name for f in fields(ExperimentConfig))


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}" if len(unknown) == 1
                          else f"unknown config keys {', '.join(map(repr, unknown))}")
    return ExperimentConfig(**raw).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    cfg = config_from_dict(raw)
    log.info("resolved config: %s", cfg.to_json())
    return cfg
