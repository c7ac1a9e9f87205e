"""Configuration dataclasses and strict YAML loading.

A config file is one YAML document with the sections ``dataset``, ``network``,
``train``, ``affinity``, ``sparse_gen`` and ``eval``. Unknown keys are hard
errors so that a typo such as ``lamda1`` never silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
import difflib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


SPARSE_MODES = ("POINT_SIDES", "POINT_CENTER", "SCRIBBLE", "BLOCK")
SHAPES = ("DISK", "ELLIPSE", "BLOB")
GRANULARITIES = ("sample", "batch")
AFFINITY_MODES = ("CLASS_MATCHED", "LITERAL")


@dataclass
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 16
    depth: int = 4
    tap_encoder: int = 3
    tap_decoder: int = 3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("network.num_classes must be >= 2")
        if self.depth < 2:
            raise ConfigError("network.depth must be >= 2")
        for name in ("tap_encoder", "tap_decoder"):
            v = getattr(self, name)
            if not 1 <= v <= self.depth:
                raise ConfigError(f"network.{name}={v} outside [1, depth={self.depth}]")


@dataclass
class AffinityConfig:
    sigma_l: float = 6.0
    sigma_v: float = 0.1
    radius: int = 5
    interpretation: str = "CLASS_MATCHED"
    # divide both affinity sums by the in-window neighbour count
    normalize: bool = True

    def __post_init__(self):
        if self.sigma_l <= 0 or self.sigma_v <= 0:
            raise ConfigError("affinity.sigma_l and affinity.sigma_v must be > 0")
        if self.radius < 1:
            raise ConfigError("affinity.radius must be >= 1")
        if self.interpretation not in AFFINITY_MODES:
            raise ConfigError(f"affinity.interpretation must be one of {AFFINITY_MODES}")


@dataclass
class AblationFlags:
    use_prsa: bool = True
    use_anpm: bool = True
    use_noise_loss: bool = True
    use_init_prsa: bool = True
    use_ema: bool = True
    # feed the refined prediction instead of the raw one into the mask extraction
    anpm_refined: bool = False

    @property
    def self_training(self) -> bool:
        """Main stage uses pseudo-labels at all (otherwise it is plain sparse pCE)."""
        return self.use_prsa or self.use_anpm or self.use_noise_loss


ABLATION_ALIASES = {
    "no-prsa": "use_prsa",
    "no-anpm": "use_anpm",
    "no-noise": "use_noise_loss",
    "no-init-prsa": "use_init_prsa",
    "no-ema": "use_ema",
}


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.5
    lambda3: float = 0.1
    lambda4: float = 0.01
    alpha: float = 0.8
    init_epochs: int = 10
    main_epochs: int = 90
    batch_size: int = 8
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    seed: int = 0
    prototype_granularity: str = "sample"
    grad_clip: float | None = 10.0
    augment: bool = True
    checkpoint_every: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = _build(AblationFlags, self.ablation, "train.ablation")
        for k in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, k) < 0:
                raise ConfigError(f"train.{k} must be >= 0")
        if not 0 < self.alpha <= 1:
            raise ConfigError("train.alpha must be in (0, 1]")
        if self.init_epochs < 1:
            raise ConfigError("train.init_epochs must be >= 1")
        if self.main_epochs < 0:
            raise ConfigError("train.main_epochs must be >= 0")
        if self.prototype_granularity not in GRANULARITIES:
            raise ConfigError(f"train.prototype_granularity must be one of {GRANULARITIES}")

    def apply_ablation(self, names) -> None:
        """Switch off components given CLI-style names such as ``no-anpm``."""
        for name in names:
            name = name.strip()
            if not name:
                continue
            if name not in ABLATION_ALIASES:
                raise ConfigError(_unknown_msg(name, ABLATION_ALIASES, "ablation"))
            setattr(self.ablation, ABLATION_ALIASES[name], False)


@dataclass
class SparseGenConfig:
    mode: str = "SCRIBBLE"
    contraction: int = 2
    brush_sigma: float = 1.5
    erosion_kernel: str = "CROSS"
    erosion_kernel_size: int = 3
    erosion_iters: int = 2
    target_area_fraction: float = 0.6
    annotate_background: bool = True

    def __post_init__(self):
        if self.mode not in SPARSE_MODES:
            raise ConfigError(f"sparse_gen.mode must be one of {SPARSE_MODES}")
        if self.contraction < 0:
            raise ConfigError("sparse_gen.contraction must be >= 0")
        if self.brush_sigma <= 0:
            raise ConfigError("sparse_gen.brush_sigma must be > 0")
        if self.erosion_kernel not in ("CROSS", "SQUARE"):
            raise ConfigError("sparse_gen.erosion_kernel must be CROSS or SQUARE")
        if not 0 < self.target_area_fraction <= 1:
            raise ConfigError("sparse_gen.target_area_fraction must be in (0, 1]")


@dataclass
class DatasetConfig:
    path: str = "data/synthetic"
    num_samples: int = 200
    num_test: int = 50
    image_size: int = 64
    shapes: list = field(default_factory=lambda: ["DISK"])
    boundary_blur_sigma: float = 2.0
    noise_std: float = 0.01
    num_classes: int = 2
    full_label_fraction: float = 0.0
    distractors: int = 2
    seed: int = 0

    def __post_init__(self):
        bad = [s for s in self.shapes if s not in SHAPES]
        if bad:
            raise ConfigError(f"dataset.shapes has unknown entries {bad}; choose from {SHAPES}")
        if not 0 <= self.full_label_fraction <= 1:
            raise ConfigError("dataset.full_label_fraction must be in [0, 1]")
        if self.num_classes < 2:
            raise ConfigError("dataset.num_classes must be >= 2")


@dataclass
class EvalConfig:
    split: str = "test"
    error_maps: bool = True
    noise_report: bool = False


@dataclass
class Config:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    affinity: AffinityConfig = field(default_factory=AffinityConfig)
    sparse_gen: SparseGenConfig = field(default_factory=SparseGenConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _unknown_msg(key, allowed, where):
    msg = f"unknown key {key!r} in {where}"
    close = difflib.get_close_matches(key, list(allowed), n=1)
    if close:
        msg += f" (did you mean {close[0]!r}?)"
    return msg


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(_unknown_msg(key, names, where))
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


_SECTIONS = {
    "dataset": DatasetConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "affinity": AffinityConfig,
    "sparse_gen": SparseGenConfig,
    "eval": EvalConfig,
}


def config_from_dict(data: dict[str, Any] | None) -> Config:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    sections = {}
    for key, value in data.items():
        if key not in _SECTIONS:
            raise ConfigError(_unknown_msg(key, _SECTIONS, "config"))
        if value is not None and not isinstance(value, dict):
            raise ConfigError(f"section {key!r} must be a mapping")
        sections[key] = _build(_SECTIONS[key], value, key)
    return Config(**sections)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from None
    return config_from_dict(data)
