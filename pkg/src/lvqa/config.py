"""Configuration records for the model, the trainer, and the data generator.

All three serialize to/from a single JSON document with "model", "train"
and "data" sections; the CLI patches individual fields with dotted
`--set section.key=value` overrides.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

VARIANTS = ("ours", "no_mask", "region_in_text", "crop_region", "draw_region")

# Row order used in every comparison table.
VARIANT_TABLE_ORDER = ("no_mask", "region_in_text", "crop_region", "draw_region", "ours")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The image encoder is a stack of `len(encoder_channels)` conv blocks
    (kernel `encoder_kernel`, same padding, ReLU, 2x max pool), so the
    feature grid is image_size / 2**depth on each side. When
    `freeze_image_encoder` is set the encoder weights are drawn from
    `frozen_encoder_seed` (shared by every run, standing in for a fixed
    pretrained backbone) and excluded from optimization.
    """

    image_size: int = 64
    encoder_channels: tuple[int, ...] = (16, 24, 32)
    encoder_kernel: int = 9
    encoder_pool: str = "max"    # "max" or "nearest" 2x downsampling
    attn_dim: int = 64           # joint space the image/question features project into
    glimpses: int = 2
    q_dim: int = 64              # question embedding width (recurrent hidden size)
    embed_dim: int = 32          # word embedding width
    mlp_hidden: int = 128
    n_answers: int = 2
    dropout: float = 0.25
    variant: str = "ours"
    softmax_axis: str = "spatial"    # "spatial" (per glimpse) or "glimpse" (per location)
    freeze_image_encoder: bool = True
    frozen_encoder_seed: int = 1301
    max_question_len: int = 16
    grid_n: int = 8              # coordinate grid for the region_in_text variant
    dtype: str = "float32"

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    @property
    def feature_channels(self) -> int:
        return self.encoder_channels[-1]

    @property
    def feature_hw(self) -> int:
        return self.image_size // (2 ** self.depth)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}' (choose from {VARIANTS})")
        if self.softmax_axis not in ("spatial", "glimpse"):
            raise ValueError(f"softmax_axis must be 'spatial' or 'glimpse', got '{self.softmax_axis}'")
        if self.encoder_pool not in ("max", "nearest"):
            raise ValueError(f"encoder_pool must be 'max' or 'nearest', got '{self.encoder_pool}'")
        if self.image_size % (2 ** self.depth):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^depth={2 ** self.depth}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got '{self.dtype}'")


@dataclass
class TrainConfig:
    """Optimization schedule."""

    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    lr_floor: float = 1e-7
    early_stop_patience: int = 20
    augment: bool = True
    selection_metric: str = "auc"    # "auc" or "accuracy"
    seed: int = 0

    def validate(self) -> None:
        if self.early_stop_patience >= self.epochs:
            raise ValueError("early_stop_patience must be < epochs")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.selection_metric not in ("auc", "accuracy"):
            raise ValueError(f"selection_metric must be 'auc' or 'accuracy', got '{self.selection_metric}'")


@dataclass
class DataConfig:
    """Synthetic scene and question generation parameters."""

    image_size: int = 64
    n_train_images: int = 400
    n_val_images: int = 60
    n_test_images: int = 120
    questions_per_image: int = 8
    region_kind: str = "rect"        # "rect" or "circle"
    region_frac_min: float = 0.10    # region side (or diameter) as a fraction of image side
    region_frac_max: float = 0.50
    context_fraction: float = 0.4    # fraction of scenes built around the look-alike bar pair
    min_objects: int = 2
    max_objects: int = 4
    noise_level: float = 0.03
    marker_size: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.region_kind not in ("rect", "circle"):
            raise ValueError(f"region_kind must be 'rect' or 'circle', got '{self.region_kind}'")
        if not 0 < self.region_frac_min <= self.region_frac_max <= 1:
            raise ValueError("require 0 < region_frac_min <= region_frac_max <= 1")
        if not 0 <= self.context_fraction <= 1:
            raise ValueError("context_fraction must be in [0, 1]")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.data.validate()


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    for section_name, cls in (("model", ModelConfig), ("train", TrainConfig), ("data", DataConfig)):
        section = doc.get(section_name, {})
        known = {f.name: f for f in dataclasses.fields(cls)}
        target = getattr(cfg, section_name)
        for key, value in section.items():
            if key not in known:
                raise KeyError(f"unknown config key '{section_name}.{key}'")
            if isinstance(getattr(target, key), tuple):
                value = tuple(value)
            setattr(target, key, value)
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n")


def apply_override(cfg: RunConfig, dotted_key: str, raw_value: str) -> None:
    """Patch one field from a `section.key=value` CLI override."""
    if "." not in dotted_key:
        raise KeyError(f"override key '{dotted_key}' must look like section.key")
    section_name, key = dotted_key.split(".", 1)
    if section_name not in ("model", "train", "data"):
        raise KeyError(f"unknown config section '{section_name}'")
    section = getattr(cfg, section_name)
    fields = {f.name: f for f in dataclasses.fields(section)}
    if key not in fields:
        raise KeyError(f"unknown config key '{dotted_key}'")
    current = getattr(section, key)
    if isinstance(current, bool):
        value = raw_value.lower() in ("1", "true", "yes")
    elif isinstance(current, int):
        value = int(raw_value)
    elif isinstance(current, float):
        value = float(raw_value)
    elif isinstance(current, tuple):
        value = tuple(int(v) for v in raw_value.split(",") if v)
    else:
        value = raw_value
    setattr(section, key, value)


def all_override_keys() -> list[str]:
    """Every dotted key `--set` accepts (also listed in `--help`)."""
    keys = []
    for section_name, cls in (("model", ModelConfig), ("train", TrainConfig), ("data", DataConfig)):
        keys.extend(f"{section_name}.{f.name}" for f in dataclasses.fields(cls))
    return keys
