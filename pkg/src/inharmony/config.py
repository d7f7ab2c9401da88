"""Run configuration: a flat ``key = value`` text format with typed fields."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .colormap import ColorMapConfig
from .domenc import DomainEncoderConfig
from .losses import LossWeights


@dataclass
class TrainConfig:
    # optimisation
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    threads: int = 1
    # objective
    lambda_ddm: float = 0.001
    lambda_di: float = 0.001
    margin: float = 0.01
    # architecture
    color_map: bool = True
    localizer: str = "unet"
    unet_width: int = 16
    theta: float = 0.7
    lowres_size: int = 32
    grid_size: int = 8
    grid_depth: int = 4
    code_dim: int = 16
    encoder_seed: int = 0
    # data
    image_size: int = 64
    n_train: int = 512
    n_test: int = 128
    data_seed: int = 7
    max_area: float = 0.5
    allow_empty_masks: bool = False
    # paths
    data_dir: str = "data"
    out_dir: str = "runs/default"
    # evaluation
    threshold: float = 0.5
    pooled_ap: bool = False

    def __post_init__(self):
        if self.image_size % 16:
            raise ValueError(f"image_size must be divisible by 16, got {self.image_size}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.localizer not in ("unet", "stub"):
            raise ValueError(f"localizer must be 'unet' or 'stub', got {self.localizer!r}")
        self.loss_weights  # validates the non-negativity of the loss weights

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_ddm, self.lambda_di, self.margin)

    @property
    def colormap_config(self) -> ColorMapConfig:
        return ColorMapConfig(lowres_size=self.lowres_size, grid_size=self.grid_size,
                              grid_depth=self.grid_depth, theta=self.theta)

    @property
    def encoder_config(self) -> DomainEncoderConfig:
        return DomainEncoderConfig(code_dim=self.code_dim, seed=self.encoder_seed)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, **overrides: Any) -> "TrainConfig":
        values = parse_key_values(text)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def load(cls, path, **overrides: Any) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: _coerce(known[k].type, v) for k, v in values.items()}
        return cls(**kwargs)


def parse_key_values(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(type_name, value):
    if not isinstance(value, str):
        return value
    type_name = str(type_name)
    if type_name == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    return value
