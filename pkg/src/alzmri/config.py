"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .explain import METHODS
from .model import DEFAULT_CAPTURE, SPATIAL_CAPTURES, ModelConfig
from .training import OPTIMIZERS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training (Table-2 defaults)
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    factor: float = 0.7
    patience: int = 7
    min_lr: float = 1e-6
    optimizer: str = "adam"
    scheduler: str = "plateau"
    seed: int = 43
    # data
    image_size: int = 128
    merge: str = ""
    sharpen: bool = False
    augment: bool = True
    balance_threshold: float = 10.0
    test_frac: float = 0.15
    val_frac: float = 0.15
    # model
    stem_filters: tuple[int, ...] = (32, 64)
    residual_filters: int = 128
    num_heads: int = 4
    num_kv_groups: int = 2
    dropout: float = 0.3
    dense_units: int = 128
    spatial_kernel: int = 7
    # explanations
    cam_method: str = "gradcam"
    cam_layer: str = DEFAULT_CAPTURE
    cam_top_k: int = 10
    cam_eta: float = 0.0
    cam_alpha: float = 0.4

    def validate(self) -> "RunConfig":
        checks = [
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0, "lr must be positive"),
            (0 < self.factor < 1, "factor must be in (0, 1)"),
            (self.patience >= 1, "patience must be >= 1"),
            (0 < self.min_lr <= self.lr, "min_lr must be in (0, lr]"),
            (self.optimizer in OPTIMIZERS, f"optimizer must be one of {sorted(OPTIMIZERS)}"),
            (self.scheduler in ("plateau", "exponential", "cosine"), "scheduler must be plateau, exponential or cosine"),
            (self.image_size >= 8, "image_size must be >= 8"),
            (self.balance_threshold >= 1, "balance_threshold must be >= 1"),
            (0 < self.test_frac < 1 and 0 < self.val_frac < 1, "split fractions must be in (0, 1)"),
            (self.cam_method in METHODS, f"cam_method must be one of {METHODS}"),
            (self.cam_layer in SPATIAL_CAPTURES, f"cam_layer must be one of {SPATIAL_CAPTURES}"),
            (self.cam_top_k >= 1, "cam_top_k must be >= 1"),
            (0 <= self.cam_alpha <= 1, "cam_alpha must be in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.model_config(2)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            num_classes=num_classes,
            input_size=self.image_size,
            stem_filters=tuple(self.stem_filters),
            residual_filters=self.residual_filters,
            num_heads=self.num_heads,
            num_kv_groups=self.num_kv_groups,
            dropout_rate=self.dropout,
            dense_units=self.dense_units,
            spatial_kernel=self.spatial_kernel,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            factor=self.factor,
            patience=self.patience,
            min_lr=self.min_lr,
            optimizer=self.optimizer,
            scheduler=self.scheduler,
            seed=self.seed,
        )

    # ---------------------------------------------------------- text form

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def updated(self, overrides: dict[str, str]) -> "RunConfig":
        return dataclasses.replace(self, **_coerce(overrides)).validate()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().updated(parse_pairs(text.splitlines()))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def parse_pairs(lines) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(raw: dict[str, str]) -> dict:
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind == "int":
                out[key] = int(value)
            elif kind == "float":
                out[key] = float(value)
            elif kind == "bool":
                out[key] = _BOOL[value.lower()]
            elif kind.startswith("tuple"):
                out[key] = tuple(int(v) for v in value.split(",") if v.strip())
            else:
                out[key] = value
        except (ValueError, KeyError):
            raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return out
