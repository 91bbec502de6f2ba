"""Run configuration: one flat key = value text file, UTF-8, typed fields,
unknown keys rejected, lossless round-trip."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    image_size: int = 32
    levels: int = 3
    anchors: int = 6
    classes: int = 3
    style_dim: int = 16
    enc_channels: tuple[int, ...] = (32, 16, 8)
    z_channels: tuple[int, ...] = (8, 4, 2)
    dec_channels: tuple[int, ...] = (12, 10, 8)
    reg_width: int = 6
    squaring_steps: int = 6
    # loss weights
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = 0.01
    lambda4: float = 3.0
    lambda5: float = 1.0
    epsilon: float = math.pi / 10.0
    sigma_prior: float = 1.0
    # optimizer
    learning_rate: float = 1e-3
    steps: int = 5000
    batch_source: int = 8
    batch_target: int = 8
    seed: int = 0
    val_interval: int = 250
    # sinkhorn solver
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = 10000
    sinkhorn_unroll: int = 50
    # data generation
    data_train_per_domain: int = 200
    data_val: int = 20
    data_test: int = 20
    noise_sigma: float = 0.02
    bias_strength: float = 0.35
    # ablation switches
    disable_align: bool = False
    disable_geo: bool = False
    disable_anchor: bool = False
    freeze_identity_phi: bool = False
    source_only: bool = False

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            levels=self.levels,
            anchors=self.anchors,
            classes=self.classes,
            style_dim=self.style_dim,
            enc_channels=self.enc_channels,
            z_channels=self.z_channels,
            dec_channels=self.dec_channels,
            reg_width=self.reg_width,
            squaring_steps=self.squaring_steps,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda3=self.lambda3,
            lambda4=self.lambda4,
            lambda5=self.lambda5,
            epsilon=self.epsilon,
            sigma_prior=self.sigma_prior,
        )


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, kind) -> object:
    raw = raw.strip()
    if kind is bool:
        if raw not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {raw!r}")
        return raw == "true"
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    # tuple of ints
    return tuple(int(x) for x in raw.split(",") if x.strip())


def serialize(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> RunConfig:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    type_map = {
        "int": int,
        "float": float,
        "bool": bool,
        "str": str,
        "tuple[int, ...]": tuple,
    }
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(raw, type_map[str(kinds[key])])
    return RunConfig(**values)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize(cfg), encoding="utf-8")


def load_config(path: str | Path) -> RunConfig:
    return deserialize(Path(path).read_text(encoding="utf-8"))
