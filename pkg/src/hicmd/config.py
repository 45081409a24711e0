"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

ADV_VARIANTS = ("non-saturating", "minimax")
SAMPLING_MODES = ("alternate", "original")
FEATURE_MODES = ("A+P", "A", "P")
DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    """Raised when a configuration field violates its constraint."""


@dataclass(frozen=True)
class RunConfig:
    # image geometry (the original training resolution is 256 x 128)
    height: int = 64
    width: int = 32

    # code sizes; not fixed by the method, chosen for desk-scale runs
    style_dim: int = 8
    illum_dim: int = 4
    pose_dim: int = 4
    proto_channels: int = 64

    # network widths
    base_channels: int = 16
    n_downsample: int = 2
    n_res: int = 2
    mlp_dim: int = 64
    dis_channels: int = 16
    dis_layers: int = 3
    patch_dis: bool = False
    proto_embed_dim: int = 32
    feature_dim: int = 32
    num_classes: int = 0  # 0 means "take N from the training data"

    # reconstruction weights: cross, same, cycle, code
    lambda_cross: float = 50.0
    lambda_same: float = 50.0
    lambda_cycle: float = 50.0
    lambda_code: float = 10.0
    lambda_kl: float = 1.0
    lambda_adv: float = 20.0
    lambda_ce: float = 1.0
    lambda_trip: float = 1.0
    margin: float = 0.3

    # optimisers: Adam for the generation side, SGD for feature learning
    lr_gen: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lr_hfl: float = 1e-3
    momentum_hfl: float = 0.9
    lr_dis: float = 1e-4
    grad_clip: float = 10.0  # 0 disables clipping
    alpha_init: float = 0.5

    # schedule
    iterations: int = 2000
    batch_pairs: int = 4
    checkpoint_every: int = 500
    seed: int = 0
    data_path: str = ""

    adv_variant: str = "non-saturating"
    sampling: str = "alternate"
    feature_mode: str = "A+P"
    dtype: str = "float32"

    @property
    def attr_dim(self) -> int:
        return self.style_dim + self.illum_dim + self.pose_dim

    @property
    def excluded_dim(self) -> int:
        return self.illum_dim + self.pose_dim

    @property
    def proto_shape(self) -> tuple[int, int, int]:
        """Spatial prototype shape as (h, w, c_p)."""
        f = 2 ** self.n_downsample
        return (self.height // f, self.width // f, self.proto_channels)

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_POSITIVE_INT = (
    "height", "width", "style_dim", "illum_dim", "pose_dim", "proto_channels",
    "base_channels", "mlp_dim", "dis_channels", "dis_layers", "proto_embed_dim",
    "feature_dim", "batch_pairs",
)
_NONNEG_INT = ("n_downsample", "n_res", "num_classes", "iterations", "checkpoint_every")
_NONNEG_FLOAT = (
    "lambda_cross", "lambda_same", "lambda_cycle", "lambda_code", "lambda_kl",
    "lambda_adv", "lambda_ce", "lambda_trip", "grad_clip", "momentum_hfl",
)
_POSITIVE_FLOAT = ("margin", "lr_gen", "lr_hfl", "lr_dis")
_CHOICES = {
    "adv_variant": ADV_VARIANTS,
    "sampling": SAMPLING_MODES,
    "feature_mode": FEATURE_MODES,
    "dtype": DTYPES,
}


def validate_config(cfg: RunConfig) -> RunConfig:
    """Return ``cfg`` unchanged if every constraint holds, else raise ConfigError
    naming the first offending field."""
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _POSITIVE_INT and not value > 0:
            raise ConfigError(f"{f.name}={value!r}: must be a positive integer")
        if f.name in _NONNEG_INT and value < 0:
            raise ConfigError(f"{f.name}={value!r}: must be >= 0")
        if f.name in _NONNEG_FLOAT and not value >= 0:
            raise ConfigError(f"{f.name}={value!r}: weight must be >= 0")
        if f.name in _POSITIVE_FLOAT and not value > 0:
            raise ConfigError(f"{f.name}={value!r}: must be > 0")
        if f.name in _CHOICES and value not in _CHOICES[f.name]:
            raise ConfigError(f"{f.name}={value!r}: must be one of {_CHOICES[f.name]}")
        if f.name in ("beta1", "beta2") and not 0 <= value < 1:
            raise ConfigError(f"{f.name}={value!r}: must lie in [0, 1)")
        if f.name == "alpha_init" and not 0 <= value <= 1:
            raise ConfigError(f"alpha_init={value!r}: must lie in [0, 1]")
    f = 2 ** cfg.n_downsample
    if cfg.height % f or cfg.width % f:
        raise ConfigError(
            f"height={cfg.height}, width={cfg.width}: must be divisible by 2**n_downsample={f}"
        )
    return cfg


def _parse_value(name: str, raw: str, kind: type) -> Any:
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) over ``base``."""
    base = base or RunConfig()
    kinds = {f.name: _TYPES[f.type] for f in fields(RunConfig)}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, kinds[key])
    return validate_config(dataclasses.replace(base, **values))


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(cfg))
