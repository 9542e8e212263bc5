"""Training configuration and layered resolution.

Precedence: CLI overrides > GRAIN_* environment variables > config file >
dataclass defaults.  Unknown keys anywhere are an error, named explicitly.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping

import yaml

from .errors import ConfigError

ENV_PREFIX = "GRAIN_"


@dataclass
class TrainConfig:
    epochs: int = 35
    batch_size: int = 1024
    peak_lr: float = 5e-4
    warmup_steps: int | None = None  # None -> 10% of total steps
    weight_decay: float = 0.1
    grad_clip: float | None = 1.0
    seed: int = 0
    caption_swap_prob: float = 0.5
    use_rd_loss: bool = True
    use_box_loss: bool = True
    use_mllm_caption: bool = True
    use_giou: bool = True  # False switches the box/matching overlap to plain IoU
    cost_l1_weight: float = 1.0
    cost_giou_weight: float = 1.0
    max_steps: int | None = None
    checkpoint_every_epochs: int = 1
    log_every: int = 1

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0.0 <= self.caption_swap_prob <= 1.0:
            raise ConfigError(f"caption_swap_prob must be in [0, 1], got {self.caption_swap_prob}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or None")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        return self

    @classmethod
    def tiny(cls) -> "TrainConfig":
        """Desk-scale defaults to pair with ModelConfig.tiny()."""
        return cls(epochs=25, batch_size=8, peak_lr=1e-3)

    def to_dict(self) -> dict:
        return asdict(self)


_FIELD_TYPES: dict[str, Any] = {
    "epochs": int,
    "batch_size": int,
    "peak_lr": float,
    "warmup_steps": int,
    "weight_decay": float,
    "grad_clip": float,
    "seed": int,
    "caption_swap_prob": float,
    "use_rd_loss": bool,
    "use_box_loss": bool,
    "use_mllm_caption": bool,
    "use_giou": bool,
    "cost_l1_weight": float,
    "cost_giou_weight": float,
    "max_steps": int,
    "checkpoint_every_epochs": int,
    "log_every": int,
}

_NULLABLE = {"warmup_steps", "grad_clip", "max_steps"}


def _coerce(key: str, value: Any) -> Any:
    """Parse a string (env/CLI) value into the field's type."""
    target = _FIELD_TYPES[key]
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"config key {key} cannot be null")
    if isinstance(value, str):
        text = value.strip()
        if key in _NULLABLE and text.lower() in ("none", "null", ""):
            return None
        if target is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"config key {key} expects a boolean, got {value!r}")
        try:
            return target(text)
        except ValueError as exc:
            raise ConfigError(f"config key {key} expects {target.__name__}, got {value!r}") from exc
    if target is bool and not isinstance(value, bool):
        raise ConfigError(f"config key {key} expects a boolean, got {value!r}")
    if target is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key} expects an integer, got {value!r}")
        return value
    if not isinstance(value, target):
        raise ConfigError(f"config key {key} expects {target.__name__}, got {value!r}")
    return value


def _check_keys(source: str, mapping: Mapping[str, Any]) -> None:
    known = {f.name for f in fields(TrainConfig)}
    for key in mapping:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} (from {source})")


def load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as f:
        payload = yaml.safe_load(f) or {}
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    _check_keys(str(path), payload)
    return payload


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    known = {f.name for f in fields(TrainConfig)}
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} (from environment {name})")
        out[key] = value
    return out


def resolve_config(
    file_path=None,
    cli_overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
    base: TrainConfig | None = None,
) -> TrainConfig:
    merged = asdict(base if base is not None else TrainConfig())
    if file_path is not None:
        merged.update(load_config_file(file_path))
    merged.update(env_overrides(environ))
    if cli_overrides:
        _check_keys("command line", cli_overrides)
        merged.update({k: v for k, v in cli_overrides.items()})
    coerced = {k: _coerce(k, v) for k, v in merged.items()}
    return TrainConfig(**coerced).validate()
