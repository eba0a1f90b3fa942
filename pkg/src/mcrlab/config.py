"""Experiment configuration: one flat, validated, immutable record.

Values are read from a YAML file, then the ``MCRLAB_SEED`` environment
variable, then explicit ``key=value`` overrides (last wins).
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

SEED_ENV_VAR = "MCRLAB_SEED"


class ConfigError(ValueError):
    """Raised when a config cannot be parsed or violates an invariant."""


class ExperimentConfig(BaseModel):
    """Every hyperparameter of a run.

    Defaults are desk scale: 64x64 single-channel images cut into 8x8
    patches (N=64), 32 body tokens, width 64. The shape relations of the
    full-size model (224 px, P=16, width 768) are preserved.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # input geometry
    image_size: int = 64
    channels: int = 1
    patch_size: int = 8
    max_text_len: int = 32
    vocab_size: int = 512

    # masking
    image_mask_rate: float = 0.5
    text_mask_rate: float = 0.25

    # architecture
    embed_dim: int = 64
    proj_dim: int = 64
    proj_hidden: int = 64
    projection: Literal["mlp", "linear"] = "mlp"
    vision_depth: int = 4
    text_depth: int = 4
    decoder_depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    align_strategy: Literal["MbA", "AbM"] = "MbA"
    agg: Literal["max", "mean"] = "max"
    pool_cls: bool = True
    input_mode: Literal["masked_only", "dual_input"] = "masked_only"

    # objectives
    lambda_v: float = 0.75
    lambda_r: float = 0.25
    lambda_vrc: float = 0.1
    lambda_mim: float = 1.0
    lambda_mrm: float = 1.0
    tau_init: float = 0.07
    tau_min: float = 0.01

    # optimisation
    batch_size: int = 64
    epochs: int = 30
    warmup_epochs: int = 3
    peak_lr_encoders: float = 1e-4
    peak_lr_rest: float = 3e-4
    final_lr_ratio: float = 0.01
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        problems = []
        if self.image_size <= 0 or self.patch_size <= 0:
            problems.append("image_size and patch_size must be positive")
        elif self.image_size % self.patch_size:
            problems.append(
                f"image_size: {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        elif self.num_patches < 2:
            problems.append(f"image_size/patch_size: need at least 2 patches, got {self.num_patches}")
        for name in ("image_mask_rate", "text_mask_rate"):
            rate = getattr(self, name)
            if not 0.0 < rate < 1.0:
                problems.append(f"{name}: {rate} must lie strictly inside (0, 1)")
        if abs(self.lambda_v + self.lambda_r - 1.0) > 1e-9:
            problems.append(
                f"lambda_v + lambda_r: must equal 1, got {self.lambda_v} + {self.lambda_r}"
            )
        for name in ("lambda_v", "lambda_r", "lambda_vrc", "lambda_mim", "lambda_mrm"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0")
        if not self.tau_min > 0:
            problems.append(f"tau_min: {self.tau_min} must be > 0")
        if self.tau_init < self.tau_min:
            problems.append(f"tau_init: {self.tau_init} must be >= tau_min {self.tau_min}")
        if self.embed_dim % self.num_heads:
            problems.append(f"embed_dim: {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.vocab_size < 5:
            problems.append("vocab_size: must hold the 5 reserved tokens")
        if self.max_text_len < 1:
            problems.append("max_text_len: must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            problems.append("batch_size and epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            problems.append(f"warmup_epochs: {self.warmup_epochs} outside [0, epochs]")
        if not 0 < self.final_lr_ratio <= 1:
            problems.append("final_lr_ratio: must lie in (0, 1]")
        if min(self.vision_depth, self.text_depth, self.decoder_depth) < 0:
            problems.append("depths must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def text_positions(self) -> int:
        return self.max_text_len + 2

    def to_dict(self) -> dict[str, Any]:
        return self.model_dump()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self, exclude: Iterable[str] = ()) -> str:
        """Stable short hash of the config, used to guard checkpoint loads."""
        payload = {k: v for k, v in self.to_dict().items() if k not in set(exclude)}
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return build_config({**self.to_dict(), **changes})

    def make_rng(self, *stream: int) -> np.random.Generator:
        """PCG64 stream keyed by (seed, *stream)."""
        return np.random.Generator(np.random.PCG64([self.seed, *stream]))


def build_config(values: Mapping[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig(**dict(values))
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "config"
            msg = err["msg"].removeprefix("Value error, ")
            msgs.append(msg if not err["loc"] else f"{loc}: {msg}")
        raise ConfigError("; ".join(msgs)) from None


def _coerce(key: str, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    field = ExperimentConfig.model_fields.get(key)
    if field is None:
        raise ConfigError(f"{key}: unknown config key")
    if field.annotation is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: cannot parse {raw!r} as bool")
    return yaml.safe_load(raw)


def parse_overrides(overrides: Iterable[str] | Mapping[str, Any] | None) -> dict[str, Any]:
    if overrides is None:
        return {}
    if isinstance(overrides, Mapping):
        return {k: _coerce(k, v) for k, v in overrides.items()}
    out: dict[str, Any] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip().lstrip("-").replace("-", "_")
        out[key] = _coerce(key, raw.strip())
    return out


def load_config(
    path: str | os.PathLike | None = None,
    overrides: Iterable[str] | Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """Load a YAML config, apply the seed env var and then ``overrides``.

    Missing keys take their defaults. ``overrides`` is a list of
    ``key=value`` strings or a mapping.
    """
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        values.update(loaded)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR}={env_seed!r} is not an integer") from None
    values.update(parse_overrides(overrides))
    return build_config(values)


def save_config(config: ExperimentConfig, path: str | os.PathLike) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(config.to_yaml())
    return p
