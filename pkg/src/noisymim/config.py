"""Flat key=value configuration with dotted namespaces.

One registry maps every valid key (encoder.*, noise.*, loss.*, train.*,
data.*) to a field and a caster, so config files, --override flags, manifest
lines and checkpoint headers all share exact, lossless semantics.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .errors import ConfigError


@dataclass
class TrainConfig:
    """Everything a pre-training run depends on; serialized into every
    checkpoint header and run manifest."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    # noise schedule
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # optimization
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    warmup_steps: int = -1  # -1 = 5% of steps
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only
    flip_augment: bool = True
    # loss options
    disrupt_layers: tuple | None = None  # None = all layers
    disrupt_columns: str = "all"
    normalize_per_patch: bool = False
    # data
    data_kind: str = "synthetic"
    data_path: str = ""
    data_classes: int = 4
    data_samples_per_class: int = 256
    data_noise_std: float = 0.05
    data_seed: int = 1234

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.data_kind not in ("synthetic", "cifar10"):
            raise ConfigError(f"data kind must be synthetic or cifar10, got {self.data_kind!r}")
        if self.disrupt_columns not in ("all", "masked_only"):
            raise ConfigError(f"disrupt_columns must be all or masked_only, got {self.disrupt_columns!r}")

    @property
    def resolved_warmup(self) -> int:
        return self.warmup_steps if self.warmup_steps >= 0 else max(1, round(0.05 * self.steps))


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_layers(s: str):
    s = s.strip()
    if s in ("all", ""):
        return None
    try:
        return tuple(int(x) for x in s.split(","))
    except ValueError:
        raise ConfigError(f"expected 'all' or comma-separated layer indices, got {s!r}") from None


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "all"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (section attr or None for top level, field name, caster)
_ENCODER_KEYS = {
    "encoder.image_size": ("image_size", int),
    "encoder.patch_size": ("patch_size", int),
    "encoder.channels": ("channels", int),
    "encoder.embed_dim": ("embed_dim", int),
    "encoder.depth": ("depth", int),
    "encoder.heads": ("heads", int),
    "encoder.mlp_ratio": ("mlp_ratio", float),
    "encoder.noise_block": ("noise_block", int),
    "encoder.strategy": ("strategy", str),
    "encoder.mask_ratio": ("mask_ratio", float),
    "encoder.disruption_weight": ("disruption_weight", float),
    "encoder.denoise_weight": ("denoise_weight", float),
    "encoder.use_cls_token": ("use_cls_token", _parse_bool),
}

_TRAIN_KEYS = {
    "noise.timesteps": ("timesteps", int),
    "noise.beta_start": ("beta_start", float),
    "noise.beta_end": ("beta_end", float),
    "train.steps": ("steps", int),
    "train.batch_size": ("batch_size", int),
    "train.lr": ("lr", float),
    "train.weight_decay": ("weight_decay", float),
    "train.beta1": ("beta1", float),
    "train.beta2": ("beta2", float),
    "train.adam_eps": ("adam_eps", float),
    "train.warmup_steps": ("warmup_steps", int),
    "train.seed": ("seed", int),
    "train.log_every": ("log_every", int),
    "train.checkpoint_every": ("checkpoint_every", int),
    "train.flip_augment": ("flip_augment", _parse_bool),
    "loss.disrupt_layers": ("disrupt_layers", _parse_layers),
    "loss.disrupt_columns": ("disrupt_columns", str),
    "loss.normalize_per_patch": ("normalize_per_patch", _parse_bool),
    "data.kind": ("data_kind", str),
    "data.path": ("data_path", str),
    "data.classes": ("data_classes", int),
    "data.samples_per_class": ("data_samples_per_class", int),
    "data.noise_std": ("data_noise_std", float),
    "data.seed": ("data_seed", int),
}

VALID_KEYS = tuple(list(_ENCODER_KEYS) + list(_TRAIN_KEYS))


def config_items(cfg: TrainConfig) -> list[tuple[str, str]]:
    """Full resolved flat view, in registry order."""
    out = []
    for key, (attr, _) in _ENCODER_KEYS.items():
        out.append((key, _fmt(getattr(cfg.encoder, attr))))
    for key, (attr, _) in _TRAIN_KEYS.items():
        out.append((key, _fmt(getattr(cfg, attr))))
    return out


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str] | list[str]) -> TrainConfig:
    """Return a new config with key=value overrides applied.

    Unknown keys raise ConfigError listing the valid keys.
    """
    if not isinstance(pairs, dict):
        parsed = {}
        for raw in pairs:
            key, sep, value = raw.partition("=")
            if not sep:
                raise ConfigError(f"override {raw!r} is not of the form key=value")
            parsed[key.strip()] = value.strip()
        pairs = parsed
    enc_updates, top_updates = {}, {}
    for key, value in pairs.items():
        if key in _ENCODER_KEYS:
            attr, cast = _ENCODER_KEYS[key]
            enc_updates[attr] = cast(value)
        elif key in _TRAIN_KEYS:
            attr, cast = _TRAIN_KEYS[key]
            top_updates[attr] = cast(value)
        else:
            raise ConfigError(f"unknown config key {key!r}; valid keys:\n  " + "\n  ".join(VALID_KEYS))
    encoder = replace(cfg.encoder, **enc_updates) if enc_updates else cfg.encoder
    return replace(cfg, encoder=encoder, **top_updates)


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path) -> TrainConfig:
    """Defaults overridden by the key=value lines of a config file."""
    return apply_overrides(TrainConfig(), parse_config_text(Path(path).read_text()))


def config_from_items(items: list[tuple[str, str]]) -> TrainConfig:
    return apply_overrides(TrainConfig(), dict(items))
