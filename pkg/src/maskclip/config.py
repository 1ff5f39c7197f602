"""Experiment configuration: dataclasses, JSON round-trip, validation, dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

OBJECTIVES = ("clip", "clip_pixel", "maskclip")
PRECISIONS = ("float64", "float32")
DECAY_MODES = ("lr_scaled", "independent")


class ConfigError(ValueError):
    pass


@dataclass
class VisionConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


@dataclass
class TextConfig:
    depth: int = 2
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    context_length: int = 32
    vocab_size: int = 0  # 0 = size of the built-in closed vocabulary
    causal: bool = True


@dataclass
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    text: TextConfig = field(default_factory=TextConfig)
    embed_dim: int = 32
    decoder_depth: int = 1
    init_temperature: float = 0.07


@dataclass
class TrainConfig:
    objective: str = "maskclip"
    epochs: int = 50
    batch_size: int = 32
    lr: float = 3e-3
    warmup_epochs: float = 1.0
    final_lr: float = 1e-5
    weight_decay: float = 0.1
    decay_mode: str = "lr_scaled"  # "independent": p *= 1 - wd every step, even at lr 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    grad_clip: float = 1.0  # global-norm clip; 0 disables
    mask_ratio: float = 0.75
    beta: float = 2.0
    lambda_dist: float = 1.0
    ema_start: float = 0.999
    ema_end: float = 0.9999
    use_ema: bool = True
    normalize_targets: bool = False
    seed: int = 0
    precision: str = "float64"
    corpus: str = ""
    max_steps: int = 0  # 0 = epochs * steps_per_epoch
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        cfg = _build(cls, d, "")
        validate(cfg)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


# Full-scale reference values (ViT-B/16, 224px, batch 4096), as dotted keys.
FULL_SCALE = {
    "epochs": 25,
    "batch_size": 4096,
    "lr": 5e-4,
    "final_lr": 1e-5,
    "warmup_epochs": 1.0,
    "weight_decay": 0.5,
    "mask_ratio": 0.75,
    "beta": 2.0,
    "ema_start": 0.999,
    "ema_end": 0.9999,
    "model.vision.image_size": 224,
    "model.vision.patch_size": 16,
    "model.vision.depth": 12,
    "model.vision.width": 768,
    "model.vision.heads": 12,
    "model.text.depth": 12,
    "model.text.width": 512,
    "model.text.heads": 8,
    "model.text.context_length": 77,
}


def _build(cls, d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in d:
            continue
        value = d[name]
        default = f.default_factory() if f.default is dataclasses.MISSING else f.default
        key = path + name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key + ".")
        else:
            kwargs[name] = _coerce(value, type(default), key)
    return cls(**kwargs)


def _coerce(value, typ, key):
    if typ is bool:
        if isinstance(value, bool):
            return value
    elif typ is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif typ is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif typ is str:
        if isinstance(value, str):
            return value
    raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")


def validate(cfg: TrainConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    v, t, m = cfg.model.vision, cfg.model.text, cfg.model
    need(cfg.objective in OBJECTIVES, f"objective must be one of {OBJECTIVES}")
    need(cfg.precision in PRECISIONS, f"precision must be one of {PRECISIONS}")
    need(cfg.epochs >= 1, "epochs must be >= 1")
    need(cfg.batch_size >= 1, "batch_size must be >= 1")
    need(cfg.lr >= 0 and cfg.final_lr >= 0, "learning rates must be >= 0")
    need(cfg.warmup_epochs >= 0, "warmup_epochs must be >= 0")
    need(cfg.weight_decay >= 0, "weight_decay must be >= 0")
    need(cfg.decay_mode in DECAY_MODES, f"decay_mode must be one of {DECAY_MODES}")
    need(cfg.decay_mode == "lr_scaled" or cfg.weight_decay < 1, "independent weight_decay must be < 1")
    need(0 <= cfg.adam_beta1 < 1 and 0 <= cfg.adam_beta2 < 1, "adam betas must be in [0, 1)")
    need(cfg.adam_eps > 0, "adam_eps must be > 0")
    need(cfg.grad_clip >= 0, "grad_clip must be >= 0")
    need(0 <= cfg.mask_ratio <= 1, "mask_ratio must be in [0, 1]")
    need(cfg.beta > 0, "beta must be > 0")
    need(cfg.lambda_dist >= 0, "lambda_dist must be >= 0")
    need(0 <= cfg.ema_start <= 1 and 0 <= cfg.ema_end <= 1, "EMA weights must be in [0, 1]")
    need(cfg.max_steps >= 0, "max_steps must be >= 0")
    need(v.image_size % v.patch_size == 0, "image_size must be divisible by patch_size")
    for name, c in (("vision", v), ("text", t)):
        need(c.depth >= 1 and c.width >= 1 and c.heads >= 1, f"{name}: depth/width/heads must be >= 1")
        need(c.width % c.heads == 0, f"{name}: width must be divisible by heads")
        need(c.mlp_ratio >= 1, f"{name}: mlp_ratio must be >= 1")
    need(t.context_length >= 2, "text.context_length must be >= 2")
    need(t.vocab_size >= 0, "text.vocab_size must be >= 0")
    need(m.embed_dim >= 1, "embed_dim must be >= 1")
    need(m.decoder_depth >= 1, "decoder_depth must be >= 1")
    need(m.init_temperature > 0, "init_temperature must be > 0")


def _parse_scalar(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict[str, Any], overrides) -> dict[str, Any]:
    """Apply ``key.path=value`` strings (or (key, value) pairs) to a config dict.

    Values are parsed as JSON when possible, else kept as strings. Later
    overrides win. Unknown keys are caught by ``TrainConfig.from_dict``.
    """
    out = json.loads(json.dumps(d))
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            value = _parse_scalar(raw)
        else:
            key, value = item
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return out


def default_dict() -> dict[str, Any]:
    return TrainConfig().to_dict()
