"""Model / training configuration and the flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .errors import ConfigError

POOLING_MODES = ("gap", "gmp", "gwrp")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 5
    grid: int = 8
    embed_dim: int = 64
    layers: int = 4
    heads: int = 4
    image_size: int = 64
    mlp_ratio: float = 4.0
    pooling: str = "gwrp"
    gwrp_lambda: float = 0.9  # best of the {0.9, 0.96, 0.996} sweep at 64 patches
    fuse_layers: int = 3
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    # CCT is applied to the output class tokens of the last `cct_layers` layers; -1 means all
    cct_layers: int = -1
    attn_scale: str = "head"  # "head": sqrt(D/H); "full": sqrt(D)
    attn_dropout: float = 0.0
    cam_kernel: int = 3
    ln_eps: float = 1e-6
    affinity_raw: bool = False
    affinity_all_layers: bool = False
    refine_iterations: int = 1
    refine_renorm: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.grid < 2:
            raise ConfigError(f"grid must be >= 2, got {self.grid}")
        if self.layers < 2:
            raise ConfigError(f"layers must be >= 2, got {self.layers}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_size % self.grid:
            raise ConfigError(f"image_size {self.image_size} not divisible by grid {self.grid}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if not 0.0 <= self.gwrp_lambda <= 1.0:
            raise ConfigError(f"gwrp_lambda must lie in [0, 1], got {self.gwrp_lambda}")
        if not 1 <= self.fuse_layers <= self.layers:
            raise ConfigError(f"fuse_layers must lie in [1, {self.layers}], got {self.fuse_layers}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not -1 <= self.cct_layers <= self.layers:
            raise ConfigError(f"cct_layers must lie in [-1, {self.layers}], got {self.cct_layers}")
        if self.attn_scale not in ("head", "full"):
            raise ConfigError(f"attn_scale must be 'head' or 'full', got {self.attn_scale!r}")
        if self.cam_kernel < 1 or self.cam_kernel % 2 == 0:
            raise ConfigError(f"cam_kernel must be a positive odd integer, got {self.cam_kernel}")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError(f"attn_dropout must lie in [0, 1), got {self.attn_dropout}")
        if self.refine_iterations < 0:
            raise ConfigError("refine_iterations must be >= 0")

    @property
    def patch_size(self) -> int:
        return self.image_size // self.grid

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_classes + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def cct_depth(self) -> int:
        return self.layers if self.cct_layers < 0 else self.cct_layers

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_grad_norm: float = 0.0  # 0 disables clipping
    batch_size: int = 16
    epochs: int = 30
    hflip: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr must be > 0, batch_size >= 1, epochs >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(raw: str, typ, key: str):
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(obj) -> str:
    lines = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def from_kv(cls, values: dict[str, str], strict: bool = True):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            if strict:
                raise ConfigError(f"unknown {cls.__name__} key {key!r}")
            continue
        kwargs[key] = _coerce(raw, known[key].type, key)
    return cls(**kwargs)


def load_configs(path: str | os.PathLike | None) -> tuple[ModelConfig, TrainConfig]:
    """Read one flat file holding both model and training keys."""
    if path is None:
        return ModelConfig(), TrainConfig()
    with open(path) as fh:
        values = parse_kv(fh.read())
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = from_kv(ModelConfig, {k: v for k, v in values.items() if k in model_keys})
    train = from_kv(TrainConfig, {k: v for k, v in values.items() if k in train_keys})
    return model, train
