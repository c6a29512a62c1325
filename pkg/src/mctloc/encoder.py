"""Transformer encoder with one learnable class token per class.

Token layout along the sequence axis: indices ``[0, C)`` are class tokens,
``[C, C + M)`` are patch tokens in row-major grid order. Layers are pre-norm
(LN -> MHA -> residual, LN -> MLP -> residual) and every layer's attention
probabilities are captured.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import tensorio
from .autodiff import Tensor
from .config import ModelConfig, format_kv, from_kv, parse_kv
from .errors import ConfigError, FormatError, NumericalError, ShapeError

Params = Mapping[str, "Tensor | np.ndarray"]


@dataclass
class EncoderOutput:
    tokens: Tensor
    """Final token state, (B, C+M, D) or (C+M, D) for an unbatched image."""
    attention: np.ndarray | None
    """Attention probabilities, (B, L, H, C+M, C+M) or (L, H, C+M, C+M)."""
    class_tokens: list[Tensor]
    """Output class tokens of every layer, each (B, C, D)."""


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, d, p = config.num_classes, config.embed_dim, config.patch_size
    hidden = int(round(d * config.mlp_ratio))
    shapes = {
        "patch_embed.weight": (3 * p * p, d),
        "patch_embed.bias": (d,),
        "cls_tokens": (c, d),
        "pos_embed": (config.num_tokens, d),
    }
    for l in range(config.layers):
        pre = f"blocks.{l}."
        shapes.update({
            pre + "ln1.gain": (d,),
            pre + "ln1.bias": (d,),
            pre + "attn.qkv.weight": (d, 3 * d),
            pre + "attn.qkv.bias": (3 * d,),
            pre + "attn.proj.weight": (d, d),
            pre + "attn.proj.bias": (d,),
            pre + "ln2.gain": (d,),
            pre + "ln2.bias": (d,),
            pre + "mlp.fc1.weight": (d, hidden),
            pre + "mlp.fc1.bias": (hidden,),
            pre + "mlp.fc2.weight": (hidden, d),
            pre + "mlp.fc2.bias": (d,),
        })
    k = config.cam_kernel
    shapes["head.conv.weight"] = (c, d, k, k)
    shapes["head.conv.bias"] = (c,)
    return shapes


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Weights ~ truncated N(0, 0.02); biases 0; LayerNorm gains 1.

    All class tokens start from one shared random vector.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name == "cls_tokens":
            shared = _trunc_normal(rng, (shape[1],))
            value = np.tile(shared, (shape[0], 1))
        elif name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            value = _trunc_normal(rng, shape)
        params[name] = value.astype(dtype)
    return params


def as_tensors(params: Params, requires_grad: bool = False) -> dict[str, Tensor]:
    return {
        k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=requires_grad)
        for k, v in params.items()
    }


def patchify(images: Tensor, patch: int) -> Tensor:
    """(B, 3, S, S) -> (B, M, 3*p*p); each patch flattened as (channel, row, col)."""
    b, ch, h, w = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image size {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = ad.reshape(images, (b, ch, gh, patch, gw, patch))
    x = ad.permute(x, (0, 2, 4, 1, 3, 5))
    return ad.reshape(x, (b, gh * gw, ch * patch * patch))


def embed_patches(images, weight, bias, patch: int) -> Tensor:
    """Linear projection of non-overlapping patches into tokens.

    Token ``i`` corresponds to grid cell ``(i // N, i % N)``. Accepts a single
    (3, S, S) image or a (B, 3, S, S) batch.
    """
    images = images if isinstance(images, Tensor) else Tensor(images)
    single = images.ndim == 3
    if single:
        images = ad.reshape(images, (1,) + images.shape)
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    bias = bias if isinstance(bias, Tensor) else Tensor(bias)
    tokens = ad.matmul(patchify(images, patch), weight) + bias
    if single:
        tokens = ad.reshape(tokens, tokens.shape[1:])
    return tokens


def _attention(x: Tensor, p: dict[str, Tensor], pre: str, config: ModelConfig, rng):
    b, t, d = x.shape
    h, dh = config.heads, config.head_dim
    qkv = ad.matmul(x, p[pre + "attn.qkv.weight"]) + p[pre + "attn.qkv.bias"]
    qkv = ad.permute(ad.reshape(qkv, (b, t, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    denom = dh if config.attn_scale == "head" else d
    logits = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(denom))
    attn = ad.softmax_rows(logits)
    probs = attn.data
    if config.attn_dropout > 0 and rng is not None:
        keep = (rng.random(attn.shape) >= config.attn_dropout) / (1.0 - config.attn_dropout)
        attn = attn * Tensor(keep.astype(attn.dtype))
    out = ad.matmul(attn, v)
    out = ad.reshape(ad.permute(out, (0, 2, 1, 3)), (b, t, d))
    out = ad.matmul(out, p[pre + "attn.proj.weight"]) + p[pre + "attn.proj.bias"]
    return out, probs


def forward(
    images,
    config: ModelConfig,
    params: Params,
    capture: bool = True,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Run the encoder on one (3, S, S) image or a (B, 3, S, S) batch.

    ``rng`` enables attention dropout when ``config.attn_dropout > 0``.
    """
    p = as_tensors(params)
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=p["cls_tokens"].dtype))
    single = images.ndim == 3
    if single:
        images = ad.reshape(images, (1,) + images.shape)
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != config.image_size or images.shape[3] != config.image_size:
        raise ShapeError(f"expected images (B, 3, {config.image_size}, {config.image_size}), got {images.shape}")
    b = images.shape[0]
    c = config.num_classes

    patches = ad.matmul(patchify(images, config.patch_size), p["patch_embed.weight"]) + p["patch_embed.bias"]
    x = ad.concat([ad.expand(p["cls_tokens"], b), patches], axis=1) + p["pos_embed"]

    maps = []
    class_tokens = []
    for l in range(config.layers):
        pre = f"blocks.{l}."
        h = ad.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"], config.ln_eps)
        attn_out, probs = _attention(h, p, pre, config, rng)
        x = x + attn_out
        h = ad.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"], config.ln_eps)
        h = ad.gelu(ad.matmul(h, p[pre + "mlp.fc1.weight"]) + p[pre + "mlp.fc1.bias"])
        x = x + (ad.matmul(h, p[pre + "mlp.fc2.weight"]) + p[pre + "mlp.fc2.bias"])
        if not np.all(np.isfinite(x.data)):
            raise NumericalError(f"non-finite activation at output of layer {l}")
        if capture:
            maps.append(probs)
        class_tokens.append(x[:, :c, :])

    attention = np.stack(maps, axis=1) if capture else None
    if single:
        x = ad.reshape(x, x.shape[1:])
        attention = attention[0] if capture else None
    return EncoderOutput(tokens=x, attention=attention, class_tokens=class_tokens)


# -- checkpoints ----------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_checkpoint(path: str | os.PathLike, config: ModelConfig, params: Params) -> None:
    """Write one MCT1 file per parameter plus a ``key=value`` manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else value
        tensorio.save(root / f"{name}.mct1", arr)
    (root / MANIFEST).write_text(format_kv(config))


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FormatError(f"checkpoint manifest missing: {manifest}")
    values = parse_kv(manifest.read_text())
    names = {f.name for f in fields(ModelConfig)}
    config = from_kv(ModelConfig, {k: v for k, v in values.items() if k in names})
    params = {}
    for name, shape in param_shapes(config).items():
        f = root / f"{name}.mct1"
        if not f.is_file():
            raise FormatError(f"checkpoint tensor missing: {f}")
        arr = tensorio.load(f)
        if arr.shape != shape:
            raise FormatError(f"{name}: stored shape {arr.shape} != expected {shape}")
        params[name] = arr
    return config, params
