"""Localization maps from captured attention and the PatchCAM head.

All functions are pure numpy and accept optional leading batch axes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


class MapKind(str, enum.Enum):
    ATTENTION = "attention"
    PATCHCAM = "patchcam"
    FUSED = "fused"
    REFINED = "refined"


@dataclass
class LocalizationMaps:
    maps: np.ndarray
    """(..., C, N, N) scores."""
    kind: MapKind
    class_filter: np.ndarray | None = None
    """(..., C) multi-hot of classes considered present; None keeps every class."""

    def filtered(self) -> np.ndarray:
        if self.class_filter is None:
            return self.maps
        return self.maps * (np.asarray(self.class_filter) > 0)[..., None, None]


def minmax_normalize(maps: np.ndarray) -> np.ndarray:
    """Per-map min-max scaling over the last two axes; constant maps become zeros."""
    lo = maps.min(axis=(-2, -1), keepdims=True)
    hi = maps.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (maps - lo) / safe, 0.0)


def fuse_attention(stack: np.ndarray, k: int) -> np.ndarray:
    """Mean over heads, then over the last ``k`` layers.

    ``stack`` is (..., L, H, T, T); the result is (..., T, T).
    """
    layers = stack.shape[-4]
    if not 1 <= k <= layers:
        raise ConfigError(f"fuse depth K must lie in [1, {layers}], got {k}")
    per_layer = stack.mean(axis=-3)
    return per_layer[..., layers - k:, :, :].mean(axis=-3)


def extract_class_to_patch(fused: np.ndarray, num_classes: int, normalize: bool = True) -> LocalizationMaps:
    """Rows [0, C), columns [C, C+M) reshaped to (..., C, N, N)."""
    c = num_classes
    m = fused.shape[-1] - c
    n = math.isqrt(m)
    if n * n != m:
        raise ShapeError(f"{m} patch tokens do not form a square grid")
    block = fused[..., :c, c:]
    maps = block.reshape(block.shape[:-1] + (n, n))
    if normalize:
        maps = minmax_normalize(maps)
    return LocalizationMaps(maps, MapKind.ATTENTION)


def extract_affinity(fused: np.ndarray, num_classes: int, raw: bool = False) -> np.ndarray:
    """Patch-to-patch block (..., M, M), rows rescaled to sum to one unless ``raw``."""
    aff = fused[..., num_classes:, num_classes:]
    if raw:
        return aff.copy()
    sums = aff.sum(axis=-1, keepdims=True)
    return aff / np.where(sums > 0, sums, 1.0)


def refine(maps: LocalizationMaps, affinity: np.ndarray, iterations: int = 1) -> LocalizationMaps:
    """``out[c, i] = sum_k affinity[i, k] * maps[c, k]`` over flattened grid positions."""
    x = maps.maps
    *lead, c, n, n2 = x.shape
    m = n * n2
    if affinity.shape[-2:] != (m, m):
        raise ShapeError(f"affinity {affinity.shape} does not match maps {x.shape}")
    flat = x.reshape(tuple(lead) + (c, m))
    aff_t = np.swapaxes(affinity, -1, -2)
    for _ in range(iterations):
        flat = flat @ aff_t
    return LocalizationMaps(flat.reshape(x.shape), MapKind.REFINED, maps.class_filter)


def patch_cam(features: np.ndarray) -> LocalizationMaps:
    """ReLU then per-class min-max normalization of the CAM head output."""
    return LocalizationMaps(minmax_normalize(np.maximum(features, 0.0)), MapKind.PATCHCAM)


def fuse_maps(mct: LocalizationMaps, pcam: LocalizationMaps) -> LocalizationMaps:
    if mct.kind != MapKind.ATTENTION or pcam.kind != MapKind.PATCHCAM:
        raise ConfigError(f"fusion needs attention x patchcam maps, got {mct.kind.value} x {pcam.kind.value}")
    if mct.maps.shape != pcam.maps.shape:
        raise ShapeError(f"cannot fuse maps of shapes {mct.maps.shape} and {pcam.maps.shape}")
    return LocalizationMaps(minmax_normalize(mct.maps * pcam.maps), MapKind.FUSED, mct.class_filter)


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights (n_out, n_in), half-pixel (align_corners=False) convention."""
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    w = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(w, (rows, i0), 1.0 - frac)
    np.add.at(w, (rows, i1), frac)
    return w


def upsample_maps(maps: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the last two axes to ``size``."""
    h, w = maps.shape[-2:]
    wy = _bilinear_matrix(h, size[0])
    wx = _bilinear_matrix(w, size[1])
    return np.clip(wy @ maps @ wx.T, 0.0, 1.0)
