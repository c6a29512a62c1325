"""Finite-difference check of the complete training loss."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import encoder
from .config import ModelConfig
from .heads import model_loss

TOLERANCE = 1e-4


def random_batch(config: ModelConfig, seed: int, batch: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random images and multi-hot labels with at least one positive per row."""
    rng = np.random.default_rng(seed)
    s = config.image_size
    images = rng.random((batch, 3, s, s))
    labels = (rng.random((batch, config.num_classes)) < 0.5).astype(np.float64)
    labels[np.arange(batch), rng.integers(0, config.num_classes, batch)] = 1.0
    return images, labels


def model_gradient_report(
    config: ModelConfig,
    seed: int = 0,
    batch: int = 2,
    coords_per_param: int | None = 2,
    h: float = 1e-5,
) -> dict[str, float]:
    """Per-parameter max relative error of the full loss gradient.

    Parameters are initialized in float64; the finite differences are
    evaluated in extended precision so that roundoff stays well below the
    tolerance even for coordinates with tiny gradients.
    """
    params = encoder.init_params(config, seed, dtype=np.float64)
    images, labels = random_batch(config, seed, batch)

    def loss(p):
        dtype = p["cls_tokens"].dtype
        out = encoder.forward(images.astype(dtype), config, p, capture=False)
        terms, _, _ = model_loss(out, p, labels.astype(dtype), config)
        return terms.total

    tensors = {k: ad.Tensor(v) for k, v in params.items()}
    return ad.gradient_report(loss, tensors, h=h, max_coords=coords_per_param, seed=seed,
                              oracle_dtype=np.longdouble)
