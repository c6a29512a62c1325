"""Classification heads, pooling, and the training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigError

SIGMOID_CLAMP = 1e-12


def class_token_scores(class_tokens: Tensor) -> Tensor:
    """Class-wise average pooling over the embedding axis: (..., C, D) -> (..., C)."""
    return ad.mean(class_tokens, axis=-1)


def mlsm_loss(logits: Tensor, labels) -> Tensor:
    """Multi-label soft margin loss, averaged over classes (and over the batch).

    sigma is clamped into [1e-12, 1 - 1e-12] before the log; the loss is
    evaluated in float64 so the clamp is representable.
    """
    logits = ad.astype(logits, np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ConfigError(f"labels shape {y.shape} != logits shape {logits.shape}")
    s = ad.clip(ad.sigmoid(logits), SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    pos = ad.log(s) * Tensor(y)
    neg = ad.log(1.0 - s) * Tensor(1.0 - y)
    return -ad.mean(pos + neg)


def rank_weights(m: int, lam: float, dtype=np.float64) -> np.ndarray:
    """lam**(j-1) for ranks j = 1..m, with 0**0 == 1."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"GWRP decay must lie in [0, 1], got {lam}")
    return np.power(np.asarray(lam, dtype=dtype), np.arange(m, dtype=dtype))


def gwrp(p: Tensor, lam: float) -> Tensor:
    """Global weighted ranking pooling over axis -2: (..., M, C) -> (..., C).

    Each column is ranked in descending order (stable: earlier index wins a
    tie) and the j-th ranked value gets weight lam**(j-1) / sum(weights).
    The ranking is frozen at forward time, so the backward pass routes each
    rank weight straight to the position that held that rank.
    """
    m = p.shape[-2]
    w = rank_weights(m, lam, p.dtype)
    total = w.sum()
    order = np.argsort(-p.data, axis=-2, kind="stable")
    weights = np.empty_like(p.data)
    np.put_along_axis(weights, order, np.broadcast_to(w[:, None], p.shape), axis=-2)
    # contiguous layout keeps the summation order identical to gap(), so lam=1 matches bit-for-bit
    y = np.sum(np.ascontiguousarray(weights * p.data), axis=-2) / total

    def bw(g):
        return (weights * (np.expand_dims(g, -2) / total),)

    return Tensor._op(y, (p,), bw)


def gap(p: Tensor) -> Tensor:
    """Global average pooling over axis -2."""
    return ad.mean(p, axis=-2)


def gmp(p: Tensor) -> Tensor:
    """Global max pooling over axis -2."""
    return ad.max_(p, axis=-2)


def pool(p: Tensor, config: ModelConfig) -> Tensor:
    if config.pooling == "gap":
        return gap(p)
    if config.pooling == "gmp":
        return gmp(p)
    return gwrp(p, config.gwrp_lambda)


def cam_head(patch_tokens: Tensor, weight, bias, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Patch tokens (B, M, D) -> feature maps F (B, C, N, N) and pooled scores (B, C)."""
    b, m, d = patch_tokens.shape
    n = math.isqrt(m)
    if n * n != m:
        raise ConfigError(f"number of patch tokens {m} is not a perfect square")
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    bias = bias if isinstance(bias, Tensor) else Tensor(bias)
    grid = ad.reshape(ad.transpose(patch_tokens), (b, d, n, n))
    f = ad.conv2d(grid, weight, bias)
    c = f.shape[1]
    flat = ad.transpose(ad.reshape(f, (b, c, m)))
    return f, pool(flat, config)


def similarity(class_tokens: Tensor) -> Tensor:
    """Raw dot-product similarity T @ T^T: (..., C, D) -> (..., C, C)."""
    return ad.matmul(class_tokens, ad.transpose(class_tokens))


def cct_loss(class_tokens_per_layer: Sequence[Tensor]) -> Tensor:
    """Contrastive class-token loss.

    For each layer, row i of the C x C similarity matrix is treated as
    logits whose target class is i; the softmax cross-entropy is averaged
    over rows, layers (and the batch, when present).
    """
    if not class_tokens_per_layer:
        raise ConfigError("cct_loss needs at least one layer of class tokens")
    terms = []
    for tokens in class_tokens_per_layer:
        logp = ad.log_softmax_rows(similarity(tokens))
        c = tokens.shape[-2]
        eye = Tensor(np.eye(c, dtype=tokens.dtype))
        diag = ad.sum_(logp * eye, axis=-1)
        terms.append(-ad.mean(diag))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


@dataclass
class LossTerms:
    total: Tensor
    cls_class: Tensor
    cls_patch: Tensor
    cct: Tensor | None

    def as_row(self) -> tuple[float, float, float, float]:
        return (
            float(self.total.data),
            float(self.cls_class.data),
            float(self.cls_patch.data),
            float(self.cct.data) if self.cct is not None else 0.0,
        )


def total_loss(y_cls: Tensor, y_patch: Tensor, labels, cct: Tensor | None,
               alpha: float = 1.0, beta: float = 1.0, gamma: float = 1.0) -> LossTerms:
    """alpha * mlsm(y_cls) + beta * mlsm(y_patch) + gamma * cct."""
    if min(alpha, beta, gamma) < 0:
        raise ConfigError("loss weights must be non-negative")
    l_cls = mlsm_loss(y_cls, labels)
    l_pat = mlsm_loss(y_patch, labels)
    total = l_cls * alpha + l_pat * beta
    if cct is not None and gamma > 0:
        total = total + cct * gamma
    return LossTerms(total, l_cls, l_pat, cct)


def model_loss(out, params, labels, config: ModelConfig) -> tuple[LossTerms, Tensor, Tensor]:
    """Compose heads and losses on an encoder output.

    Returns the loss terms, the PatchCAM feature maps F and the class-token
    scores.
    """
    c = config.num_classes
    tokens = out.tokens
    y_cls = class_token_scores(tokens[:, :c, :])
    f, y_patch = cam_head(tokens[:, c:, :], params["head.conv.weight"], params["head.conv.bias"], config)
    depth = config.cct_depth
    cct = cct_loss(out.class_tokens[-depth:]) if depth > 0 else None
    terms = total_loss(y_cls, y_patch, labels, cct, config.alpha, config.beta, config.gamma)
    return terms, f, y_cls
