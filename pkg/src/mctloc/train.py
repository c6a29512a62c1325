"""Adam training loop for the encoder and both classification heads."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import encoder
from .config import ModelConfig, TrainConfig
from .data import Dataset
from .errors import ConfigError, NumericalError
from .heads import model_loss

log = logging.getLogger(__name__)

CURVE_HEADER = "epoch,step,loss_total,loss_cls_class,loss_cls_patch,loss_cct"

# sub-seed offsets derived from the run seed
SHUFFLE_OFFSET = 1
DROPOUT_OFFSET = 2
FLIP_OFFSET = 3


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        cfg = self.cfg
        self.t += 1
        if cfg.clip_grad_norm > 0:
            norm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
            if norm > cfg.clip_grad_norm:
                factor = cfg.clip_grad_norm / norm
                grads = {k: None if g is None else g * factor for k, g in grads.items()}
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + cfg.adam_eps)
            out[k] = (p - cfg.lr * update).astype(p.dtype)
        return out


@dataclass
class TrainResult:
    config: ModelConfig
    params: dict[str, np.ndarray]
    curve: list[tuple] = field(default_factory=list)

    def curve_csv(self) -> str:
        lines = [CURVE_HEADER]
        for epoch, step, *losses in self.curve:
            lines.append(f"{epoch},{step}," + ",".join(repr(float(x)) for x in losses))
        return "\n".join(lines) + "\n"

    def epoch_means(self) -> np.ndarray:
        """(epochs, 4) mean of total/cls_class/cls_patch/cct per epoch."""
        arr = np.array([row[2:] for row in self.curve])
        epochs = np.array([row[0] for row in self.curve])
        return np.stack([arr[epochs == e].mean(axis=0) for e in np.unique(epochs)])


def train(
    dataset: Dataset,
    config: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    params: dict[str, np.ndarray] | None = None,
) -> TrainResult:
    """Deterministic mini-batch training for a fixed seed."""
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot train on an empty dataset")
    if dataset.num_classes != config.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, config expects {config.num_classes}")
    params = dict(params) if params is not None else encoder.init_params(config, seed)
    opt = Adam(params, train_cfg)
    shuffle_rng = np.random.default_rng(seed + SHUFFLE_OFFSET)
    drop_rng = np.random.default_rng(seed + DROPOUT_OFFSET) if config.attn_dropout > 0 else None
    flip_rng = np.random.default_rng(seed + FLIP_OFFSET)
    dtype = params["cls_tokens"].dtype
    result = TrainResult(config, params)
    bs = train_cfg.batch_size

    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        for step, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            images = dataset.images[idx].astype(dtype)
            if train_cfg.hflip:
                flip = flip_rng.random(len(idx)) < 0.5
                images[flip] = images[flip][..., ::-1]
            labels = dataset.labels[idx].astype(dtype)
            tensors = encoder.as_tensors(params, requires_grad=True)
            try:
                out = encoder.forward(images, config, tensors, capture=False, rng=drop_rng)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch} step {step}: {exc}") from exc
            terms, _, _ = model_loss(out, tensors, labels, config)
            row = terms.as_row()
            if not np.all(np.isfinite(row)):
                raise NumericalError(f"non-finite loss at epoch {epoch} step {step}: {row}")
            terms.total.backward()
            params = opt.step(params, {k: t.grad for k, t in tensors.items()})
            result.curve.append((epoch, step) + row)
        if log.isEnabledFor(logging.INFO):
            log.info("epoch %d mean loss %.4f", epoch, result.epoch_means()[-1][0])
    result.params = params
    return result


def save_curve(result: TrainResult, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(result.curve_csv())
