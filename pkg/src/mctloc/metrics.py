"""Seed-quality metrics: mIoU, FP/FN rates, pIoU and PxAP."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

THRESHOLDS = np.arange(101) / 100.0
DEFAULT_TAU = 0.35


def seed_prediction(maps: np.ndarray, class_filter: np.ndarray | None, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Per-pixel label in {0..C} from (..., C, H, W) scores.

    A pixel takes the argmax over present classes (lowest index on ties) when
    that max reaches ``tau``; otherwise it is background.
    """
    scores = np.asarray(maps, dtype=np.float64)
    if class_filter is not None:
        present = (np.asarray(class_filter) > 0)[..., None, None]
        scores = np.where(present, scores, -np.inf)
    best = scores.argmax(axis=-3)
    top = np.take_along_axis(scores, best[..., None, :, :], axis=-3)[..., 0, :, :]
    return np.where(top >= tau, best + 1, 0)


def confusion(pred: np.ndarray, gt: np.ndarray, num_labels: int) -> np.ndarray:
    """(K, K) counts, rows = ground truth, columns = prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    idx = gt.astype(np.int64).ravel() * num_labels + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_labels * num_labels).reshape(num_labels, num_labels)


def iou_from_confusion(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-label IoU (nan where a label is absent from both sides) and their mean."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(len(tp), np.nan)
    ok = union > 0
    iou[ok] = tp[ok] / union[ok]
    return iou, float(np.mean(iou[ok])) if ok.any() else float("nan")


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[np.ndarray, float]:
    """IoU over labels {0..C} (0 = background) and their mean."""
    return iou_from_confusion(confusion(pred, gt, num_classes + 1))


def fp_fn_from_confusion(cm: np.ndarray) -> tuple[float, float]:
    total = cm.sum()
    if total == 0:
        return 0.0, 0.0
    tp_fg = np.diag(cm)[1:].sum()
    fp = cm[:, 1:].sum() - tp_fg
    fn = cm[1:, :].sum() - tp_fg
    return float(fp / total), float(fn / total)


def fp_fn(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Foreground false-positive and false-negative pixels over all pixels."""
    k = int(max(np.max(pred, initial=0), np.max(gt, initial=0))) + 1
    return fp_fn_from_confusion(confusion(pred, gt, k))


def threshold_counts(scores: np.ndarray, gt: np.ndarray, thresholds: np.ndarray = THRESHOLDS):
    """True/false positive counts of ``scores >= t`` for every threshold, plus #positives."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=bool).ravel()
    if scores.shape != gt.shape:
        raise ShapeError(f"scores {scores.shape} and ground truth {gt.shape} differ")
    # score >= thresholds[k]  <=>  k < number of thresholds <= score
    pos = np.searchsorted(thresholds, scores, side="right")
    nt = len(thresholds)
    hist_pos = np.bincount(pos[gt], minlength=nt + 1)
    hist_neg = np.bincount(pos[~gt], minlength=nt + 1)
    tp = np.cumsum(hist_pos[::-1])[::-1][1:]
    fp = np.cumsum(hist_neg[::-1])[::-1][1:]
    return tp, fp, int(gt.sum())


def pr_area(precision: np.ndarray, recall: np.ndarray) -> float:
    """Trapezoidal area under a PR curve anchored at (recall 0, precision 1).

    Points sharing a recall value keep their highest precision. The terms
    are added with a correctly rounded sum so the result does not depend on
    summation order.
    """
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[1.0], precision])
    uniq = np.unique(r)
    best = np.array([p[r == u].max() for u in uniq])
    return math.fsum(np.diff(uniq) * (best[1:] + best[:-1]) / 2.0)


def pxap_piou(scores: np.ndarray, gt: np.ndarray, thresholds: np.ndarray = THRESHOLDS) -> tuple[float, float]:
    """Peak IoU over the threshold sweep and the pixel average precision."""
    tp, fp, npos = threshold_counts(scores, gt, thresholds)
    if npos == 0:
        raise ValueError("ground truth has no positive pixels")
    fn = npos - tp
    iou = tp / (tp + fp + fn)
    predicted = tp + fp
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / npos
    return float(iou.max()), pr_area(precision, recall)


def classwise_pxap_piou(maps: np.ndarray, masks: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean pIoU / PxAP over classes, each pooled over images containing the class.

    ``maps`` is (B, C, H, W) in [0, 1], ``masks`` (B, H, W), ``labels`` (B, C).
    Classes without any ground-truth pixel are skipped with a warning.
    """
    pious, pxaps = [], []
    for c in range(maps.shape[1]):
        sel = labels[:, c] > 0
        gt = masks[sel] == c + 1
        if not gt.any():
            warnings.warn(f"class {c} has no ground-truth pixels; skipped", stacklevel=2)
            continue
        piou, pxap = pxap_piou(maps[sel, c], gt)
        pious.append(piou)
        pxaps.append(pxap)
    if not pious:
        return float("nan"), float("nan")
    return float(np.mean(pious)), float(np.mean(pxaps))


@dataclass
class MetricReport:
    per_class_iou: np.ndarray
    miou: float
    fp: float
    fn: float
    piou: float
    pxap: float
    echo: dict = field(default_factory=dict)

    CSV_HEADER = ("miou", "fp", "fn", "piou", "pxap")

    def row(self) -> dict:
        out = dict(self.echo)
        out.update(miou=self.miou, fp=self.fp, fn=self.fn, piou=self.piou, pxap=self.pxap)
        for i, v in enumerate(self.per_class_iou):
            out[f"iou_{i}"] = v
        return out


class SeedAccumulator:
    """Accumulates confusion counts and pixel scores across batches."""

    def __init__(self, num_classes: int, tau: float = DEFAULT_TAU):
        self.num_classes = num_classes
        self.tau = tau
        self.cm = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
        self._maps: list[np.ndarray] = []
        self._masks: list[np.ndarray] = []
        self._labels: list[np.ndarray] = []

    def add(self, maps: np.ndarray, masks: np.ndarray, labels: np.ndarray) -> None:
        pred = seed_prediction(maps, labels, self.tau)
        self.cm += confusion(pred, masks, self.num_classes + 1)
        self._maps.append(maps.astype(np.float32))
        self._masks.append(masks)
        self._labels.append(labels)

    def report(self, **echo) -> MetricReport:
        iou, m = iou_from_confusion(self.cm)
        fp, fn = fp_fn_from_confusion(self.cm)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            piou, pxap = classwise_pxap_piou(
                np.concatenate(self._maps), np.concatenate(self._masks), np.concatenate(self._labels)
            )
        return MetricReport(iou, m, fp, fn, piou, pxap, dict(echo, tau=self.tau))
