"""End-to-end map extraction and seed evaluation for a trained model."""

from __future__ import annotations

import numpy as np

from . import encoder, heads
from . import maps as M
from .config import ModelConfig
from .data import Dataset
from .metrics import DEFAULT_TAU, MetricReport, SeedAccumulator

# map variants produced by `localize`, in pipeline order
ATTENTION = "attention"
ATTENTION_REFINED = "attention-refined"
PATCHCAM = "patchcam"
FUSED = "fused"
REFINED = "refined"
ALL_KINDS = (ATTENTION, ATTENTION_REFINED, PATCHCAM, FUSED, REFINED)


def class_filter_from_scores(y_cls: np.ndarray) -> np.ndarray:
    """Classes whose sigmoid class-token score reaches 0.5."""
    return (y_cls >= 0.0).astype(np.float32)


def localize(
    images: np.ndarray,
    config: ModelConfig,
    params,
    class_filter: np.ndarray | None = None,
    k: int | None = None,
    iterations: int | None = None,
) -> dict[str, M.LocalizationMaps]:
    """Every map variant for a (B, 3, S, S) batch.

    ``class_filter`` (B, C) zeroes absent classes; when None the class-token
    head's predictions decide.
    """
    k = config.fuse_layers if k is None else k
    iterations = config.refine_iterations if iterations is None else iterations
    dtype = params["cls_tokens"].dtype
    out = encoder.forward(np.asarray(images, dtype=dtype), config, params, capture=True)
    c = config.num_classes
    tokens = out.tokens
    f, _ = heads.cam_head(tokens[:, c:, :], params["head.conv.weight"], params["head.conv.bias"], config)
    if class_filter is None:
        class_filter = class_filter_from_scores(heads.class_token_scores(tokens[:, :c, :]).data)

    att = out.attention.astype(np.float64)
    fused_att = M.fuse_attention(att, k)
    aff_src = M.fuse_attention(att, config.layers) if config.affinity_all_layers else fused_att
    affinity = M.extract_affinity(aff_src, c, raw=config.affinity_raw)

    def refined(x: M.LocalizationMaps) -> M.LocalizationMaps:
        r = M.refine(x, affinity, iterations)
        if config.refine_renorm:
            r.maps = M.minmax_normalize(r.maps)
        return r

    mct = M.extract_class_to_patch(fused_att, c)
    pcam = M.patch_cam(f.data.astype(np.float64))
    fused = M.fuse_maps(mct, pcam)
    result = {
        ATTENTION: mct,
        ATTENTION_REFINED: refined(mct),
        PATCHCAM: pcam,
        FUSED: fused,
        REFINED: refined(fused),
    }
    for m in result.values():
        m.class_filter = class_filter
        m.maps = m.filtered()
    return result


def evaluate(
    dataset: Dataset,
    config: ModelConfig,
    params,
    kinds=ALL_KINDS,
    tau: float = DEFAULT_TAU,
    k: int | None = None,
    iterations: int | None = None,
    batch_size: int = 50,
) -> dict[str, MetricReport]:
    """Seed metrics per map kind, using ground-truth labels as the class filter."""
    size = dataset.images.shape[-2:]
    accs = {kind: SeedAccumulator(config.num_classes, tau) for kind in kinds}
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        labels = dataset.labels[sl]
        res = localize(dataset.images[sl], config, params, labels, k, iterations)
        for kind in kinds:
            up = M.upsample_maps(res[kind].maps, size)
            accs[kind].add(up, dataset.masks[sl], labels)
    kk = config.fuse_layers if k is None else k
    return {kind: acc.report(kind=kind, k=kk) for kind, acc in accs.items()}
