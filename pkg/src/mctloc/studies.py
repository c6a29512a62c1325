"""Ablation studies: pooling choice, CCT depth, fusion depth K and pipeline stages.

Each study returns a list of flat dict rows; ``rows_to_csv`` serializes them
with a stable column order so repeated runs produce identical files.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from . import inference, train
from .config import ModelConfig, TrainConfig
from .data import Dataset

STUDIES = ("pooling", "cct-depth", "k-sweep", "pipeline")
DEFAULT_LAMBDAS = (0.9, 0.96, 0.996)

# pipeline rows in cumulative order, each paired with the map kind that realizes it
PIPELINE_STAGES = (
    ("attention", inference.ATTENTION),
    ("+affinity", inference.ATTENTION_REFINED),
    ("+patchcam", inference.FUSED),
    ("+patchcam+affinity", inference.REFINED),
)

METRIC_COLUMNS = ("miou", "fp", "fn", "piou", "pxap")


@dataclass(frozen=True)
class StudySetup:
    """Everything a study needs to train and evaluate one model."""

    train_data: Dataset
    eval_data: Dataset
    config: ModelConfig
    train_config: TrainConfig
    seed: int = 0
    seed_kind: str = inference.REFINED


def _metrics(report) -> dict:
    return {k: report.row()[k] for k in METRIC_COLUMNS}


def fit(setup: StudySetup, config: ModelConfig | None = None) -> train.TrainResult:
    return train.train(setup.train_data, config or setup.config, setup.train_config, setup.seed)


def pooling_study(setup: StudySetup, lambdas=DEFAULT_LAMBDAS) -> list[dict]:
    """Train GMP, GAP and GWRP at every decay in ``lambdas`` under one seed."""
    variants = [("gmp", None), ("gap", None)] + [("gwrp", lam) for lam in lambdas]
    rows = []
    for pooling, lam in variants:
        cfg = setup.config.replace(pooling=pooling, gwrp_lambda=setup.config.gwrp_lambda if lam is None else lam)
        res = fit(setup, cfg)
        rep = inference.evaluate(setup.eval_data, cfg, res.params, kinds=(setup.seed_kind,))[setup.seed_kind]
        rows.append({"pooling": pooling, "lambda": "" if lam is None else lam, "kind": setup.seed_kind, **_metrics(rep)})
    return rows


def cct_depth_study(setup: StudySetup) -> list[dict]:
    """CCT applied to the last T layers, T = 0 (no CCT) .. L."""
    rows = []
    for depth in range(setup.config.layers + 1):
        cfg = setup.config.replace(cct_layers=depth)
        res = fit(setup, cfg)
        rep = inference.evaluate(setup.eval_data, cfg, res.params, kinds=(setup.seed_kind,))[setup.seed_kind]
        rows.append({"cct_layers": depth, "kind": setup.seed_kind, **_metrics(rep)})
    return rows


def k_sweep(setup: StudySetup, params=None, kinds=(inference.ATTENTION,)) -> list[dict]:
    """Seed quality as the number of fused layers K runs over 1..L (one trained model)."""
    params = fit(setup).params if params is None else params
    rows = []
    for k in range(1, setup.config.layers + 1):
        reps = inference.evaluate(setup.eval_data, setup.config, params, kinds=kinds, k=k)
        for kind in kinds:
            rows.append({"k": k, "kind": kind, **_metrics(reps[kind])})
    return rows


def pipeline_study(setup: StudySetup, params=None) -> list[dict]:
    """The four cumulative pipeline stages evaluated on one trained model."""
    params = fit(setup).params if params is None else params
    kinds = tuple(kind for _, kind in PIPELINE_STAGES)
    reps = inference.evaluate(setup.eval_data, setup.config, params, kinds=kinds)
    return [{"stage": stage, "kind": kind, **_metrics(reps[kind])} for stage, kind in PIPELINE_STAGES]


def run(study: str, setup: StudySetup) -> list[dict]:
    if study == "pooling":
        return pooling_study(setup)
    if study == "cct-depth":
        return cct_depth_study(setup)
    if study == "k-sweep":
        return k_sweep(setup, kinds=(inference.ATTENTION, setup.seed_kind))
    if study == "pipeline":
        return pipeline_study(setup)
    raise ValueError(f"unknown study {study!r}; choose from {STUDIES}")


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()
