"""Synthetic multi-label shape images with exact pixel masks."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensorio
from .config import format_kv, from_kv, parse_kv
from .errors import ConfigError, FormatError

ARCHETYPES = ("disk", "square", "triangle", "ring", "cross")

# class colour families (RGB in [0, 1])
BASE_COLORS = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.80, 0.20],
    [0.75, 0.30, 0.80],
])

EVAL_SEED_OFFSET = 1_000_000
MIN_SURVIVAL = 0.25
MIN_BACKGROUND = 0.30


@dataclass(frozen=True)
class DatasetSpec:
    num_samples: int = 400
    eval_samples: int = 100
    image_size: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 16
    max_size: int = 28
    noise: float = 0.05
    color_jitter: float = 0.12
    seed: int = 0
    max_tries: int = 20

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(ARCHETYPES):
            raise ConfigError(f"num_classes must lie in [2, {len(ARCHETYPES)}], got {self.num_classes}")
        if self.min_objects < 1 or self.min_objects > self.max_objects:
            raise ConfigError(f"need 1 <= min_objects <= max_objects, got {self.min_objects}, {self.max_objects}")
        if self.max_objects > self.num_classes:
            raise ConfigError("max_objects cannot exceed num_classes (objects have distinct classes)")
        if self.min_size < 3 or self.min_size > self.max_size or self.max_size > self.image_size:
            raise ConfigError(f"bad size range [{self.min_size}, {self.max_size}] for image {self.image_size}")
        if self.num_samples < 0 or self.eval_samples < 0 or self.noise < 0:
            raise ConfigError("sample counts and noise must be non-negative")


@dataclass
class Sample:
    image: np.ndarray  # (3, S, S) float32 in [0, 1]
    labels: np.ndarray  # (C,) multi-hot float32
    mask: np.ndarray  # (S, S) int, 0 = background, c + 1 = class c


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    spec: DatasetSpec

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.labels[i], self.masks[i])

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]


def rasterize(kind: str, size: int, cy: float, cx: float, image_size: int) -> np.ndarray:
    """Hard-edged boolean mask of one shape; pixel centres sit at half-integers."""
    yy, xx = np.mgrid[0:image_size, 0:image_size] + 0.5
    dy, dx = yy - cy, xx - cx
    r = size / 2.0
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        arm = r / 3.0
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    raise ConfigError(f"unknown shape {kind!r}")


def generate_sample(spec: DatasetSpec, seed: int) -> Sample:
    rng = np.random.default_rng(seed)
    s, c = spec.image_size, spec.num_classes
    base = rng.uniform(0.35, 0.6, size=3)
    image = base[:, None, None] + spec.noise * rng.standard_normal((3, s, s))
    mask = np.zeros((s, s), dtype=np.int64)
    placed: dict[int, int] = {}  # class -> pixel count at placement
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for cls in rng.choice(c, size=n_obj, replace=False):
        cls = int(cls)
        for _ in range(spec.max_tries):
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            lo, hi = size / 2.0, s - size / 2.0
            cy, cx = rng.uniform(lo, hi, size=2)
            shape = rasterize(ARCHETYPES[cls], size, cy, cx, s)
            trial = mask.copy()
            trial[shape] = cls + 1
            if (trial == 0).mean() < MIN_BACKGROUND:
                continue
            if any((trial == k + 1).sum() < MIN_SURVIVAL * n for k, n in placed.items()):
                continue
            color = np.clip(BASE_COLORS[cls] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
            image[:, shape] = color[:, None] + spec.noise * rng.standard_normal((3, int(shape.sum())))
            mask = trial
            placed[cls] = int(shape.sum())
            break
    labels = np.zeros(c, dtype=np.float32)
    for k in np.unique(mask):
        if k > 0:
            labels[k - 1] = 1.0
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), labels, mask)


def generate(spec: DatasetSpec, split: str = "train") -> Dataset:
    """Deterministic dataset; sample ``i`` uses seed ``spec.seed + i`` (+ offset for eval)."""
    if split == "train":
        n, offset = spec.num_samples, 0
    elif split == "eval":
        n, offset = spec.eval_samples, EVAL_SEED_OFFSET
    else:
        raise ConfigError(f"unknown split {split!r}")
    samples = [generate_sample(spec, spec.seed + offset + i) for i in range(n)]
    s = spec.image_size
    return Dataset(
        images=np.stack([x.image for x in samples]) if samples else np.zeros((0, 3, s, s), np.float32),
        labels=np.stack([x.labels for x in samples]) if samples else np.zeros((0, spec.num_classes), np.float32),
        masks=np.stack([x.mask for x in samples]) if samples else np.zeros((0, s, s), np.int64),
        spec=spec,
    )


def load_spec(path: str | os.PathLike | None) -> DatasetSpec:
    if path is None:
        return DatasetSpec()
    return from_kv(DatasetSpec, parse_kv(Path(path).read_text()))


def save(dataset: Dataset, path: str | os.PathLike) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensorio.save(root / "images.mct1", dataset.images)
    tensorio.save(root / "labels.mct1", dataset.labels)
    tensorio.save(root / "masks.mct1", dataset.masks)
    (root / "manifest.txt").write_text(format_kv(dataset.spec))


def load(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    for name in ("images.mct1", "labels.mct1", "masks.mct1", "manifest.txt"):
        if not (root / name).is_file():
            raise FormatError(f"dataset file missing: {root / name}")
    spec = from_kv(DatasetSpec, parse_kv((root / "manifest.txt").read_text()))
    images = tensorio.load(root / "images.mct1")
    labels = tensorio.load(root / "labels.mct1")
    masks = tensorio.load(root / "masks.mct1").astype(np.int64)
    n = len(images)
    if images.ndim != 4 or labels.shape != (n, spec.num_classes) or masks.shape != (n,) + images.shape[2:]:
        raise FormatError(f"inconsistent dataset shapes {images.shape}, {labels.shape}, {masks.shape}")
    return Dataset(images, labels, masks, spec)


def resolve_split(path: str | os.PathLike, split: str) -> Path:
    """Accept either a dataset directory or a root holding ``train/`` and ``eval/``."""
    root = Path(path)
    if (root / split / "manifest.txt").is_file():
        return root / split
    if (root / "manifest.txt").is_file():
        return root
    raise FormatError(f"no dataset found at {root}")


def spec_fields() -> list[str]:
    return [f.name for f in fields(DatasetSpec)]
