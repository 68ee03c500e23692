"""Synthetic dense-classification task: shapes on a dark background.

Every pixel is labelled background (0), square (1), disk (2) or cross (3).
Shape intensities overlap between classes, so telling classes apart needs
spatial context, not just the pixel value.  Training labels get flipped at a
configurable rate to make the teacher's knowledge imperfect.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import checkpoint
from .rng import Rng

BACKGROUND, SQUARE, DISK, CROSS = 0, 1, 2, 3
NUM_CLASSES = 4
CLASS_NAMES = ("background", "square", "disk", "cross")

# overlapping per-class intensity ranges
INTENSITY = {SQUARE: (0.45, 0.85), DISK: (0.55, 0.95), CROSS: (0.5, 0.9)}
PIXEL_NOISE = 0.05
RADIUS_RANGE = (3, 7)


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 2000
    n_eval: int = 500
    label_noise_rate: float = 0.2
    shapes_per_image: tuple[int, int] = (2, 4)
    overlap_allowed: bool = False
    seed: int = 0
    image_size: int = 32
    scales: int = 3

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        if not 0.0 <= self.label_noise_rate < 0.5:
            raise ValueError("label_noise_rate must lie in [0, 0.5)")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            raise ValueError("shapes_per_image must be an ordered (min, max) pair")
        if self.n_samples < 1 or self.n_eval < 0:
            raise ValueError("n_samples must be >= 1 and n_eval >= 0")
        if self.image_size % (2 ** (self.scales - 1)):
            raise ValueError("image_size must be divisible by 2^(scales-1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes_per_image"] = list(self.shapes_per_image)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DataConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown DataConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Shape:
    cls: int
    cy: int
    cx: int
    radius: int
    intensity: float


def shape_mask(shape: Shape, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - shape.cy, xx - shape.cx
    r = shape.radius
    if shape.cls == SQUARE:
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape.cls == DISK:
        return dy * dy + dx * dx <= r * r
    if shape.cls == CROSS:
        arm = max(1, r // 3)
        inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return inside & ((np.abs(dy) <= arm) | (np.abs(dx) <= arm))
    raise ValueError(f"unknown shape class {shape.cls}")


def majority_downsample(labels: np.ndarray, factor: int) -> np.ndarray:
    """Most frequent class per factor x factor block; ties go to the lowest class index."""
    if factor == 1:
        return labels.copy()
    H, W = labels.shape
    blocks = labels.reshape(H // factor, factor, W // factor, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(H // factor, W // factor, -1)
    counts = (blocks[..., None] == np.arange(NUM_CLASSES)).sum(axis=2)
    return counts.argmax(axis=-1).astype(np.int64)


def label_pyramid(labels0: np.ndarray, scales: int) -> list[np.ndarray]:
    return [majority_downsample(labels0, 2**s) for s in range(scales)]


@dataclass
class Sample:
    image: np.ndarray  # [1, H, W] in [0, 1]
    labels: list[np.ndarray]  # per scale [H/2^i, W/2^i]
    shapes: list[Shape] = field(default_factory=list)
    clean_labels0: np.ndarray | None = None


def _place_shapes(cfg: DataConfig, rng: Rng) -> list[Shape]:
    lo, hi = cfg.shapes_per_image
    k = int(rng.integers(lo, hi + 1))
    size = cfg.image_size
    occupied = np.zeros((size, size), dtype=bool)
    shapes: list[Shape] = []
    for _ in range(k):
        for _attempt in range(20):
            cls = int(rng.integers(1, NUM_CLASSES))
            r = int(rng.integers(RADIUS_RANGE[0], RADIUS_RANGE[1] + 1))
            cy = int(rng.integers(r, size - r))
            cx = int(rng.integers(r, size - r))
            lo_i, hi_i = INTENSITY[cls]
            intensity = lo_i + (hi_i - lo_i) * float(rng.uniform(()))
            shape = Shape(cls, cy, cx, r, intensity)
            mask = shape_mask(shape, size)
            if cfg.overlap_allowed or not (mask & occupied).any():
                occupied |= mask
                shapes.append(shape)
                break
    return shapes


def render(shapes: list[Shape], size: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free image and scale-0 labels; later shapes paint over earlier ones."""
    image = np.zeros((size, size))
    labels = np.zeros((size, size), dtype=np.int64)
    for shape in shapes:
        mask = shape_mask(shape, size)
        image[mask] = shape.intensity
        labels[mask] = shape.cls
    return image, labels


def flip_labels(labels: np.ndarray, rate: float, rng: Rng) -> np.ndarray:
    """Each foreground cell becomes a uniformly chosen different class with probability ``rate``."""
    out = labels.copy()
    if rate <= 0:
        return out
    fg = labels != BACKGROUND
    flip = fg & (rng.uniform(labels.shape) < rate)
    # offset in 1..K-1 guarantees a different class
    offset = rng.integers(1, NUM_CLASSES, labels.shape)
    out[flip] = (labels[flip] + offset[flip]) % NUM_CLASSES
    return out


def gen_sample(cfg: DataConfig, index: int, noisy: bool = True) -> Sample:
    """Sample ``index``; geometry and pixels depend only on (seed, index)."""
    if not 0 <= index < cfg.n_samples + cfg.n_eval:
        raise IndexError(f"index {index} outside [0, {cfg.n_samples + cfg.n_eval})")
    base = Rng(cfg.seed).fork(index)
    shapes = _place_shapes(cfg, base.fork(0))
    clean, labels0 = render(shapes, cfg.image_size)
    image = np.clip(clean + PIXEL_NOISE * base.fork(1).normal(clean.shape), 0.0, 1.0)
    noisy_labels = flip_labels(labels0, cfg.label_noise_rate, base.fork(2)) if noisy else labels0
    return Sample(image[None], label_pyramid(noisy_labels, cfg.scales), shapes, labels0)


@dataclass
class Dataset:
    images: np.ndarray  # [N, 1, H, W]
    labels: list[np.ndarray]  # per scale [N, H_i, W_i]
    indices: np.ndarray
    noisy: bool

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        return self.images[idx], [lab[idx] for lab in self.labels]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        for lab in self.labels:
            h.update(np.ascontiguousarray(lab, dtype="<i8").tobytes())
        return h.hexdigest()

    def class_frequencies(self, scale: int = 0) -> np.ndarray:
        counts = np.bincount(self.labels[scale].ravel(), minlength=NUM_CLASSES)
        return counts / counts.sum()

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.images": self.images, f"{prefix}.indices": self.indices.astype(np.float64)}
        for s, lab in enumerate(self.labels):
            out[f"{prefix}.labels{s}"] = lab.astype(np.float64)
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], prefix: str, noisy: bool) -> "Dataset":
        labels = []
        s = 0
        while f"{prefix}.labels{s}" in tensors:
            labels.append(tensors[f"{prefix}.labels{s}"].astype(np.int64))
            s += 1
        return cls(tensors[f"{prefix}.images"], labels, tensors[f"{prefix}.indices"].astype(np.int64), noisy)


def _build(cfg: DataConfig, indices: range, noisy: bool) -> Dataset:
    samples = [gen_sample(cfg, i, noisy=noisy) for i in indices]
    size = cfg.image_size
    images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 1, size, size))
    labels = [
        np.stack([s.labels[k] for s in samples]) if samples else np.zeros((0, size >> k, size >> k), dtype=np.int64)
        for k in range(cfg.scales)
    ]
    return Dataset(images, labels, np.asarray(list(indices), dtype=np.int64), noisy)


def gen_split(cfg: DataConfig) -> tuple[Dataset, Dataset]:
    """Train set on indices [0, n_samples) with label noise; clean eval set after it."""
    train = _build(cfg, range(cfg.n_samples), noisy=True)
    evals = _build(cfg, range(cfg.n_samples, cfg.n_samples + cfg.n_eval), noisy=False)
    return train, evals


def save_split(path: str | Path, cfg: DataConfig, train: Dataset, evals: Dataset) -> None:
    tensors = {**train.tensors("train"), **evals.tensors("eval")}
    checkpoint.save(path, tensors, {"kind": "dataset", "config": cfg.to_dict()})


def load_split(path: str | Path) -> tuple[DataConfig, Dataset, Dataset]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "dataset":
        raise checkpoint.CheckpointError(f"{path}: not a dataset container")
    cfg = DataConfig.from_dict(meta["config"])
    return cfg, Dataset.from_tensors(tensors, "train", True), Dataset.from_tensors(tensors, "eval", False)
