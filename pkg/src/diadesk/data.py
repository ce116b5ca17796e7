"""Datasets: synthetic generator, raw binary format, task splits, access auditing.

Raw binary layout (little-endian)::

    bytes 0..7   magic b"DIARAW01"
    u32 n        sample count
    u32 height
    u32 width
    u32 channels
    u8  pixels   n * height * width * channels, sample-major, row-major HWC
    u32 labels   n entries
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DatasetError, FormatError

RAW_MAGIC = b"DIARAW01"
_HEADER = struct.Struct("<8sIIII")


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, C) uint8
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DatasetError("images must be (n, H, W, C) with one label per image")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, classes: Sequence[int]) -> Dataset:
        mask = np.isin(self.labels, list(classes))
        return Dataset(self.images[mask], self.labels[mask])

    def float_images(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(np.float64) / 255.0

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class DatasetSpec:
    """Synthetic stream definition.

    Each class gets a random template (Gaussian blobs plus an oriented
    grating). Samples are the template circularly shifted by up to
    ``max_shift`` pixels, contrast-jittered and corrupted with pixel noise of
    standard deviation ``noise``; both jitter terms scale with ``noise``.
    """

    num_classes: int = 10
    train_per_class: int = 200
    eval_per_class: int = 50
    image_size: int = 16
    channels: int = 1
    noise: float = 0.15
    max_shift: int = 2
    seed: int = 0
    template_seed: int | None = None  # defaults to seed; base sets use a different one
    source: str = "synthetic"
    path: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "raw"):
            raise DatasetError(f"unknown dataset source {self.source!r}")
        if self.num_classes < 1 or self.train_per_class < 0 or self.eval_per_class < 0:
            raise DatasetError("class and sample counts must be non-negative (at least one class)")


def _template(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size, channels))
    for c in range(channels):
        for _ in range(3):
            cy, cx = rng.uniform(0, size, size=2)
            sig = rng.uniform(1.0, size / 4)
            amp = rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0])
            img[:, :, c] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.3, 1.2)
        phase = rng.uniform(0, 2 * np.pi)
        img[:, :, c] += 0.35 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    img -= img.min()
    img /= max(img.max(), 1e-9)
    return img


def _render(template: np.ndarray, rng: np.random.Generator, n: int, noise: float, max_shift: int) -> np.ndarray:
    out = np.empty((n,) + template.shape, dtype=np.uint8)
    for i in range(n):
        img = template
        if noise > 0:
            if max_shift > 0:
                dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
                img = np.roll(img, (dy, dx), axis=(0, 1))
            gain = 1.0 + rng.uniform(-1.0, 1.0) * noise
            img = gain * img + rng.normal(0.0, noise, size=img.shape)
        out[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return out


def generate_synthetic(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, eval) datasets for ``spec``."""
    tseed = spec.seed if spec.template_seed is None else spec.template_seed
    train_imgs, train_lab, eval_imgs, eval_lab = [], [], [], []
    for k in range(spec.num_classes):
        template = _template(np.random.default_rng([tseed, 7919, k]), spec.image_size, spec.channels)
        rng = np.random.default_rng([spec.seed, 104729, k])
        train_imgs.append(_render(template, rng, spec.train_per_class, spec.noise, spec.max_shift))
        eval_imgs.append(_render(template, rng, spec.eval_per_class, spec.noise, spec.max_shift))
        train_lab.append(np.full(spec.train_per_class, k))
        eval_lab.append(np.full(spec.eval_per_class, k))
    shape = (0, spec.image_size, spec.image_size, spec.channels)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(shape, np.uint8)  # noqa: E731
    return (
        Dataset(cat(train_imgs), np.concatenate(train_lab)),
        Dataset(cat(eval_imgs), np.concatenate(eval_lab)),
    )


def write_raw(path: str | os.PathLike, ds: Dataset) -> None:
    n, h, w, c = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RAW_MAGIC, n, h, w, c))
        fh.write(np.ascontiguousarray(ds.images).tobytes())
        fh.write(ds.labels.astype("<u4").tobytes())


def load_raw(path: str | os.PathLike) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < len(RAW_MAGIC) or blob[: len(RAW_MAGIC)] != RAW_MAGIC:
        raise FormatError("bad magic, not a DIARAW01 file", 0)
    if len(blob) < _HEADER.size:
        raise FormatError(f"header truncated, missing {_HEADER.size - len(blob)} bytes", len(blob))
    _, n, h, w, c = _HEADER.unpack_from(blob, 0)
    pix = n * h * w * c
    need = _HEADER.size + pix + 4 * n
    if len(blob) < need:
        raise FormatError(f"file truncated, missing {need - len(blob)} bytes", len(blob))
    images = np.frombuffer(blob, dtype=np.uint8, count=pix, offset=_HEADER.size).reshape(n, h, w, c).copy()
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=_HEADER.size + pix).astype(np.int64)
    return Dataset(images, labels)


@dataclass(frozen=True)
class TaskSplit:
    groups: tuple[tuple[int, ...], ...]

    @property
    def num_tasks(self) -> int:
        return len(self.groups)

    def classes_up_to(self, t: int) -> list[int]:
        """Classes of tasks 1..t (1-based)."""
        return [c for g in self.groups[:t] for c in g]


def make_task_split(num_classes: int, num_tasks: int, seed: int = 0) -> TaskSplit:
    """Seed-shuffled class order cut into ``num_tasks`` disjoint, near-equal groups."""
    if not 1 <= num_tasks <= num_classes:
        raise DatasetError(f"cannot split {num_classes} classes into {num_tasks} tasks")
    order = np.random.default_rng([seed, 31337]).permutation(num_classes)
    return TaskSplit(tuple(tuple(int(c) for c in g) for g in np.array_split(order, num_tasks)))


@dataclass
class AccessAuditor:
    """Records which task's training samples are read while which task trains."""

    current_task: int = 0
    reads: dict[int, int] = field(default_factory=dict)
    violations: list[tuple[int, int, int]] = field(default_factory=list)  # (current, owner, count)

    def begin_task(self, t: int) -> None:
        self.current_task = t

    def record(self, owner_task: int, count: int) -> None:
        self.reads[owner_task] = self.reads.get(owner_task, 0) + count
        if owner_task < self.current_task:
            self.violations.append((self.current_task, owner_task, count))


class TaskData:
    """Training samples of one task, readable only through the auditor."""

    def __init__(self, task: int, dataset: Dataset, auditor: AccessAuditor | None = None):
        self.task = task
        self._ds = dataset
        self.auditor = auditor or AccessAuditor()
        self.classes = sorted(set(int(c) for c in dataset.labels))

    def __len__(self) -> int:
        return len(self._ds)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        self.auditor.record(self.task, len(idx))
        return self._ds.float_images(idx), self._ds.labels[idx]

    def labels(self) -> np.ndarray:
        # labels alone are metadata, not exemplars
        return self._ds.labels
