"""Dataset loading and generation: IDX image files, synthetic tasks, splits."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

DATA_DIR_ENV = "SENSIREG_DATA_DIR"


def default_data_dir() -> str:
    return os.environ.get(DATA_DIR_ENV, "data")


@dataclass
class Dataset:
    """Inputs in [0, 1] with integer class labels."""
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    tag: str | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if len(self.inputs) and (self.inputs.min() < -1e-6
                                 or self.inputs.max() > 1 + 1e-6):
            raise ValueError("inputs must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return self.inputs.shape[1:]

    def subset(self, indices, tag: str | None = None) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices],
                       self.num_classes, tag or self.tag)


def _read_header(blob: bytes, path, expected_magic: int, n_dims: int):
    header_len = 4 * (1 + n_dims)
    if len(blob) < header_len:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack_from(">I", blob, 0)[0]
    if magic != expected_magic:
        raise ValueError(f"{path}: IDX magic mismatch, expected "
                         f"0x{expected_magic:08x}, got 0x{magic:08x}")
    dims = struct.unpack_from(f">{n_dims}I", blob, 4)
    return dims, header_len


def load_idx(images_path, labels_path) -> Dataset:
    """Parse the big-endian IDX pair into a [N,1,H,W] dataset scaled to [0,1]."""
    with open(images_path, "rb") as fh:
        img_blob = fh.read()
    with open(labels_path, "rb") as fh:
        lbl_blob = fh.read()

    (count, rows, cols), offset = _read_header(img_blob, images_path,
                                               IDX_IMAGE_MAGIC, 3)
    expected = count * rows * cols
    if len(img_blob) - offset != expected:
        raise ValueError(f"{images_path}: payload of {len(img_blob) - offset} bytes, "
                         f"expected {expected}")
    images = np.frombuffer(img_blob, dtype=np.uint8, offset=offset)
    images = images.reshape(count, 1, rows, cols)

    (lbl_count,), lbl_offset = _read_header(lbl_blob, labels_path,
                                            IDX_LABEL_MAGIC, 1)
    if len(lbl_blob) - lbl_offset != lbl_count:
        raise ValueError(f"{labels_path}: payload of {len(lbl_blob) - lbl_offset} "
                         f"bytes, expected {lbl_count}")
    if lbl_count != count:
        raise ValueError(f"image/label count mismatch: {count} images vs "
                         f"{lbl_count} labels")
    labels = np.frombuffer(lbl_blob, dtype=np.uint8, offset=lbl_offset)

    inputs = images.astype(np.float32) / 255.0
    return Dataset(inputs, labels.astype(np.int64),
                   num_classes=int(labels.max()) + 1)


def _spread_centers(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded random centers, re-drawn a few times to keep them apart."""
    best, best_sep = None, -1.0
    for _ in range(64):
        centers = rng.uniform(0.15, 0.85, size=(num_classes, dim))
        if num_classes == 1:
            return centers
        diffs = centers[:, None, :] - centers[None, :, :]
        dists = np.sqrt((diffs ** 2).sum(-1))
        sep = dists[~np.eye(num_classes, dtype=bool)].min()
        if sep > best_sep:
            best, best_sep = centers, sep
        if sep >= 0.35:
            return centers
    return best


def gen_synthetic(kind: str, n: int, dim: int, num_classes: int,
                  noise_std: float, seed: int) -> Dataset:
    """Deterministic synthetic classification data, normalized to [0, 1].

    blobs: Gaussian clusters at seeded, well-separated centers.
    circles: two concentric rings (dim must be 2, num_classes must be 2).
    """
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        centers = _spread_centers(num_classes, dim, rng)
        labels = np.arange(n) % num_classes
        points = centers[labels] + rng.normal(0.0, noise_std, size=(n, dim))
    elif kind == "circles":
        if dim != 2 or num_classes != 2:
            raise ValueError("circles requires dim=2 and num_classes=2")
        labels = np.arange(n) % 2
        radii = np.where(labels == 0, 0.22, 0.42)
        radii = radii + rng.normal(0.0, noise_std, size=n)
        theta = rng.uniform(0, 2 * np.pi, size=n)
        points = 0.5 + np.stack([radii * np.cos(theta), radii * np.sin(theta)], axis=1)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")

    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    span[span < 1e-12] = 1.0
    points = (points - lo) / span
    return Dataset(points.astype(np.float32), labels, num_classes)


def split(dataset: Dataset, fractions, seed: int, tags=None) -> list[Dataset]:
    """Seeded permutation then contiguous slices; disjoint and exhaustive."""
    fractions = list(fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    if tags is None:
        defaults = {1: ("train",), 2: ("train", "test"), 3: ("train", "val", "test")}
        tags = defaults.get(len(fractions),
                            tuple(f"split{i}" for i in range(len(fractions))))
    if len(tags) != len(fractions):
        raise ValueError("one tag per fraction required")

    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.round(np.cumsum(fractions) * n).astype(int)
    bounds[-1] = n
    parts = []
    start = 0
    for frac_end, tag in zip(bounds, tags):
        idx = perm[start:frac_end]
        parts.append(dataset.subset(idx, tag=tag))
        start = frac_end
    return parts
