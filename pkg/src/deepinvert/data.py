"""Desk-scale labeled image sources.

The default acceptance dataset is a procedural 10-class "shapes" generator
(no downloads). Binary loaders for MNIST IDX and CIFAR-10 are provided for
real data. All images end up as float NCHW arrays in preprocessed space.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

SHAPE_CLASSES = ("circle", "square", "triangle", "cross", "ring",
                 "bar", "checker", "dot_grid", "diagonal", "blob")


@dataclass(frozen=True)
class Preprocess:
    """Per-channel normalization x -> (x - mean) / std on [0,1] pixels."""
    mean: tuple
    std: tuple

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError(f"preprocess std must be positive, got {self.std}")

    @property
    def lo(self):
        return tuple(-m / s for m, s in zip(self.mean, self.std))

    @property
    def hi(self):
        return tuple((1.0 - m) / s for m, s in zip(self.mean, self.std))


# ImageNet preprocessing constants, kept for the clipping op.
IMAGENET_PREPROCESS = Preprocess((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
# Shapes stats computed once over 5000 seed-0 samples and pinned (see manifest).
SHAPES_PREPROCESS = Preprocess((0.2281, 0.2296, 0.2292), (0.2530, 0.2525, 0.2529))
MNIST_PREPROCESS = Preprocess((0.1307,), (0.3081,))
CIFAR10_PREPROCESS = Preprocess((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616))


@dataclass
class LabeledBatch:
    images: np.ndarray  # N x C x H x W, preprocessed space, float32
    labels: np.ndarray  # int64, in [0, class_count)
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("non-finite image values")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.images[idx], self.labels[idx], self.class_count)


def apply_preprocess(images01: np.ndarray, p: Preprocess) -> np.ndarray:
    c = images01.shape[1]
    if c != len(p.mean):
        raise ValueError(f"preprocess has {len(p.mean)} channels, images have {c}")
    m = np.asarray(p.mean, dtype=images01.dtype).reshape(1, c, 1, 1)
    s = np.asarray(p.std, dtype=images01.dtype).reshape(1, c, 1, 1)
    return (images01 - m) / s


def invert_preprocess(images: np.ndarray, p: Preprocess) -> np.ndarray:
    c = images.shape[1]
    if c != len(p.mean):
        raise ValueError(f"preprocess has {len(p.mean)} channels, images have {c}")
    m = np.asarray(p.mean, dtype=images.dtype).reshape(1, c, 1, 1)
    s = np.asarray(p.std, dtype=images.dtype).reshape(1, c, 1, 1)
    return images * s + m


# -- procedural shapes -----------------------------------------------------------


def _render_shape(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One shape on a noisy background; position/scale/color vary per sample."""
    img = np.empty((3, size, size), dtype=np.float32)
    bg = rng.uniform(0.0, 0.25, 3).astype(np.float32)
    fg = rng.uniform(0.55, 1.0, 3).astype(np.float32)
    img[:] = bg[:, None, None]

    cx = rng.uniform(0.35, 0.65) * size
    cy = rng.uniform(0.35, 0.65) * size
    r = rng.uniform(0.22, 0.34) * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy

    name = SHAPE_CLASSES[kind]
    if name == "circle":
        mask = dx * dx + dy * dy <= r * r
    elif name == "square":
        mask = (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    elif name == "triangle":
        mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.55)
    elif name == "cross":
        t = r * 0.3
        mask = ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    elif name == "ring":
        d2 = dx * dx + dy * dy
        mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    elif name == "bar":
        mask = (np.abs(dy) <= r * 0.28) & (np.abs(dx) <= r * 1.1)
    elif name == "checker":
        cell = max(2, int(r * 0.5))
        mask = (((xx // cell) + (yy // cell)) % 2 == 0) & (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif name == "dot_grid":
        step = max(3, int(r * 0.7))
        mask = ((xx.astype(int) % step <= 1) & (yy.astype(int) % step <= 1)
                & (np.abs(dx) <= r * 1.1) & (np.abs(dy) <= r * 1.1))
    elif name == "diagonal":
        mask = (np.abs(dx - dy) <= r * 0.3) & (np.abs(dx) <= r * 1.2) & (np.abs(dy) <= r * 1.2)
    elif name == "blob":
        # always clearly eccentric, otherwise it collapses into "circle"
        a = rng.uniform(0.45, 0.6)
        b = rng.uniform(1.2, 1.45)
        th = rng.uniform(0, np.pi)
        rx = dx * np.cos(th) + dy * np.sin(th)
        ry = -dx * np.sin(th) + dy * np.cos(th)
        mask = (rx / (a * r)) ** 2 + (ry / (b * r)) ** 2 <= 1.0
    else:  # pragma: no cover
        raise ValueError(f"unknown shape kind {kind}")

    img[:, mask] = fg[:, None]
    img += rng.normal(0.0, 0.04, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def gen_shapes(seed: int, n_per_class: int, classes: int = 10, size: int = 32,
               preprocess: Preprocess | None = SHAPES_PREPROCESS) -> LabeledBatch:
    """Deterministic balanced batch of rendered shapes."""
    if classes > len(SHAPE_CLASSES):
        raise ValueError(f"at most {len(SHAPE_CLASSES)} shape classes, got {classes}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    images = np.zeros((classes * n_per_class, 3, size, size), dtype=np.float32)
    labels = np.zeros(classes * n_per_class, dtype=np.int64)
    i = 0
    for k in range(classes):
        for _ in range(n_per_class):
            images[i] = _render_shape(k, size, rng)
            labels[i] = k
            i += 1
    if preprocess is not None:
        images = apply_preprocess(images, Preprocess(preprocess.mean[:3], preprocess.std[:3]))
    return LabeledBatch(images, labels, classes)


def write_shapes_manifest(path: str, preprocess: Preprocess = SHAPES_PREPROCESS,
                          classes: int = 10, size: int = 32) -> None:
    with open(path, "w") as f:
        f.write(f"classes={classes}\n")
        f.write(f"size={size}\n")
        f.write("names=" + ",".join(SHAPE_CLASSES[:classes]) + "\n")
        f.write("mean=" + ",".join(f"{m:.4f}" for m in preprocess.mean) + "\n")
        f.write("std=" + ",".join(f"{s:.4f}" for s in preprocess.std) + "\n")


def read_shapes_manifest(path: str) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                out[k] = v
    return out


# -- MNIST IDX --------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _load_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated IDX header")
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{path}: bad IDX image magic 0x{magic:08x}")
        raw = f.read()
    if len(raw) != n * rows * cols:
        raise ValueError(f"{path}: expected {n * rows * cols} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)


def _load_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise ValueError(f"{path}: truncated IDX header")
        magic, n = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{path}: bad IDX label magic 0x{magic:08x}")
        raw = f.read()
    if len(raw) != n:
        raise ValueError(f"{path}: expected {n} label bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx_mnist(directory: str, split: str = "train",
                   preprocess: Preprocess = MNIST_PREPROCESS) -> LabeledBatch:
    prefix = {"train": "train", "test": "t10k"}[split]
    images = _load_idx_images(os.path.join(directory, f"{prefix}-images-idx3-ubyte"))
    labels = _load_idx_labels(os.path.join(directory, f"{prefix}-labels-idx1-ubyte"))
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float32) / 255.0
    return LabeledBatch(apply_preprocess(x, preprocess), labels, 10)


# -- CIFAR-10 binary ---------------------------------------------------------------

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


def load_cifar10_bin(directory: str, files=None,
                     preprocess: Preprocess = CIFAR10_PREPROCESS) -> LabeledBatch:
    if files is None:
        files = sorted(fn for fn in os.listdir(directory) if fn.endswith(".bin"))
        if not files:
            raise ValueError(f"no .bin files in {directory}")
    chunks, labels = [], []
    for fn in files:
        with open(os.path.join(directory, fn), "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise ValueError(f"{fn}: length {len(raw)} not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0].astype(np.int64)
        if lab.max() > 9:
            raise ValueError(f"{fn}: label byte {lab.max()} out of range")
        chunks.append(rec[:, 1:].reshape(-1, 3, 32, 32))
        labels.append(lab)
    x = np.concatenate(chunks).astype(np.float32) / 255.0
    return LabeledBatch(apply_preprocess(x, preprocess), np.concatenate(labels), 10)
