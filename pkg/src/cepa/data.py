"""Labeled image datasets: procedural desk-scale shapes and a CIFAR-10 binary reader."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import seeded_rng

CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class LabeledDataset:
    """Images (N, C, H, W) in [0, 1], integer labels and a per-sample split tag."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: np.ndarray = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.split is None:
            self.split = np.full(len(self.labels), "train")
        self.split = np.asarray(self.split)
        if not len(self.images) == len(self.labels) == len(self.split):
            raise ValueError("images, labels and split tags differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, self.split[idx])

    def part(self, name):
        return self.subset(np.flatnonzero(self.split == name))

    @property
    def train(self):
        return self.part("train")

    @property
    def test(self):
        return self.part("test")


@dataclass
class CleanDefenseSet:
    """The defender's small clean set, drawn from the test split."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    test_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self):
        return len(self.labels)

    def per_class(self):
        return {c: self.images[self.labels == c] for c in range(self.num_classes)}

    def source_set(self, target, sources=None):
        """Samples whose label is not ``target`` (or lies in ``sources``)."""
        if sources is None:
            mask = self.labels != target
        else:
            mask = np.isin(self.labels, list(sources)) & (self.labels != target)
        return self.images[mask], self.labels[mask]


_PALETTE = np.array([
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.95],
    [0.9, 0.85, 0.2],
    [0.8, 0.3, 0.85],
    [0.2, 0.85, 0.85],
    [0.95, 0.55, 0.15],
    [0.6, 0.6, 0.6],
], dtype=np.float64)


def _template(kind, size, cy, cx):
    """Binary mask of one of five shapes centred near (cy, cx)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.hypot(yy - cy, xx - cx)
    s = size / 16.0
    if kind == 0:  # disk
        return r <= 4.0 * s
    if kind == 1:  # cross
        return ((np.abs(yy - cy) <= 1.0 * s) & (np.abs(xx - cx) <= 5.0 * s)) | \
               ((np.abs(xx - cx) <= 1.0 * s) & (np.abs(yy - cy) <= 5.0 * s))
    if kind == 2:  # horizontal stripes
        return ((np.floor(yy / (2 * s)) % 2) == 0) & (np.abs(xx - cx) <= 5.5 * s) & (np.abs(yy - cy) <= 5.5 * s)
    if kind == 3:  # ring
        return (r >= 3.0 * s) & (r <= 5.0 * s)
    # square
    return (np.abs(yy - cy) <= 3.0 * s) & (np.abs(xx - cx) <= 3.0 * s)


def _class_layout(k, size):
    kind = k % 5
    variant = k // 5
    c = (size - 1) / 2.0
    off = size / 8.0
    if kind == 4:
        # corner square, corner chosen by variant
        sy, sx = [(-1, -1), (1, 1), (-1, 1), (1, -1)][variant % 4]
        cy, cx = c + sy * 1.5 * off, c + sx * 1.5 * off
    else:
        shifts = [(0, 0), (-off, -off), (off, off), (-off, off), (off, -off)]
        dy, dx = shifts[variant % len(shifts)]
        cy, cx = c + dy, c + dx
    color = _PALETTE[(k + 3 * variant) % len(_PALETTE)]
    return kind, cy, cx, color


def synth_shapes(num_classes=5, per_class_train=400, per_class_test=100, size=16, seed=0,
                 jitter=0.1, noise=0.05, shift=1, contrast=1.0, background=0.25):
    """Deterministic procedural dataset: one geometric template per class.

    Each sample gets a random translation of up to ``shift`` pixels, uniform
    color jitter of +-``jitter`` per channel, a random background in
    [0, ``background``] and additive N(0, ``noise``^2) noise, then is clipped
    to [0, 1]. ``contrast`` scales the foreground's distance from the
    background. Train samples come first, then test.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if size < 8:
        raise ValueError("size must be >= 8")
    rng = seeded_rng(seed)
    per_class = per_class_train + per_class_test
    n = num_classes * per_class
    images = np.empty((n, 3, size, size), np.float32)
    labels = np.empty(n, np.int64)
    split = np.empty(n, dtype="<U5")
    i = 0
    for part, count in (("train", per_class_train), ("test", per_class_test)):
        for k in range(num_classes):
            kind, cy, cx, color = _class_layout(k, size)
            for _ in range(count):
                dy, dx = rng.integers(-shift, shift + 1, size=2)
                mask = _template(kind, size, cy + dy, cx + dx)
                bg = rng.uniform(0.0, background, 3)
                fg = bg + contrast * (color - bg) + rng.uniform(-jitter, jitter, 3)
                img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
                img = img + rng.normal(0.0, noise, img.shape)
                images[i] = np.clip(img, 0.0, 1.0)
                labels[i] = k
                split[i] = part
                i += 1
    return LabeledDataset(images, labels, num_classes, split)


def read_cifar10_file(path):
    """Parse one CIFAR-10 binary batch: 3073-byte records, label then R, G, B planes."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ValueError(f"{path}: label byte {labels.max()} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def read_cifar10(directory):
    """Read ``data_batch_{1..5}.bin`` as train and ``test_batch.bin`` as test.

    Missing batches are skipped; at least one file must exist.
    """
    parts = [(f"data_batch_{i}.bin", "train") for i in range(1, 6)] + [("test_batch.bin", "test")]
    xs, ys, tags = [], [], []
    for name, tag in parts:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            continue
        x, y = read_cifar10_file(path)
        xs.append(x)
        ys.append(y)
        tags.append(np.full(len(y), tag))
    if not xs:
        raise FileNotFoundError(f"no CIFAR-10 batch files in {directory}")
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), 10, np.concatenate(tags))


def sample_defense_set(ds, per_class=10, seed=0):
    """Draw ``per_class`` test samples per class without replacement.

    Returns the defense set and the indices (into ``ds.test``) of the
    remaining evaluation samples.
    """
    test = ds.test
    rng = seeded_rng(seed)
    chosen = []
    for c in range(ds.num_classes):
        pool = np.flatnonzero(test.labels == c)
        if len(pool) < per_class:
            raise ValueError(f"class {c} has {len(pool)} test samples, need {per_class}")
        chosen.append(np.sort(rng.choice(pool, size=per_class, replace=False)))
    idx = np.concatenate(chosen).astype(np.int64) if chosen else np.zeros(0, np.int64)
    remaining = np.setdiff1d(np.arange(len(test)), idx)
    dset = CleanDefenseSet(test.images[idx], test.labels[idx], ds.num_classes, idx)
    return dset, remaining
