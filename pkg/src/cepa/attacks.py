"""Backdoor incorporation mechanisms and the training-set poisoner."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.ndimage import map_coordinates

from .autodiff import seeded_rng
from .data import LabeledDataset

KINDS = ("patch", "chessboard", "blend", "warp", "none")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "patch"
    target_class: int = 4
    source_classes: tuple = None
    per_class_poison_count: int = 40
    patch_size: int = 3
    patch_location: tuple = None
    amplitude: float = 2.0 / 255.0
    alpha: float = 0.15
    warp_grid: int = 4
    warp_strength: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if self.source_classes is not None:
            object.__setattr__(self, "source_classes", tuple(int(c) for c in self.source_classes))
            if self.target_class in self.source_classes:
                raise ValueError("target class may not be a source class")
        if self.per_class_poison_count < 0:
            raise ValueError("per_class_poison_count must be >= 0")
        if self.kind == "blend" and not 0 <= self.alpha <= 1:
            raise ValueError("blend alpha must lie in [0, 1]")
        if self.kind == "chessboard" and self.amplitude < 0:
            raise ValueError("chessboard amplitude must be >= 0")
        if self.kind == "patch" and self.patch_size < 1:
            raise ValueError("patch size must be positive")
        if self.kind == "warp" and self.warp_grid < 2:
            raise ValueError("warp control grid must be at least 2x2")

    def sources(self, num_classes):
        if self.source_classes is not None:
            return list(self.source_classes)
        return [c for c in range(num_classes) if c != self.target_class]

    def validate_for(self, input_shape, num_classes):
        if not 0 <= self.target_class < num_classes:
            raise ValueError(f"target class {self.target_class} out of range")
        if any(not 0 <= c < num_classes for c in self.sources(num_classes)):
            raise ValueError("source class out of range")
        if self.kind == "patch":
            _, h, w = input_shape
            if self.patch_size > min(h, w):
                raise ValueError(f"patch of size {self.patch_size} does not fit {h}x{w} images")
            if self.patch_location is not None:
                r, c = self.patch_location
                if not (0 <= r <= h - self.patch_size and 0 <= c <= w - self.patch_size):
                    raise ValueError(f"patch at {self.patch_location} does not fit {h}x{w} images")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class PoisonedDataset:
    dataset: LabeledDataset
    poison_indices: np.ndarray
    spec: AttackSpec


@dataclass(frozen=True)
class _Artifacts:
    patch: np.ndarray = None
    location: tuple = None
    pattern: np.ndarray = None
    coords: np.ndarray = field(default=None, repr=False)


def patch_artifacts(spec, input_shape):
    c, h, w = input_shape
    rng = seeded_rng((spec.seed, 1))
    content = rng.uniform(0.0, 1.0, (c, spec.patch_size, spec.patch_size)).astype(np.float32)
    if spec.patch_location is not None:
        loc = tuple(int(v) for v in spec.patch_location)
    else:
        loc = (int(rng.integers(0, h - spec.patch_size + 1)), int(rng.integers(0, w - spec.patch_size + 1)))
    return content, loc


def chessboard_pattern(input_shape):
    """0/1 checker alternating per pixel, identical across channels."""
    c, h, w = input_shape
    board = (np.add.outer(np.arange(h), np.arange(w)) % 2).astype(np.float32)
    return np.broadcast_to(board, (c, h, w)).copy()


def blend_pattern(input_shape):
    """Fixed colorful radial-sinusoid image standing in for a blended logo."""
    c, h, w = input_shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2) / max(h, w)
    theta = np.arctan2(yy - (h - 1) / 2, xx - (w - 1) / 2)
    chans = [0.5 + 0.5 * np.sin(2 * np.pi * 3 * r + 3 * theta + 2 * np.pi * k / max(c, 1)) for k in range(c)]
    return np.stack(chans).astype(np.float32)


def warp_coordinates(spec, input_shape):
    """Sampling coordinates (2, H, W): identity grid plus a smooth random displacement."""
    _, h, w = input_shape
    g = spec.warp_grid
    rng = seeded_rng((spec.seed, 2))
    ctrl = rng.uniform(-1.0, 1.0, (2, g, g))
    gy, gx = np.linspace(0, h - 1, g), np.linspace(0, w - 1, g)
    k = min(3, g - 1)
    yy, xx = np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64)
    field_ = np.stack([RectBivariateSpline(gy, gx, ctrl[d], kx=k, ky=k)(yy, xx) for d in range(2)])
    grid = np.stack(np.meshgrid(yy, xx, indexing="ij"))
    coords = grid + spec.warp_strength * field_
    coords[0] = np.clip(coords[0], 0, h - 1)
    coords[1] = np.clip(coords[1], 0, w - 1)
    return coords


@lru_cache(maxsize=64)
def _artifacts(spec, input_shape):
    if spec.kind == "patch":
        content, loc = patch_artifacts(spec, input_shape)
        return _Artifacts(patch=content, location=loc)
    if spec.kind == "chessboard":
        return _Artifacts(pattern=chessboard_pattern(input_shape))
    if spec.kind == "blend":
        return _Artifacts(pattern=blend_pattern(input_shape))
    if spec.kind == "warp":
        return _Artifacts(coords=warp_coordinates(spec, input_shape))
    return _Artifacts()


def apply_trigger(spec, x):
    """Insert the attack's trigger into one image (C, H, W) or a batch (N, C, H, W)."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    xb = x[None] if single else x
    art = _artifacts(spec, tuple(xb.shape[1:]))
    if spec.kind == "none":
        out = xb.copy()
    elif spec.kind == "patch":
        out = xb.copy()
        r, c = art.location
        k = spec.patch_size
        out[:, :, r:r + k, c:c + k] = art.patch
    elif spec.kind == "chessboard":
        out = np.clip(xb + np.float32(spec.amplitude) * art.pattern, 0.0, 1.0)
    elif spec.kind == "blend":
        a = np.float32(spec.alpha)
        out = np.clip((1 - a) * xb + a * art.pattern, 0.0, 1.0)
    else:
        out = np.empty_like(xb)
        for i in range(len(xb)):
            for ch in range(xb.shape[1]):
                out[i, ch] = map_coordinates(xb[i, ch].astype(np.float64), art.coords, order=1, mode="nearest")
    out = out.astype(np.float32)
    return out[0] if single else out


def poison(ds, spec):
    """Trigger ``per_class_poison_count`` train samples of every source class and relabel them."""
    spec.validate_for(ds.input_shape, ds.num_classes)
    images = ds.images.copy()
    labels = ds.labels.copy()
    rng = seeded_rng((spec.seed, 3))
    chosen = []
    if spec.kind != "none" and spec.per_class_poison_count > 0:
        for c in spec.sources(ds.num_classes):
            pool = np.flatnonzero((ds.labels == c) & (ds.split == "train"))
            if len(pool) < spec.per_class_poison_count:
                raise ValueError(
                    f"class {c} has {len(pool)} train samples, need {spec.per_class_poison_count}")
            chosen.append(np.sort(rng.choice(pool, size=spec.per_class_poison_count, replace=False)))
    idx = np.concatenate(chosen) if chosen else np.zeros(0, np.int64)
    if len(idx):
        images[idx] = apply_trigger(spec, images[idx])
        labels[idx] = spec.target_class
    return PoisonedDataset(LabeledDataset(images, labels, ds.num_classes, ds.split.copy()), idx, spec)


def attack_success_rate(model, spec, images):
    """Fraction of triggered ``images`` the model assigns to the target class."""
    images = np.asarray(images.images if isinstance(images, LabeledDataset) else images)
    if len(images) == 0:
        raise ValueError("attack_success_rate: empty evaluation set")
    pred = model.predict(apply_trigger(spec, images))
    return float(np.mean(pred == spec.target_class))


def correctly_classified_sources(model, ds, spec, per_class=100, seed=0):
    """Up to ``per_class`` correctly classified samples from each source class of ``ds``."""
    pred = model.predict(ds.images)
    rng = seeded_rng((seed, 4))
    keep = []
    for c in spec.sources(ds.num_classes):
        pool = np.flatnonzero((ds.labels == c) & (pred == c))
        if len(pool) > per_class:
            pool = np.sort(rng.choice(pool, size=per_class, replace=False))
        keep.append(pool)
    return ds.subset(np.concatenate(keep) if keep else np.zeros(0, np.int64))
