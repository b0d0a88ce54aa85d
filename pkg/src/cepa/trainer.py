"""Adam training of a TappedClassifier with a step learning-rate schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import seeded_rng

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    initial_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every <= 0:
            raise ValueError("lr_decay_every must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


def learning_rate(cfg, epoch):
    return cfg.initial_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def epoch_permutation(seed, epoch, n):
    return seeded_rng((seed, epoch)).permutation(n)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class TrainResult:
    model: object
    trace: list = field(default_factory=list)  # dicts: epoch, lr, train_loss, test_acc


def accuracy(model, images, labels):
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(images) == labels))


def train(model, ds, cfg, progress=None):
    """Train in place. ``ds`` is a LabeledDataset or PoisonedDataset.

    Returns the model with a per-epoch trace of learning rate, mean training
    loss and clean test accuracy (on the dataset's test split).
    """
    ds = getattr(ds, "dataset", ds)
    tr = ds.train
    te = ds.test
    if len(tr) == 0:
        raise ValueError("training split is empty")
    params = model.params()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        order = epoch_permutation(cfg.seed, epoch, len(tr))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for p in params:
                p.grad = None
            loss = ad.softmax_cross_entropy(model.logits(tr.images[idx]), tr.labels[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            loss.backward()
            opt.step(lr)
            total += value * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / count,
               "test_acc": accuracy(model, te.images, te.labels)}
        result.trace.append(row)
        log.info("epoch %d lr %.4g loss %.4f test_acc %.4f", epoch, lr, row["train_loss"], row["test_acc"])
        if progress:
            progress(row)
    return result
