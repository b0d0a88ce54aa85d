"""Re-synthesize input perturbations from a consensus mu and measure attack success."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import apply_trigger
from .autodiff import seeded_rng
from .core import NumericalFailure, clip_delta


@dataclass(frozen=True)
class VerifyConfig:
    steps: int = 300
    step_size: float = 0.01
    upsilon: float = 0.0
    rel_tol: float = 1e-3
    per_class: int = 100
    dump_deltas: bool = False


@dataclass
class VerificationResult:
    target: int
    layer: int
    asr_ground_truth: float = None
    asr_objective: float = None
    asr_resynthesized: float = None
    num_eval: int = 0
    residual_norms: list = field(default_factory=list)
    deltas: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        return {
            "target": self.target,
            "layer": self.layer,
            "asr_ground_truth": self.asr_ground_truth,
            "asr_objective": self.asr_objective,
            "asr_resynthesized": self.asr_resynthesized,
            "num_eval": self.num_eval,
            "mean_residual_norm": float(np.mean(self.residual_norms)) if len(self.residual_norms) else None,
        }


def resynthesize_delta(model, layer, mu, x, upsilon=0.0, steps=300, step_size=0.01, rel_tol=1e-3):
    """Minimize ||f(x + d) - f(x) - mu||^2 + upsilon ||d||^2 from d = 0 by projected
    gradient descent, independently for every sample of the batch ``x``.

    Returns (d, residual norms). The iterate with the lowest objective is kept
    per sample, so the residual never exceeds its value at d = 0 (||mu||).
    A sample stops once its residual drops below ``rel_tol * ||mu||``.
    """
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    mu = np.asarray(mu, dtype=np.float32).reshape(1, -1)
    with ad.no_grad():
        f0 = model.forward_to(layer, x).data.reshape(len(x), -1)
    if mu.shape[1] != f0.shape[1]:
        raise ad.ShapeError(f"mu has {mu.shape[1]} entries, layer {layer} has {f0.shape[1]}")
    target = f0 + mu
    mu_norm = float(np.linalg.norm(mu))
    tol = rel_tol * mu_norm
    delta = np.zeros_like(x)
    best = delta.copy()
    best_res = np.full(len(x), mu_norm)
    best_obj = best_res ** 2
    active = best_res > tol

    def keep_better(res, dnorm2):
        obj = res ** 2 + upsilon * dnorm2
        better = obj < best_obj
        best[better] = delta[better]
        best_res[better] = res[better]
        best_obj[better] = obj[better]

    with model.frozen():
        for _ in range(steps):
            if not active.any():
                break
            d = ad.Tensor(delta, requires_grad=True)
            feats = ad.flatten(model.forward_to(layer, ad.add(x, d)))
            r = ad.sub(feats, target)
            loss = ad.tensor_sum(ad.square(r))
            if upsilon:
                loss = ad.add(loss, ad.mul(ad.tensor_sum(ad.square(d)), float(upsilon)))
            keep_better(np.linalg.norm(r.data, axis=1), (delta.reshape(len(x), -1) ** 2).sum(axis=1))
            active &= best_res > tol
            loss.backward()
            g = d.grad
            if not np.all(np.isfinite(g)):
                raise NumericalFailure("non-finite gradient while re-synthesizing a perturbation")
            step = np.where(active[:, None, None, None], np.float32(step_size) * g, 0).astype(np.float32)
            delta = clip_delta(x, delta - step).astype(np.float32)
        with ad.no_grad():
            res = np.linalg.norm(model.forward_to(layer, x + delta).data.reshape(len(x), -1) - target, axis=1)
        keep_better(res, (delta.reshape(len(x), -1) ** 2).sum(axis=1))
    if single:
        return best[0], best_res[0]
    return best, best_res


def evaluation_samples(model, test, exclude, target, per_class=100, seed=0):
    """Correctly classified test samples of every class except ``target``,
    at most ``per_class`` each, never touching the indices in ``exclude``."""
    keep = np.setdiff1d(np.arange(len(test)), np.asarray(exclude, dtype=np.int64))
    pred = model.predict(test.images[keep])
    rng = seeded_rng((seed, 5))
    chosen = []
    for c in range(test.num_classes):
        if c == target:
            continue
        pool = keep[(test.labels[keep] == c) & (pred == c)]
        if len(pool) > per_class:
            pool = np.sort(rng.choice(pool, size=per_class, replace=False))
        chosen.append(pool)
    return np.concatenate(chosen) if chosen else np.zeros(0, np.int64)


def table1_protocol(model, report, test, defense, runs, spec=None, cfg=VerifyConfig(), seed=0):
    """Three attack success rates per detected target.

    ``runs`` maps (layer, target) -> dict with keys "mu" and "misclass_rate"
    (a CepaRun summary) for at least the detecting layer of each target.
    ``spec`` is the ground-truth AttackSpec, or None when unknown.
    """
    if not report.detected:
        raise ValueError("report has no detected target; nothing to verify")
    results = []
    for target, layer in sorted(report.detected.items()):
        run = runs[(layer, target)]
        idx = evaluation_samples(model, test, defense.test_indices, target, cfg.per_class, seed)
        if len(idx) == 0:
            raise ValueError(f"no correctly classified source samples available for target {target}")
        x = test.images[idx]
        res = VerificationResult(target, layer, num_eval=len(idx))
        if spec is not None and spec.kind != "none":
            res.asr_ground_truth = float(np.mean(model.predict(apply_trigger(spec, x)) == spec.target_class))
        res.asr_objective = float(run["misclass_rate"])
        mu = np.asarray(run["mu"], dtype=np.float32)
        delta, norms = resynthesize_delta(model, layer, mu, x, cfg.upsilon, cfg.steps, cfg.step_size, cfg.rel_tol)
        res.asr_resynthesized = float(np.mean(model.predict(x + delta) == target))
        res.residual_norms = [float(v) for v in norms]
        res.deltas = delta
        results.append(res)
    return results


def tensor_bytes(array):
    """Flat little-endian f32 dump with a header: u32 rank, u32 dims."""
    a = np.asarray(array, dtype="<f4")
    return struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def dump_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(array))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    (rank,) = struct.unpack_from("<I", buf, 0)
    dims = struct.unpack_from(f"<{rank}I", buf, 4)
    return np.frombuffer(buf, dtype="<f4", offset=4 + 4 * rank).reshape(dims).copy()
