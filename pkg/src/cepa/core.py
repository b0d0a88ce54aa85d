"""Consensus embedded-perturbation search for one (target class, layer) pair.

For a putative target ``t`` and tap layer ``l`` the search minimizes

    mean_x [ -log p_t(x + d_x) + lam * || f(x + d_x) - f(x) - mu ||^2 ]

by alternating one gradient step on every per-sample input perturbation
``d_x`` with the closed-form optimum ``mu = mean_x (f(x + d_x) - f(x))``.
``lam`` follows the misclassification rate, and the run stops once the mean
perturbation norm has stalled while the rate stays above threshold.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class CepaConfig:
    lambda_init: float = 0.01
    lambda_factor: float = 1.5
    streak_len: int = 5
    misclass_threshold: float = 0.9
    stall_window: int = 50
    step_size: float = 0.01
    max_iterations: int = 2000
    layers: tuple = None  # tap layer indices; None scans every tappable layer

    def __post_init__(self):
        if self.lambda_init <= 0:
            raise ValueError("lambda_init must be positive")
        if self.lambda_factor <= 1:
            raise ValueError("lambda_factor must exceed 1")
        if not 0 < self.misclass_threshold < 1:
            raise ValueError("misclass_threshold must lie in (0, 1)")
        if self.stall_window <= 0 or self.streak_len <= 0:
            raise ValueError("stall_window and streak_len must be positive")
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")


@dataclass
class CepaRun:
    target: int
    layer: int
    x: np.ndarray            # (N, C, H, W) source samples
    labels: np.ndarray
    clean_features: np.ndarray
    delta: np.ndarray
    mu: np.ndarray
    lam: float
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    sigma: float = float("nan")
    mu_norm: float = float("nan")
    consensus: float = float("nan")
    misclass: float = float("nan")
    degenerate: bool = False

    @property
    def n(self):
        return len(self.x)

    def summary(self):
        return {
            "target": self.target,
            "layer": self.layer,
            "num_samples": self.n,
            "iterations": self.iterations,
            "converged": self.converged,
            "degenerate": self.degenerate,
            "lambda": self.lam,
            "misclass_rate": self.misclass,
            "sigma": self.sigma,
            "mu_norm": self.mu_norm,
            "consensus": self.consensus,
            "cos_sim": cosine_similarity_stat(self),
            "mean_delta_norm": mean_delta_norm(self.delta),
        }


def _flat(a):
    return a.reshape(len(a), -1)


def mean_delta_norm(delta):
    return float(np.linalg.norm(_flat(delta), axis=1).mean()) if len(delta) else 0.0


def residuals(features, clean_features, mu):
    return _flat(features) - _flat(clean_features) - mu.reshape(1, -1)


def update_mu(features, clean_features):
    """Closed-form consensus: the mean embedded shift over the source set."""
    if len(features) == 0:
        raise ValueError("update_mu: empty source set")
    return (features - clean_features).mean(axis=0)


def consensus_terms(features, clean_features, mu):
    """(sigma, ||mu||, sigma/||mu||). The ratio is +inf when ||mu|| == 0."""
    r = residuals(features, clean_features, mu)
    sigma = float(np.sqrt((r.astype(np.float64) ** 2).sum(axis=1).mean()))
    mu_norm = float(np.linalg.norm(mu.astype(np.float64)))
    ratio = sigma / mu_norm if mu_norm > 0 else math.inf
    return sigma, mu_norm, ratio


def objective_terms(features, logits, clean_features, mu, target, lam):
    """Objective as a graph: returns the scalar Tensor to differentiate."""
    n = features.shape[0]
    ce = ad.softmax_cross_entropy(logits, np.full(n, target), reduction="none")
    r = ad.sub(ad.flatten(ad.sub(features, clean_features)), mu.reshape(1, -1))
    var = ad.tensor_sum(ad.square(r), axis=1)
    return ad.mean(ad.add(ce, ad.mul(var, float(lam))))


def objective(model, run, lam=None):
    """Objective value at the run's current perturbations and consensus."""
    lam = run.lam if lam is None else lam
    with ad.no_grad():
        feats, logits = model.features_and_logits(run.layer, run.x + run.delta)
        return objective_terms(feats, logits, run.clean_features, run.mu, run.target, lam)


def objective_grad(model, run, lam=None):
    """(objective value, gradient w.r.t. every per-sample perturbation)."""
    lam = run.lam if lam is None else lam
    delta = ad.Tensor(run.delta, requires_grad=True)
    feats, logits = model.features_and_logits(run.layer, ad.add(run.x, delta))
    obj = objective_terms(feats, logits, run.clean_features, run.mu, run.target, lam)
    obj.backward()
    return float(obj.data), delta.grad


def clip_delta(x, delta):
    """Project so every element of x + delta lies in [0, 1]."""
    return np.clip(x + delta, 0.0, 1.0) - x


def delta_step(run, grad, step):
    """One plain gradient-descent step on every perturbation, then the feasibility clip."""
    if not np.all(np.isfinite(grad)):
        raise NumericalFailure(f"non-finite gradient (target {run.target}, layer {run.layer})")
    run.delta = clip_delta(run.x, run.delta - np.float32(step) * grad).astype(np.float32)
    return run.delta


def misclass_rate(model, run):
    """Fraction of source samples x with predict(x + d_x) == target."""
    if run.n == 0:
        return 0.0
    return float(np.mean(model.predict(run.x + run.delta) == run.target))


def adapt_lambda(rates, lam, cfg):
    """Multiply lam by the factor after ``streak_len`` rates all above threshold,
    divide after ``streak_len`` rates all below; otherwise keep it.

    The caller resets its streak buffer whenever lam changes.
    """
    recent = list(rates)[-cfg.streak_len:]
    if len(recent) < cfg.streak_len:
        return lam
    if all(r > cfg.misclass_threshold for r in recent):
        return lam * cfg.lambda_factor
    if all(r < cfg.misclass_threshold for r in recent):
        return lam / cfg.lambda_factor
    return lam


def _norm_and_rate(entry):
    if isinstance(entry, dict):
        return entry["mean_delta_norm"], entry["misclass_rate"]
    return entry


def should_terminate(trace, cfg):
    """True when the last ``stall_window`` iterations all kept the misclassification
    rate above threshold and none of them lowered the best mean perturbation norm.

    The reference best is the smallest mean norm among earlier iterations that
    were already above threshold; with none, the window's first entry serves.
    Also true once ``max_iterations`` entries exist (budget stop).
    """
    if len(trace) >= cfg.max_iterations:
        return True
    w = cfg.stall_window
    if len(trace) < w:
        return False
    entries = [_norm_and_rate(e) for e in trace]
    window = entries[-w:]
    if not all(rate > cfg.misclass_threshold for _, rate in window):
        return False
    earlier = [norm for norm, rate in entries[:-w] if rate > cfg.misclass_threshold]
    if earlier:
        best, rest = min(earlier), window
    else:
        best, rest = window[0][0], window[1:]
    return all(norm >= best for norm, _ in rest)


def cosine_similarity_stat(run):
    """Mean cosine similarity over unordered pairs of perturbations.

    A zero-norm perturbation has similarity 0 with everything.
    """
    d = _flat(run.delta).astype(np.float64)
    n = len(d)
    if n < 2:
        return float("nan")
    norms = np.linalg.norm(d, axis=1)
    unit = np.where(norms[:, None] > 0, d / np.where(norms > 0, norms, 1)[:, None], 0.0)
    sims = unit @ unit.T
    iu = np.triu_indices(n, k=1)
    return float(sims[iu].mean())


def init_run(model, layer, target, images, labels, cfg):
    layer = layer.layer_index if hasattr(layer, "layer_index") else int(layer)
    x = np.asarray(images, dtype=np.float32)
    with ad.no_grad():
        f0 = model.forward_to(layer, x).data if len(x) else np.zeros((0,) + model.tap(layer).feature_shape, np.float32)
    mu = np.zeros(int(np.prod(model.tap(layer).feature_shape)), np.float32)
    return CepaRun(target=int(target), layer=layer, x=x, labels=np.asarray(labels), clean_features=f0,
                   delta=np.zeros_like(x), mu=mu, lam=cfg.lambda_init)


def _forward(model, run):
    """Graph-recording pass at the current perturbations: (delta leaf, features, logits)."""
    delta = ad.Tensor(run.delta, requires_grad=True)
    feats, logits = model.features_and_logits(run.layer, ad.add(run.x, delta))
    if not (np.all(np.isfinite(feats.data)) and np.all(np.isfinite(logits.data))):
        raise NumericalFailure(f"non-finite activations (target {run.target}, layer {run.layer})")
    return delta, feats, logits


def run_cepa(model, layer, target, defense, cfg, sources=None):
    """Run the alternating search for one (target, layer).

    ``defense`` is a CleanDefenseSet; the source set is every defense sample
    not labeled ``target`` (or those in ``sources``). Each iteration: one
    gradient step on the perturbations, closed-form consensus update, lam
    adaptation, termination check. Perturbations start at zero.
    """
    images, labels = defense.source_set(target, sources)
    if len(images) == 0:
        raise ValueError(f"empty source set for target {target}")
    run = init_run(model, layer, target, images, labels, cfg)
    labels_t = np.full(run.n, run.target)
    streak = []
    with model.frozen():
        state = _forward(model, run)
        for it in range(1, cfg.max_iterations + 1):
            delta, feats, logits = state
            obj = objective_terms(feats, logits, run.clean_features, run.mu, run.target, run.lam)
            obj.backward()
            delta_step(run, delta.grad, cfg.step_size)

            # the pass at the new perturbations also seeds the next gradient step
            state = _forward(model, run)
            f, z = state[1].data, state[2].data
            run.mu = update_mu(_flat(f), _flat(run.clean_features))
            rate = float(np.mean(z.argmax(axis=1) == run.target))
            r = residuals(f, run.clean_features, run.mu)
            ce = ad.softmax_cross_entropy(z, labels_t, reduction="none").data
            run.trace.append({
                "iteration": it,
                "objective": float(np.mean(ce + run.lam * (r ** 2).sum(axis=1))),
                "misclass_rate": rate,
                "lambda": run.lam,
                "mean_delta_norm": mean_delta_norm(run.delta),
            })
            run.iterations = it
            run.misclass = rate
            streak.append(rate)
            new_lam = adapt_lambda(streak, run.lam, cfg)
            if new_lam != run.lam:
                run.lam = new_lam
                streak = []
            if should_terminate(run.trace, cfg):
                run.converged = _stalled(run.trace, cfg)
                break
    finalize(model, run)
    return run


def _stalled(trace, cfg):
    return should_terminate(trace, replace(cfg, max_iterations=len(trace) + 1))


def finalize(model, run):
    with ad.no_grad():
        feats = model.forward_to(run.layer, run.x + run.delta).data
    run.mu = update_mu(_flat(feats), _flat(run.clean_features))
    run.sigma, run.mu_norm, run.consensus = consensus_terms(feats, run.clean_features, run.mu)
    run.degenerate = run.n < 2 or run.mu_norm == 0
    if run.degenerate:
        run.consensus = math.inf
    return run


def scan(model, defense, cfg, targets=None, threads=1, sources=None):
    """Every (layer, target) run. Returns {layer: {target: CepaRun}} in sorted order."""
    layers = list(cfg.layers) if cfg.layers is not None else list(model.tappable_layers)
    targets = list(range(model.num_classes)) if targets is None else list(targets)
    jobs = [(layer, t) for layer in layers for t in targets]

    def work(job):
        layer, t = job
        run = run_cepa(model, layer, t, defense, cfg, sources=sources)
        log.info("layer %d target %d: iters %d consensus %.4g |mu| %.4g rate %.2f",
                 layer, t, run.iterations, run.consensus, run.mu_norm, run.misclass)
        return run

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(work, jobs))
    else:
        runs = [work(j) for j in jobs]
    out = {}
    for (layer, t), run in zip(jobs, runs):
        out.setdefault(layer, {})[t] = run
    return out
