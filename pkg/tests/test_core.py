import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cepa import autodiff as ad
from cepa.core import (CepaConfig, CepaRun, NumericalFailure, adapt_lambda, clip_delta, consensus_terms,
                       cosine_similarity_stat, delta_step, init_run, misclass_rate, objective, objective_grad,
                       residuals, run_cepa, scan, should_terminate, update_mu)
from cepa.data import CleanDefenseSet

CFG = CepaConfig()


def second_term(diffs, mu):
    return float(np.mean(((diffs - mu) ** 2).sum(axis=1)))


# --- consensus update ---

def test_update_mu_identical_residuals():
    r = np.array([0.5, -1.0, 2.0])
    f0 = np.random.default_rng(0).normal(size=(4, 3))
    mu = update_mu(f0 + r, f0)
    assert np.allclose(mu, r)
    assert second_term(np.tile(r, (4, 1)), mu) < 1e-24


def test_update_mu_symmetric_residuals():
    r = np.array([1.0, 2.0, -3.0])
    f0 = np.zeros((2, 3))
    assert np.array_equal(update_mu(f0 + np.stack([r, -r]), f0), np.zeros(3))


def test_update_mu_empty_rejected():
    with pytest.raises(ValueError):
        update_mu(np.zeros((0, 3)), np.zeros((0, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_update_mu_beats_random_probes(seed):
    rng = np.random.default_rng(seed)
    diffs = rng.normal(size=(9, 20)) * rng.uniform(0.1, 3)
    mu = update_mu(diffs, np.zeros_like(diffs))
    best = second_term(diffs, mu)
    for k in range(100):
        v = rng.normal(size=20)
        v /= np.linalg.norm(v)
        eps = (1e-3, 1e-2)[k % 2]
        assert best <= second_term(diffs, mu + eps * v) + 1e-7


def test_variance_identity():
    rng = np.random.default_rng(1)
    f0 = rng.normal(size=(12, 30)).astype(np.float32)
    f = (f0 + rng.normal(0.5, 1.0, size=(12, 30))).astype(np.float32)
    mu = update_mu(f, f0)
    sigma, mu_norm, ratio = consensus_terms(f, f0, mu)
    expansion = np.mean(((f - f0).astype(np.float64) ** 2).sum(axis=1)) - mu_norm ** 2
    assert abs(sigma ** 2 - expansion) < 1e-5 * max(1.0, sigma ** 2)
    assert math.isclose(ratio, sigma / mu_norm)


def test_consensus_zero_mu_is_infinite():
    f = np.ones((3, 4))
    assert consensus_terms(f, f, np.zeros(4))[2] == math.inf


# --- objective ---

def _run(model, defense, target=1, layer=8, n=None):
    x, y = defense.source_set(target)
    if n is not None:
        x, y = x[:n], y[:n]
    return init_run(model, layer, target, x, y, CFG)


def test_objective_at_zero_is_mean_cross_entropy(patch_trained, defense):
    model = patch_trained[0]
    run = _run(model, defense)
    with ad.no_grad():
        ce = ad.softmax_cross_entropy(model.logits(run.x), np.full(run.n, run.target)).data
    assert abs(float(objective(model, run).data) - float(ce)) < 1e-5


def test_objective_independent_of_mu_when_lambda_zero(patch_trained, defense, rng):
    model = patch_trained[0]
    run = _run(model, defense)
    run.delta = clip_delta(run.x, rng.normal(0, 0.05, run.x.shape).astype(np.float32))
    a = float(objective(model, run, lam=0.0).data)
    run.mu = rng.normal(size=run.mu.shape).astype(np.float32)
    assert float(objective(model, run, lam=0.0).data) == a


def test_single_sample_second_term_vanishes(patch_trained, defense, rng):
    model = patch_trained[0]
    run = _run(model, defense, n=1)
    run.delta = clip_delta(run.x, rng.normal(0, 0.1, run.x.shape).astype(np.float32))
    with ad.no_grad():
        f = model.forward_to(run.layer, run.x + run.delta).data
    run.mu = update_mu(f.reshape(1, -1), run.clean_features.reshape(1, -1))
    assert float(np.sum(residuals(f, run.clean_features, run.mu) ** 2)) == 0.0
    assert abs(float(objective(model, run, lam=5.0).data) - float(objective(model, run, lam=0.0).data)) < 1e-6


def test_step_zero_leaves_delta(patch_trained, defense):
    model = patch_trained[0]
    run = _run(model, defense)
    _, grad = objective_grad(model, run)
    before = run.delta.copy()
    delta_step(run, grad, 0.0)
    assert np.array_equal(run.delta, before)


def test_one_step_decreases_objective(patch_trained, defense):
    model = patch_trained[0]
    run = _run(model, defense)
    with model.frozen():
        start, grad = objective_grad(model, run)
    assert np.abs(grad).sum() > 0
    delta_step(run, grad, 1e-3)
    assert float(objective(model, run).data) < start


def test_non_finite_gradient_aborts(patch_trained, defense):
    run = _run(patch_trained[0], defense)
    grad = np.zeros_like(run.delta)
    grad[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalFailure):
        delta_step(run, grad, 0.1)


def test_feasibility_fuzz():
    # 10^4 random (x, delta, step, grad) cases in batches
    rng = np.random.default_rng(2024)
    for _ in range(100):
        x = rng.uniform(0, 1, (100, 3, 4, 4)).astype(np.float32)
        delta = clip_delta(x, rng.normal(0, rng.uniform(0.01, 2), x.shape).astype(np.float32))
        grad = rng.standard_cauchy(x.shape).astype(np.float32)
        step = float(rng.uniform(0, 10))
        out = clip_delta(x, (delta - np.float32(step) * grad).astype(np.float32))
        z = x + out
        assert z.min() >= 0.0 and z.max() <= 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(0, 1))
def test_clip_property(deltas, xval):
    d = np.array(deltas, np.float32)
    x = np.full_like(d, np.float32(xval))
    z = x + clip_delta(x, d)
    assert z.min() >= 0 and z.max() <= 1


# --- misclassification rate ---

def test_misclass_rate_with_true_class_equals_accuracy(clean_trained, defense):
    model = clean_trained[0]
    mask = defense.labels == 3
    run = init_run(model, 8, 3, defense.images[mask], defense.labels[mask], CFG)
    acc = float(np.mean(model.predict(run.x) == 3))
    assert misclass_rate(model, run) == acc


def test_misclass_rate_chance_on_uniform_model(rng):
    # zero output layer: every posterior is uniform, ties go to class 0
    from cepa.model import desk_cnn
    m = desk_cnn(seed=0)
    m.layers[-1].weight.data[...] = 0
    x = rng.uniform(0, 1, (50, 3, 16, 16)).astype(np.float32)
    rates = [misclass_rate(m, init_run(m, 8, t, x, np.zeros(50), CFG)) for t in range(5)]
    assert rates == [1.0, 0.0, 0.0, 0.0, 0.0]
    assert np.mean(rates) == 1 / 5


# --- lambda schedule and termination ---

def test_adapt_lambda_examples():
    assert math.isclose(adapt_lambda([0.95] * 5, 0.01, CFG), 0.015)
    assert math.isclose(adapt_lambda([0.5] * 5, 0.015, CFG), 0.01)
    assert adapt_lambda([0.95, 0.5] * 3, 0.01, CFG) == 0.01
    assert adapt_lambda([0.95] * 4, 0.01, CFG) == 0.01
    # exactly at threshold is neither above nor below
    assert adapt_lambda([0.9] * 5, 0.01, CFG) == 0.01
    # only the last streak_len rates matter
    assert math.isclose(adapt_lambda([0.1] + [0.95] * 5, 0.02, CFG), 0.03)


def _trace(norms, rates):
    return [{"mean_delta_norm": n, "misclass_rate": r} for n, r in zip(norms, rates)]


def test_should_terminate_examples():
    assert should_terminate(_trace([1.0] * 50, [0.95] * 50), CFG)
    assert not should_terminate(_trace(np.linspace(2, 1, 50), [0.95] * 50), CFG)
    rates = [0.95] * 50
    rates[20] = 0.85
    assert not should_terminate(_trace([1.0] * 50, rates), CFG)
    assert not should_terminate(_trace([1.0] * 49, [0.95] * 49), CFG)


def test_should_terminate_uses_best_before_window():
    # best 0.5 seen early; 50 later iterations never beat it
    norms = [0.5] + [0.6] * 50
    assert should_terminate(_trace(norms, [0.95] * 51), CFG)
    # one improvement inside the window keeps the run going
    norms[30] = 0.4
    assert not should_terminate(_trace(norms, [0.95] * 51), CFG)
    # earlier iterations below threshold do not set the reference
    assert not should_terminate(_trace([0.1] + list(np.linspace(1.0, 0.5, 50)), [0.5] + [0.95] * 50), CFG)


def test_should_terminate_budget():
    cfg = replace(CFG, max_iterations=10)
    assert should_terminate(_trace([1.0] * 10, [0.0] * 10), cfg)
    assert not should_terminate(_trace([1.0] * 9, [0.0] * 9), cfg)


# --- cosine statistic ---

def _cos_run(deltas):
    d = np.asarray(deltas, np.float32)
    return CepaRun(0, 0, d, np.zeros(len(d)), d, d, np.zeros(1, np.float32), 0.01)


def test_cosine_identical_and_opposite():
    v = np.array([[1.0, 2.0, -1.0]])
    assert math.isclose(cosine_similarity_stat(_cos_run(np.tile(v, (4, 1)))), 1.0, rel_tol=1e-6)
    assert math.isclose(cosine_similarity_stat(_cos_run(np.vstack([v, -v]))), -1.0, rel_tol=1e-6)
    assert cosine_similarity_stat(_cos_run(np.vstack([v, 0 * v]))) == 0.0
    assert math.isnan(cosine_similarity_stat(_cos_run(v)))


# --- full runs ---

def test_single_sample_run_is_degenerate(patch_trained, defense):
    one = CleanDefenseSet(defense.images[:1], defense.labels[:1], defense.num_classes)
    run = run_cepa(patch_trained[0], 8, 4, one, replace(CFG, max_iterations=20))
    assert run.sigma == 0.0
    assert run.degenerate and run.consensus == math.inf


def test_run_budget_and_feasibility(patch_trained, defense):
    cfg = replace(CFG, max_iterations=30, step_size=0.1)
    run = run_cepa(patch_trained[0], 4, 2, defense, cfg)
    assert run.iterations <= 30 and len(run.trace) == run.iterations
    z = run.x + run.delta
    assert z.min() >= 0 and z.max() <= 1
    assert run.mu.shape == (np.prod(patch_trained[0].tap(4).feature_shape),)
    assert run.sigma >= 0


def test_empty_source_set_rejected(patch_trained, defense):
    only = CleanDefenseSet(defense.images[defense.labels == 4], defense.labels[defense.labels == 4], 5)
    with pytest.raises(ValueError):
        run_cepa(patch_trained[0], 8, 4, only, CFG)


def test_converged_run_meets_threshold_and_is_deterministic(patch_trained, defense):
    cfg = replace(CFG, step_size=0.1)
    a = run_cepa(patch_trained[0], 8, 4, defense, cfg)
    b = run_cepa(patch_trained[0], 8, 4, defense, cfg)
    assert a.converged and a.misclass >= cfg.misclass_threshold
    assert a.summary() == b.summary()
    assert np.array_equal(a.mu, b.mu)


def test_scan_covers_layers_and_targets(patch_trained, defense):
    cfg = replace(CFG, max_iterations=3, layers=(1, 8))
    runs = scan(patch_trained[0], defense, cfg, threads=2)
    assert sorted(runs) == [1, 8]
    assert all(sorted(per) == [0, 1, 2, 3, 4] for per in runs.values())
    serial = scan(patch_trained[0], defense, cfg, threads=1)
    assert serial[8][3].summary() == runs[8][3].summary()


def test_config_validation():
    for kw in ({"lambda_init": 0}, {"lambda_factor": 1.0}, {"misclass_threshold": 1.0}, {"stall_window": 0},
               {"max_iterations": 0}, {"step_size": -1}):
        with pytest.raises(ValueError):
            CepaConfig(**kw)
