import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stdlab.dynamics import NULL
from stdlab.models import (AnalyticTeacher, FeatureMap, GmmSpec, PerturbedTeacher, analytic_eps,
                           default_gmm, feature_map, gmm_sample, log_density, make_teacher)
from stdlab.schedule import build_schedule

LIN = build_schedule("linear-beta", 1000)


def mc_posterior_eps(spec, x_t, t, schedule, n, rng, label=None):
    """Self-normalised importance estimate of E[eps | x_t] with prior proposals.

    Returns the estimate and its delta-method standard error per coordinate.
    """
    x0, _ = gmm_sample(spec, n, rng, cond=label)
    ab = schedule.alpha_bar[t]
    eps = (x_t[None] - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
    logw = -0.5 * np.sum(eps**2, axis=1)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = w @ eps
    se = np.sqrt(np.sum(w[:, None] ** 2 * (eps - mean) ** 2, axis=0))
    return mean, se


def test_spec_validation():
    with pytest.raises(ValueError):
        GmmSpec(weights=[0.5, 0.6], means=[[0.0], [1.0]], stdevs=[1, 1])
    with pytest.raises(ValueError):
        GmmSpec(weights=[1.0], means=[[0.0]], stdevs=[0.0])
    with pytest.raises(ValueError):
        GmmSpec(weights=[0.5, 0.5], means=[[0.0]], stdevs=[1, 1])


def test_sample_standard_normal():
    spec = GmmSpec(weights=[1.0], means=[[0.0]], stdevs=[1.0])
    n = 100_000
    x, labels = gmm_sample(spec, n, np.random.default_rng(0))
    assert abs(x.mean()) < 4 / math.sqrt(n)
    assert np.all(labels == 0)


def test_sample_conditional():
    spec = GmmSpec(weights=[0.5, 0.5], means=[[-10.0, 0.0], [10.0, 0.0]], stdevs=[0.5, 0.5])
    x, labels = gmm_sample(spec, 5000, np.random.default_rng(1), cond=1)
    assert np.all(labels == 1)
    assert np.all(np.linalg.norm(x - spec.means[1], axis=1) < 6 * 0.5)
    with pytest.raises(ValueError):
        gmm_sample(spec, 3, np.random.default_rng(1), cond=2)


def test_sample_label_frequency():
    spec = GmmSpec(weights=[0.3, 0.7], means=[[0.0], [1.0]], stdevs=[1, 1])
    n = 100_000
    _, labels = gmm_sample(spec, n, np.random.default_rng(2))
    frac = labels.mean()
    # binomial 99.9% interval is about 0.0048 wide each side
    assert abs(frac - 0.7) < 3.3 * math.sqrt(0.21 / n)
    assert abs(frac - 0.7) < 0.01


@pytest.mark.parametrize("t", [1, 200, 999])
def test_eps_standard_gaussian(t):
    spec = GmmSpec(weights=[1.0], means=[[0.0, 0.0]], stdevs=[1.0])
    x = np.random.default_rng(3).normal(size=(10, 2)) * 3
    np.testing.assert_allclose(analytic_eps(spec, x, t, NULL, LIN),
                               math.sqrt(1 - LIN.alpha_bar[t]) * x, atol=1e-13)


def test_eps_symmetric_origin():
    spec = GmmSpec(weights=[0.5, 0.5], means=[[2.0, -1.0], [-2.0, 1.0]], stdevs=[0.7, 0.7])
    np.testing.assert_allclose(analytic_eps(spec, np.zeros((1, 2)), 300, NULL, LIN), 0.0,
                               atol=1e-15)


def test_eps_rejects_t0_and_bad_label():
    spec = default_gmm()
    with pytest.raises(ValueError):
        analytic_eps(spec, np.zeros((1, 2)), 0, NULL, LIN)
    with pytest.raises(ValueError):
        analytic_eps(spec, np.zeros((1, 2)), 10, 2, LIN)


def test_eps_matches_monte_carlo_example():
    spec = default_gmm()
    x_t = np.array([0.3, -0.2])
    t = 400
    est, se = mc_posterior_eps(spec, x_t, t, LIN, 1_000_000, np.random.default_rng(4))
    exact = analytic_eps(spec, x_t[None], t, NULL, LIN)[0]
    assert np.all(np.abs(est - exact) <= 3 * se)


def test_eps_matches_monte_carlo_sweep():
    rng = np.random.default_rng(5)
    for trial in range(20):
        K, d = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        w = rng.uniform(0.2, 1.0, K)
        spec = GmmSpec(weights=w / w.sum(), means=rng.normal(scale=1.5, size=(K, d)),
                       stdevs=rng.uniform(0.3, 1.2, K))
        t = int(rng.integers(150, 1000))
        label = None if trial % 2 == 0 else int(rng.integers(0, K))
        x0, _ = gmm_sample(spec, 1, rng)
        x_t = math.sqrt(LIN.alpha_bar[t]) * x0[0] + math.sqrt(1 - LIN.alpha_bar[t]) * rng.normal(size=d)
        est, se = mc_posterior_eps(spec, x_t, t, LIN, 400_000, rng, label=label)
        exact = analytic_eps(spec, x_t[None], t, NULL if label is None else label, LIN)[0]
        # 4 standard errors keeps the family-wise false alarm rate small over 20 x d checks
        assert np.all(np.abs(est - exact) <= 4 * se + 1e-12), (trial, est, exact, se)


def test_eps_is_scaled_score():
    rng = np.random.default_rng(6)
    spec = default_gmm()
    h = 1e-5
    for t in (50, 400, 900):
        x = rng.normal(size=(5, 2))
        eps = analytic_eps(spec, x, t, NULL, LIN)
        grad = np.zeros_like(x)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            grad[:, k] = (log_density(spec, x + e, t, LIN) - log_density(spec, x - e, t, LIN)) / (2 * h)
        score = -eps / math.sqrt(1 - LIN.alpha_bar[t])
        rel = np.abs(score - grad) / np.maximum(np.abs(grad), 1e-3)
        assert rel.max() < 1e-5


def test_teacher_counts_calls():
    teacher = AnalyticTeacher(default_gmm(), LIN)
    teacher(np.zeros((3, 2)), 10, NULL)
    teacher(np.zeros((3, 2)), 20, np.array([0, 1, NULL]))
    assert teacher.calls == 2


def test_perturbed_examples():
    base = AnalyticTeacher(default_gmm(), LIN)
    x = np.random.default_rng(7).normal(size=(6, 2))
    exact = analytic_eps(default_gmm(), x, 300, NULL, LIN)
    np.testing.assert_array_equal(PerturbedTeacher(base, 0.0)(x, 300, NULL), exact)
    np.testing.assert_allclose(PerturbedTeacher(base, 0.3)(x, 300, NULL) - exact,
                               np.broadcast_to([0.3, 0.0], x.shape), atol=1e-15)
    sin = PerturbedTeacher(base, 0.5, "seeded-sinusoidal", seed=3)
    np.testing.assert_array_equal(sin(x, 300, NULL), sin(x, 300, NULL))
    assert make_teacher(default_gmm(), LIN, 0.0).delta == 0.0
    with pytest.raises(ValueError):
        PerturbedTeacher(base, -0.1)


@given(st.floats(0.0, 2.0), st.integers(1, 1000), st.integers(0, 2**31),
       st.sampled_from(["constant-vector", "seeded-sinusoidal"]))
@settings(max_examples=40, deadline=None)
def test_perturbation_bound(delta, t, seed, kind):
    spec = default_gmm()
    base = AnalyticTeacher(spec, LIN)
    teacher = PerturbedTeacher(base, delta, kind, seed=seed)
    x = np.random.default_rng(seed).normal(size=(32, 2)) * 2
    gap = np.abs(teacher(x, t, NULL) - analytic_eps(spec, x, t, NULL, LIN)).max()
    # subtraction after adding delta can leave a few ulps of the base value
    assert gap <= delta + 1e-14
    if kind == "constant-vector":
        assert gap == pytest.approx(delta, abs=1e-12)


def test_feature_map_examples():
    x = np.random.default_rng(8).normal(size=(4, 2))
    assert feature_map(x, "identity") is x
    a = feature_map(x, "random-projection", 16, seed=1)
    np.testing.assert_array_equal(a, feature_map(x, "random-projection", 16, seed=1))
    np.testing.assert_array_equal(feature_map(np.zeros((1, 2)), "random-projection", 16), 0.0)
    fm = FeatureMap("random-projection", 2, 16, seed=1)
    np.testing.assert_allclose(fm(torch.from_numpy(x)).numpy(), a, atol=1e-15)
    with pytest.raises(ValueError):
        FeatureMap("dino", 2)
