import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stdlab.dynamics import NULL, ddim_step
from stdlab.eval import gradcheck_suite
from stdlab.models import AnalyticTeacher, GmmSpec
from stdlab.nn import (Discriminator, NonFiniteError, StudentNet, adam_step, consistency_fn,
                       ema_update, finite_difference_check, gradients, make_adam, make_target,
                       param_store, student_forward)
from stdlab.schedule import NoiseSchedule, build_schedule

LIN = build_schedule("linear-beta", 1000)


def toy_schedule():
    ab = build_schedule("linear-beta", 10).alpha_bar.copy()
    ab[5], ab[2] = 0.25, 0.64
    return NoiseSchedule("linear-beta", 10, ab)


def make_net(prediction="eps", seed=0, **kw):
    torch.manual_seed(seed)
    return StudentNet(2, 3, 1000, widths=(7, 5), n_freqs=3, embed_dim=4, prediction=prediction,
                      alpha_bar=LIN.alpha_bar, **kw).double()


def reference_forward(net: StudentNet, x, t, s, cond):
    """Straight-line numpy forward pass read off the parameter dict."""
    p = {k: v.detach().numpy() for k, v in net.named_parameters()}
    n = x.shape[0]
    T = net.total_steps

    def fourier(u):
        ang = u * math.pi * np.arange(1, net.n_freqs + 1)
        return np.concatenate([np.sin(ang), np.cos(ang)])

    emb = p["embed.weight"][np.asarray(cond) + 1]
    s_feat = fourier(s / T) if net.condition_on_s else fourier(0.0)
    h = np.concatenate([x, np.tile(fourier(t / T), (n, 1)), np.tile(s_feat, (n, 1)), emb], axis=1)
    linear = sorted({int(k.split(".")[1]) for k in p if k.startswith("body.")})
    for j, idx in enumerate(linear):
        h = h @ p[f"body.{idx}.weight"].T + p[f"body.{idx}.bias"]
        if j < len(linear) - 1:
            h = np.tanh(h)
    if net.prediction == "v":
        ab = LIN.alpha_bar[t]
        h = math.sqrt(ab) * h + math.sqrt(1 - ab) * x
    return h


@pytest.mark.parametrize("prediction", ["eps", "v"])
@pytest.mark.parametrize("condition_on_s", [True, False])
def test_forward_matches_reference(prediction, condition_on_s):
    net = make_net(prediction, seed=1, condition_on_s=condition_on_s)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 2))
    cond = np.array([NULL, 0, 1, 2, NULL, 1])
    got = net(torch.from_numpy(x), 640, 115, cond).detach().numpy()
    np.testing.assert_allclose(got, reference_forward(net, x, 640, 115, cond), rtol=0, atol=1e-12)


def test_forward_zero_init_and_determinism():
    net = make_net(zero_init_output=True)
    x = torch.randn(5, 2, dtype=torch.float64)
    np.testing.assert_array_equal(net(x, 300, 20, NULL).detach().numpy(), 0.0)
    net = make_net(seed=4)
    a = student_forward(net, x, 300, 20, np.zeros(5, dtype=int))
    b = student_forward(net, x, 300, 20, np.zeros(5, dtype=int))
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        student_forward(net, x, 20, 300, NULL)


def test_forward_nonfinite_aborts():
    net = make_net()
    with pytest.raises(NonFiniteError):
        net(torch.full((1, 2), float("nan"), dtype=torch.float64), 10, 0, NULL)


def test_v_prediction_needs_schedule():
    with pytest.raises(ValueError):
        StudentNet(2, 1, 100, prediction="v")


@given(st.integers(0, 1000), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_consistency_boundary(t, seed):
    net = make_net(seed=seed % 1000)
    x = torch.from_numpy(np.random.default_rng(seed).normal(size=(4, 2)) * 5)
    assert consistency_fn(net, x, t, t, NULL, LIN) is x


def test_consistency_hand_value():
    sched = toy_schedule()
    torch.manual_seed(0)
    net = StudentNet(1, 1, 10, widths=(4,), zero_init_output=True).double()
    with torch.no_grad():
        net.body[-1].bias.fill_(0.5)
    out = consistency_fn(net, torch.tensor([[1.0]], dtype=torch.float64), 5, 2, NULL, sched)
    assert out.item() == pytest.approx(1.2071797, abs=1e-7)


def test_consistency_with_teacher_eps_is_teacher_jump():
    spec = GmmSpec(weights=[1.0], means=[[0.0, 0.0]], stdevs=[1.0])
    teacher = AnalyticTeacher(spec, LIN)

    class Oracle(torch.nn.Module):
        def forward(self, x, t, s, cond):
            return torch.from_numpy(teacher(x.numpy(), t, cond))

    x = np.random.default_rng(2).normal(size=(3, 2))
    out = consistency_fn(Oracle(), torch.from_numpy(x), 700, 100, NULL, LIN).numpy()
    np.testing.assert_allclose(out, ddim_step(x, 700, 100, teacher(x, 700, NULL), LIN), atol=1e-15)


def test_gradients_trivial_cases():
    net = make_net(seed=2)
    x = torch.randn(3, 2, dtype=torch.float64)
    out = net(x, 100, 50, NULL)
    grads = gradients(net, 0.0 * out.sum())
    assert list(grads) == list(param_store(net))
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())

    w = net.body[0].weight
    grads = gradients(net, 0.5 * (w**2).sum())
    assert torch.equal(grads["body.0.weight"], w)
    # parameters the loss never touched come back as zeros, not missing
    assert torch.count_nonzero(grads["embed.weight"]) == 0


def test_finite_difference_on_quadratic():
    lin = torch.nn.Linear(3, 2).double()
    x = torch.randn(4, 3, dtype=torch.float64)
    assert finite_difference_check(lin, lambda: (lin(x) ** 2).sum()) < 1e-7


def test_gradcheck_suite_passes():
    rows = gradcheck_suite(5, seed=3)
    assert len(rows) == 10
    assert max(r["max_rel_error"] for r in rows) < 1e-4


def test_adam_zero_grad_keeps_params():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    opt = make_adam([([p], 0.1)])
    adam_step(opt, {p: torch.zeros(2, dtype=torch.float64)})
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0], dtype=torch.float64))

    adam_step(opt, {p: torch.tensor([0.5, 0.5], dtype=torch.float64)})
    m, v = opt.state[p]["exp_avg"].clone(), opt.state[p]["exp_avg_sq"].clone()
    adam_step(opt, {p: torch.zeros(2, dtype=torch.float64)})
    assert torch.allclose(opt.state[p]["exp_avg"], 0.9 * m, rtol=1e-15)
    assert torch.allclose(opt.state[p]["exp_avg_sq"], 0.999 * v, rtol=1e-15)


def test_adam_first_step_hand_value():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    g = np.array([0.3, -4.0, 1e-9])
    p = torch.nn.Parameter(torch.tensor([1.0, 1.0, 1.0], dtype=torch.float64))
    opt = make_adam([([p], lr)], betas=(b1, b2), eps=eps)
    adam_step(opt, {p: torch.from_numpy(g)})
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g**2 / (1 - b2)
    expected = 1.0 - lr * m_hat / (np.sqrt(v_hat) + eps)
    np.testing.assert_allclose(p.detach().numpy(), expected, rtol=0, atol=1e-15)
    # with |g| >> eps the first step is lr * sign(g)
    np.testing.assert_allclose(p.detach().numpy()[:2], 1.0 - lr * np.sign(g[:2]), atol=1e-9)


def test_adam_groups_use_own_lr():
    a = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
    b = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
    opt = make_adam([([a], 0.1), ([b], 0.01)])
    one = torch.ones(1, dtype=torch.float64)
    adam_step(opt, {a: one, b: one})
    assert a.item() == pytest.approx(-0.1, abs=1e-9)
    assert b.item() == pytest.approx(-0.01, abs=1e-9)


def test_ema_examples():
    src = torch.nn.Linear(1, 1, bias=False).double()
    tgt = make_target(src)
    with torch.no_grad():
        tgt.weight.fill_(1.0)
        src.weight.fill_(0.0)
    ema_update(tgt, src, 1.0)
    assert tgt.weight.item() == 1.0
    ema_update(tgt, src, 0.95)
    assert tgt.weight.item() == pytest.approx(0.95, abs=1e-15)
    ema_update(tgt, src, 0.0)
    assert tgt.weight.item() == 0.0
    assert not any(p.requires_grad for p in tgt.parameters())
    with pytest.raises(ValueError):
        ema_update(torch.nn.Linear(2, 1), torch.nn.Linear(1, 1), 0.5)


@given(st.floats(0.0, 1.0), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_ema_stays_between(mu, seed):
    torch.manual_seed(seed % 10_000)
    src, tgt = Discriminator(3, (4,)).double(), Discriminator(3, (4,)).double()
    old = [p.detach().clone() for p in tgt.parameters()]
    ema_update(tgt, src, mu)
    for o, p, q in zip(old, tgt.parameters(), src.parameters()):
        lo, hi = torch.minimum(o, q), torch.maximum(o, q)
        assert torch.all(p >= lo - 1e-15) and torch.all(p <= hi + 1e-15)


def test_discriminator_ignores_time():
    disc = Discriminator(5)
    assert disc(torch.zeros(3, 5)).shape == (3,)
