"""Student and discriminator networks plus the training-side plumbing.

Networks are small torch MLPs. Gradients come from torch autograd; the
finite-difference checker in this module is the independent cross-check.
"""

from __future__ import annotations

import copy
import math
from collections import OrderedDict

import numpy as np
import torch
from torch import nn

from .dynamics import NULL, ddim_step
from .schedule import NoiseSchedule


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces NaN or inf."""


def fourier_features(u: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """sin/cos encodings of ``u`` in [0, 1] at frequencies pi * (1..n)."""
    freqs = math.pi * torch.arange(1, n_freqs + 1, dtype=u.dtype)
    angles = u[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def _mlp(sizes, activation) -> nn.Sequential:
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(fan_in, fan_out))
        if k < len(sizes) - 2:
            layers.append(activation())
    return nn.Sequential(*layers)


ACTIVATIONS = {"tanh": nn.Tanh, "silu": nn.SiLU}


PREDICTIONS = ("eps", "v")


class StudentNet(nn.Module):
    """Noise predictor ``eps(x, t, s, c)`` with Fourier time features.

    Timesteps enter normalised by ``T``. Class ``k`` uses embedding row
    ``k + 1``; row 0 is the null condition. With ``condition_on_s`` off the
    target-step features are fed as zeros.

    With ``prediction="v"`` the MLP output is read as the velocity
    ``sqrt(ab) eps - sqrt(1 - ab) x0`` and converted to a noise estimate, which
    keeps long DDIM jumps well conditioned; this needs ``alpha_bar``.
    """

    def __init__(self, dim: int, n_classes: int, total_steps: int, widths=(128, 128, 128),
                 activation: str = "tanh", n_freqs: int = 8, embed_dim: int = 16,
                 condition_on_s: bool = True, zero_init_output: bool = False,
                 prediction: str = "eps", alpha_bar=None):
        super().__init__()
        if prediction not in PREDICTIONS:
            raise ValueError(f"unknown prediction {prediction!r}")
        if prediction == "v" and alpha_bar is None:
            raise ValueError("v-prediction needs the schedule's alpha_bar")
        self.dim = dim
        self.n_classes = n_classes
        self.total_steps = total_steps
        self.prediction = prediction
        self.alpha_bar = None if alpha_bar is None else np.asarray(alpha_bar, dtype=np.float64)
        self.n_freqs = n_freqs
        self.condition_on_s = condition_on_s
        self.widths = tuple(widths)
        self.embed = nn.Embedding(n_classes + 1, embed_dim)
        self.body = _mlp([dim + 4 * n_freqs + embed_dim, *widths, dim], ACTIVATIONS[activation])
        if zero_init_output:
            out = self.body[-1]
            nn.init.zeros_(out.weight)
            nn.init.zeros_(out.bias)

    def forward(self, x: torch.Tensor, t, s, cond) -> torch.Tensor:
        n = x.shape[0]
        tt = torch.full((n,), t / self.total_steps, dtype=x.dtype)
        ss = torch.full((n,), s / self.total_steps, dtype=x.dtype)
        if not self.condition_on_s:
            ss = torch.zeros_like(ss)
        labels = torch.as_tensor(np.asarray(cond) + 1, dtype=torch.long).expand(n)
        h = torch.cat([x, fourier_features(tt, self.n_freqs), fourier_features(ss, self.n_freqs),
                       self.embed(labels).to(x.dtype)], dim=1)
        out = self.body(h)
        if self.prediction == "v":
            ab = self.alpha_bar[t]
            out = math.sqrt(ab) * out + math.sqrt(1.0 - ab) * x
        if not torch.isfinite(out).all():
            raise NonFiniteError(f"student produced non-finite output at t={t}, s={s}")
        return out


def student_forward(net: StudentNet, x, t: int, s: int, cond) -> torch.Tensor:
    if s > t:
        raise ValueError(f"student expects s <= t, got s={s}, t={t}")
    return net(x, t, s, cond)


def consistency_fn(net: StudentNet, x, t: int, s: int, cond, schedule: NoiseSchedule):
    """Jump from ``t`` to ``s`` with the student's noise estimate.

    At ``s == t`` the input comes back unchanged without touching the net.
    """
    if s == t:
        return x
    return ddim_step(x, t, s, student_forward(net, x, t, s, cond), schedule)


class Discriminator(nn.Module):
    """Scalar critic on feature vectors; sees no timestep and no condition."""

    def __init__(self, dim_in: int, widths=(64, 64), activation: str = "silu"):
        super().__init__()
        self.body = _mlp([dim_in, *widths, 1], ACTIVATIONS[activation])

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.body(features).squeeze(-1)


def param_store(module: nn.Module) -> OrderedDict:
    """Name -> parameter tensor, in registration order."""
    return OrderedDict(module.named_parameters())


def gradients(module: nn.Module, loss: torch.Tensor) -> OrderedDict:
    """Reverse-mode gradient of ``loss`` for every parameter of ``module``.

    Parameters the loss does not depend on get zero tensors.
    """
    names, params = zip(*module.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    return OrderedDict(
        (n, torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)
    )


def finite_difference_check(module: nn.Module, loss_fn, h: float = 1e-5,
                            scale_floor: float = 1e-6) -> float:
    """Largest per-coordinate relative error between autograd and central differences.

    ``loss_fn()`` must rebuild the scalar loss from the module's current
    parameters. Intended for float64 modules.
    """
    analytic = gradients(module, loss_fn())
    worst = 0.0
    with torch.no_grad():
        for name, p in module.named_parameters():
            flat = p.view(-1)
            ga = analytic[name].reshape(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                up = loss_fn().item()
                flat[k] = orig - h
                down = loss_fn().item()
                flat[k] = orig
                numeric = (up - down) / (2 * h)
                a = ga[k].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), scale_floor)
                worst = max(worst, err)
    return worst


def make_adam(groups, betas=(0.9, 0.999), eps=1e-8) -> torch.optim.Adam:
    """Adam over one or more ``(params, lr)`` groups."""
    return torch.optim.Adam([{"params": list(p), "lr": lr} for p, lr in groups],
                            betas=betas, eps=eps)


def adam_step(optimizer: torch.optim.Optimizer, grads: dict[torch.Tensor, torch.Tensor]):
    """Install ``grads`` (param -> gradient) and take one optimizer step."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            g = grads.get(p)
            p.grad = torch.zeros_like(p) if g is None else g.detach().clone()
    optimizer.step()


def make_target(net: nn.Module) -> nn.Module:
    """Frozen copy used as the EMA target; never handed to an optimizer."""
    target = copy.deepcopy(net)
    for p in target.parameters():
        p.requires_grad_(False)
    return target


@torch.no_grad()
def ema_update(target: nn.Module, source: nn.Module, mu: float):
    """``target <- mu * target + (1 - mu) * source``, parameter by parameter."""
    src = dict(source.named_parameters())
    for name, p in target.named_parameters():
        q = src[name]
        if p.shape != q.shape:
            raise ValueError(f"EMA shape mismatch for {name}: {p.shape} vs {q.shape}")
        p.mul_(mu).add_(q, alpha=1.0 - mu)


def to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def null_labels(n: int) -> np.ndarray:
    return np.full(n, NULL, dtype=np.int64)
