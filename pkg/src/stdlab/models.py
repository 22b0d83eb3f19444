"""Gaussian-mixture data law and the teachers built on its exact score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import logsumexp

from .dynamics import NULL
from .schedule import NoiseSchedule

FIELD_KINDS = ("constant-vector", "seeded-sinusoidal")
FEATURE_KINDS = ("identity", "random-projection")


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian mixture; component ``k`` doubles as class label ``k``."""

    weights: np.ndarray
    means: np.ndarray
    stdevs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        s = np.asarray(self.stdevs, dtype=np.float64).reshape(-1)
        if len(w) < 1 or not (len(w) == len(m) == len(s)):
            raise ValueError("weights, means and stdevs must have one entry per component")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1, got {w}")
        if np.any(s <= 0):
            raise ValueError("component stdevs must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stdevs", s)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def default_gmm() -> GmmSpec:
    return GmmSpec(weights=[0.4, 0.6], means=[[-1.0, -1.0], [1.0, 1.0]], stdevs=[0.3, 0.5])


def gmm_sample(spec: GmmSpec, n: int, rng: np.random.Generator, cond: int | None = None):
    """Draw ``n`` points and their component labels.

    With ``cond`` left unset (or NULL) the component is drawn by weight,
    otherwise every point comes from component ``cond``.
    """
    if cond is None or cond == NULL:
        labels = rng.choice(spec.n_components, size=n, p=spec.weights)
    else:
        if not 0 <= cond < spec.n_components:
            raise ValueError(f"label {cond} outside [0, {spec.n_components})")
        labels = np.full(n, cond, dtype=np.int64)
    noise = rng.standard_normal((n, spec.dim))
    x0 = spec.means[labels] + spec.stdevs[labels, None] * noise
    return x0, labels.astype(np.int64)


def _as_labels(cond, n: int) -> np.ndarray:
    if cond is None:
        return np.full(n, NULL, dtype=np.int64)
    labels = np.asarray(cond, dtype=np.int64)
    if labels.ndim == 0:
        labels = np.full(n, int(labels), dtype=np.int64)
    return labels


def _component_stats(spec: GmmSpec, x_t: np.ndarray, t: int, schedule: NoiseSchedule):
    ab = schedule.alpha_bar[t]
    a = np.sqrt(ab)
    var = ab * spec.stdevs**2 + (1.0 - ab)  # (K,)
    diff = x_t[:, None, :] - a * spec.means[None, :, :]  # (B, K, d)
    sq = np.einsum("bkd,bkd->bk", diff, diff)
    loglik = -0.5 * sq / var - 0.5 * spec.dim * np.log(2 * np.pi * var)
    return a, var, diff, loglik


def log_density(spec: GmmSpec, x_t, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Exact log density of the noised mixture at timestep ``t``."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    _, _, _, loglik = _component_stats(spec, x_t, t, schedule)
    return logsumexp(loglik + np.log(spec.weights), axis=1)


def analytic_eps(spec: GmmSpec, x_t, t: int, cond, schedule: NoiseSchedule) -> np.ndarray:
    """Posterior-mean noise ``E[eps | x_t]`` under the mixture.

    A class label restricts the posterior to its component; NULL uses the
    whole mixture.
    """
    if t < 1:
        raise ValueError("noise prediction is undefined at t = 0")
    x_t = np.asarray(x_t, dtype=np.float64)
    squeeze = x_t.ndim == 1
    x_t = np.atleast_2d(x_t)
    labels = _as_labels(cond, len(x_t))
    if np.any(labels >= spec.n_components) or np.any(labels < NULL):
        raise ValueError("condition label out of range")

    a, var, diff, loglik = _component_stats(spec, x_t, t, schedule)
    logits = loglik + np.log(spec.weights)
    resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    labelled = labels != NULL
    if labelled.any():
        resp[labelled] = 0.0
        resp[labelled, labels[labelled]] = 1.0

    gain = a * spec.stdevs**2 / var  # (K,)
    post_means = spec.means[None] + gain[None, :, None] * diff  # (B, K, d)
    x0_mean = np.einsum("bk,bkd->bd", resp, post_means)
    eps = (x_t - a * x0_mean) / np.sqrt(1.0 - schedule.alpha_bar[t])
    return eps[0] if squeeze else eps


class AnalyticTeacher:
    """The exact MMSE noise predictor; counts model evaluations in ``calls``."""

    def __init__(self, spec: GmmSpec, schedule: NoiseSchedule):
        self.spec = spec
        self.schedule = schedule
        self.calls = 0

    @property
    def delta(self) -> float:
        return 0.0

    def __call__(self, x_t, t: int, cond) -> np.ndarray:
        self.calls += 1
        return analytic_eps(self.spec, x_t, t, cond, self.schedule)


@dataclass
class PerturbedTeacher:
    """Analytic teacher plus a bounded additive error ``delta * u(x, t)``.

    ``u`` has sup-norm at most 1: either a fixed vector (``direction``,
    rescaled to unit sup-norm) or ``sin(W x + c t/T + phase)`` with seeded
    ``W``, ``c`` and ``phase``.
    """

    base: AnalyticTeacher
    delta: float
    field_kind: str = "constant-vector"
    seed: int = 0
    direction: np.ndarray | None = None
    _w: np.ndarray = field(init=False, repr=False)
    _c: np.ndarray = field(init=False, repr=False)
    _phase: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.field_kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.field_kind!r}")
        d = self.base.spec.dim
        if self.direction is None:
            self.direction = np.eye(d)[0]
        u = np.asarray(self.direction, dtype=np.float64).reshape(d)
        self.direction = u / np.max(np.abs(u))
        rng = np.random.default_rng(self.seed)
        self._w = rng.normal(size=(d, d))
        self._c = rng.normal(scale=3.0, size=d)
        self._phase = rng.uniform(0, 2 * np.pi, size=d)

    @property
    def calls(self) -> int:
        return self.base.calls

    @calls.setter
    def calls(self, value: int):
        self.base.calls = value

    def error_field(self, x_t, t: int) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        if self.field_kind == "constant-vector":
            return np.broadcast_to(self.direction, x_t.shape).copy()
        tt = t / self.base.schedule.total_steps
        return np.sin(x_t @ self._w.T + self._c * tt + self._phase)

    def __call__(self, x_t, t: int, cond) -> np.ndarray:
        eps = self.base(x_t, t, cond)
        if self.delta == 0:
            return eps
        return eps + self.delta * self.error_field(x_t, t)


def make_teacher(spec: GmmSpec, schedule: NoiseSchedule, delta: float = 0.0,
                 field_kind: str = "constant-vector", seed: int = 0):
    base = AnalyticTeacher(spec, schedule)
    if delta == 0:
        return base
    return PerturbedTeacher(base, delta, field_kind, seed)


class FeatureMap:
    """Fixed encoder applied before the discriminator.

    ``identity`` passes points through; ``random-projection`` applies a seeded
    Gaussian matrix then ``tanh``. Works on numpy arrays and torch tensors.
    """

    def __init__(self, kind: str = "random-projection", dim_in: int = 2, dim_out: int = 16,
                 seed: int = 0):
        if kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature map {kind!r}")
        self.kind = kind
        self.dim_in = dim_in
        self.dim_out = dim_in if kind == "identity" else dim_out
        rng = np.random.default_rng(seed)
        self.matrix = rng.normal(size=(dim_in, dim_out)) / np.sqrt(dim_in)
        self._torch = {}

    def __call__(self, x):
        if self.kind == "identity":
            return x
        if isinstance(x, torch.Tensor):
            w = self._torch.get(x.dtype)
            if w is None:
                w = self._torch[x.dtype] = torch.as_tensor(self.matrix, dtype=x.dtype)
            return torch.tanh(x @ w)
        return np.tanh(np.asarray(x) @ self.matrix)


def feature_map(x, kind: str = "random-projection", dim_out: int = 16, seed: int = 0):
    return FeatureMap(kind, np.shape(x)[-1], dim_out, seed)(x)
