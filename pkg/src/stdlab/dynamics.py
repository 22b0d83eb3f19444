"""Forward noising, the deterministic DDIM update, guidance and rollouts.

Everything here works in integer timesteps. The arithmetic only uses
``+ - *`` with Python floats, so ``ddim_step`` and ``perturb`` accept numpy
arrays and torch tensors alike.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .schedule import NoiseSchedule, StepGrid

NULL = -1  # condition label meaning "unconditional"


def _check_t(schedule: NoiseSchedule, *ts: int):
    for t in ts:
        if not 0 <= t <= schedule.total_steps:
            raise ValueError(f"timestep {t} outside [0, {schedule.total_steps}]")


def perturb(x0, t: int, eps, schedule: NoiseSchedule):
    """Forward-noise ``x0`` to timestep ``t`` with the given noise draw."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    _check_t(schedule, t)
    if t == 0:
        return x0 * 1.0
    return schedule.signal(t) * x0 + schedule.noise(t) * eps


def ddim_step(x_t, t: int, s: int, eps_pred, schedule: NoiseSchedule):
    """Deterministic DDIM jump from ``t`` down to ``s`` given predicted noise."""
    if s > t:
        raise ValueError(f"DDIM step must go backwards in time (s={s} > t={t})")
    _check_t(schedule, t, s)
    if s == t:
        return x_t
    ab_t, ab_s = schedule.alpha_bar[t], schedule.alpha_bar[s]
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_pred) * (1.0 / math.sqrt(ab_t))
    return math.sqrt(ab_s) * x0_hat + math.sqrt(1.0 - ab_s) * eps_pred


def cfg_eps(model: Callable, x, t: int, cond, omega):
    """Classifier-free guidance ``(1 + w) * eps(x, c) - w * eps(x, null)``.

    ``omega`` may be a scalar or one value per row of ``x``.
    """
    eps_c = model(x, t, cond)
    if np.ndim(omega) == 0 and omega == 0:
        return eps_c
    eps_u = model(x, t, np.full(np.shape(cond), NULL))
    w = np.asarray(omega, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    return (1.0 + w) * eps_c - w * eps_u


def teacher_step(model: Callable, x, t: int, s: int, cond, omega, schedule: NoiseSchedule):
    """One guided solver step of the teacher from ``t`` to ``s``."""
    return ddim_step(x, t, s, cfg_eps(model, x, t, cond, omega), schedule)


@dataclass
class Trajectory:
    timesteps: list[int] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)

    def append(self, t: int, x: np.ndarray):
        if self.timesteps and t >= self.timesteps[-1]:
            raise ValueError("trajectory timesteps must strictly decrease")
        self.timesteps.append(t)
        self.states.append(x)

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self):
        return len(self.timesteps)

    def to_csv(self, path):
        """Write one row per (timestep, sample) with the sample coordinates."""
        first = np.atleast_2d(self.states[0])
        d = first.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestep", "sample"] + [f"x_{j + 1}" for j in range(d)])
            for t, x in zip(self.timesteps, self.states):
                for i, row in enumerate(np.atleast_2d(x)):
                    w.writerow([t, i] + [repr(float(v)) for v in row])


def rollout(model: Callable, x_tau, grid: StepGrid, cond, omega, schedule: NoiseSchedule,
            steps: int | None = None) -> Trajectory:
    """Run the guided teacher along ``grid`` starting from ``x_tau``.

    ``steps`` truncates the rollout after that many solver steps.
    """
    if grid.count < 1:
        raise ValueError("rollout needs at least one solver step")
    n = grid.count if steps is None else steps
    traj = Trajectory()
    x = x_tau
    traj.append(grid[0], x)
    for k in range(n):
        t, s = grid[k], grid[k + 1]
        x = teacher_step(model, x, t, s, cond, omega, schedule)
        traj.append(s, x)
    return traj


def c_coefficient(t: int, s: int, schedule: NoiseSchedule) -> float:
    """Gain from teacher noise error to one-step displacement between t and s."""
    if s > t:
        raise ValueError(f"need s <= t, got s={s}, t={t}")
    _check_t(schedule, t, s)
    if s == t:
        return 0.0
    ab_t, ab_s = schedule.alpha_bar[t], schedule.alpha_bar[s]
    return (math.sqrt(ab_s) * math.sqrt(1 - ab_t) - math.sqrt(ab_t) * math.sqrt(1 - ab_s)) / math.sqrt(ab_t)


def one_step_residual(x0, eps, t: int, s: int, teacher: Callable, schedule: NoiseSchedule,
                      cond=None):
    """Compare a teacher DDIM step against forward noising with the same noise.

    Returns ``(residual, predicted)`` where ``residual`` is the gap between
    the teacher's step from ``x_t`` and the forward sample ``x_s``, and
    ``predicted`` is ``C(t, s) * (eps - eps_teacher(x_t))``. For t >= 1 the two
    agree to rounding error whatever the teacher is.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if s > t:
        raise ValueError(f"need s <= t, got s={s}, t={t}")
    if cond is None:
        cond = np.full(x0.shape[:-1], NULL)
    x_t = perturb(x0, t, eps, schedule)
    x_s = perturb(x0, s, eps, schedule)
    if s == t:
        zero = np.zeros_like(x0)
        return zero, zero
    eps_phi = teacher(x_t, t, cond)
    residual = ddim_step(x_t, t, s, eps_phi, schedule) - x_s
    predicted = c_coefficient(t, s, schedule) * (eps - eps_phi)
    return residual, predicted
