"""Discrete variance-preserving noise schedules and solver timestep grids."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("linear-beta", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha_bar[t]`` for ``t = 0..T``.

    ``alpha_bar[0]`` is exactly 1, so timestep 0 is clean data.
    """

    kind: str
    total_steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        self.alpha_bar.setflags(write=False)

    @property
    def T(self) -> int:
        return self.total_steps

    def signal(self, t: int) -> float:
        return math.sqrt(self.alpha_bar[t])

    def noise(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar[t])

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)


def build_schedule(kind: str = "linear-beta", T: int = 1000) -> NoiseSchedule:
    """Build a schedule of ``T`` steps.

    ``linear-beta`` is the DDPM schedule (beta from 1e-4 to 0.02).
    ``cosine`` follows the squared-cosine signal curve with betas clipped
    at 0.999 so that ``alpha_bar[T]`` stays positive.
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T!r}")
    T = int(T)
    if kind == "linear-beta":
        betas = np.linspace(1e-4, 0.02, T, dtype=np.float64)
    elif kind == "cosine":
        offset = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + offset) / (1 + offset) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - betas)
    return NoiseSchedule(kind=kind, total_steps=T, alpha_bar=alpha_bar)


def tau_eta(schedule: NoiseSchedule, eta: float) -> int:
    """Starting timestep ``round(eta * T)`` for denoising strength ``eta``."""
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    T = schedule.total_steps
    return int(min(max(round(eta * T), 1), T))


@dataclass(frozen=True)
class StepGrid:
    timesteps: tuple[int, ...]

    @property
    def count(self) -> int:
        return len(self.timesteps) - 1

    @property
    def start(self) -> int:
        return self.timesteps[0]

    def __len__(self):
        return len(self.timesteps)

    def __iter__(self):
        return iter(self.timesteps)

    def __getitem__(self, k):
        return self.timesteps[k]

    def index(self, t: int) -> int:
        return self._positions[t]

    def next_after(self, t: int) -> int:
        """The grid timestep one solver step below ``t``."""
        return self.timesteps[self._positions[t] + 1]

    def floor(self, value: float) -> int:
        """Largest grid timestep not above ``value``."""
        asc = self._ascending
        k = int(np.searchsorted(asc, value, side="right")) - 1
        return int(asc[max(k, 0)])

    def below(self, t: int) -> list[int]:
        return [u for u in self.timesteps if u < t]

    def subsample(self, nfe: int) -> "StepGrid":
        """``nfe`` roughly equal jumps drawn from this grid's own timesteps."""
        if not 1 <= nfe <= self.count:
            raise ValueError(f"nfe must be in [1, {self.count}], got {nfe}")
        picks = np.round(np.linspace(0, self.count, nfe + 1)).astype(int)
        return StepGrid(tuple(self.timesteps[k] for k in picks))

    def __post_init__(self):
        ts = self.timesteps
        if len(ts) < 2 or ts[-1] != 0 or any(a <= b for a, b in zip(ts, ts[1:])):
            raise ValueError(f"grid must be strictly decreasing and end at 0: {ts}")
        object.__setattr__(self, "_positions", {t: k for k, t in enumerate(ts)})
        object.__setattr__(self, "_ascending", np.array(ts[::-1]))


def uniform_grid(schedule: NoiseSchedule, tau: int, N: int) -> StepGrid:
    """``N`` solver steps from ``tau`` down to 0 with near-equal integer gaps."""
    if not 1 <= tau <= schedule.total_steps:
        raise ValueError(f"tau must lie in [1, {schedule.total_steps}], got {tau}")
    if not 1 <= N <= tau:
        raise ValueError(f"need 1 <= N <= tau, got N={N}, tau={tau}")
    # floor(k * tau / N) in exact integer arithmetic
    ts = tuple((k * tau) // N for k in range(N, -1, -1))
    return StepGrid(ts)
