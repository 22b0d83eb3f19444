"""Trajectory bank: resumable teacher rollouts held between training steps.

Each slot holds one batch of trajectories that share a timestep. A slot
advances by one solver step whenever it is drawn and is freed once its
trajectories reach timestep 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class BankEntry:
    x0: np.ndarray
    state: np.ndarray
    cond: np.ndarray
    t: int
    omega: np.ndarray | None = None  # only kept with fixed per-trajectory guidance
    start: np.ndarray | None = None  # x at the first grid step, kept for audits

    def copy(self) -> "BankEntry":
        return replace(
            self,
            x0=self.x0.copy(),
            state=self.state.copy(),
            cond=self.cond.copy(),
            omega=None if self.omega is None else self.omega.copy(),
            start=None if self.start is None else self.start.copy(),
        )


class TrajectoryBank:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("bank capacity must be at least 1")
        self.capacity = capacity
        self.slots: list[BankEntry | None] = [None] * capacity
        self._pending: dict[int, tuple] = {}

    def __len__(self) -> int:
        return sum(e is not None for e in self.slots)

    @property
    def occupied(self) -> list[int]:
        return [i for i, e in enumerate(self.slots) if e is not None]

    def try_reserve(self) -> int | None:
        """Lowest free slot index, or None when the bank is full.

        The slot stays free until :meth:`commit` fills it.
        """
        for i, e in enumerate(self.slots):
            if e is None and i not in self._pending:
                return i
        return None

    def reserve(self, index: int, x0, cond, omega=None, start=None):
        """Remember the origin of a fresh trajectory for its first commit."""
        if self.slots[index] is not None:
            raise ValueError(f"slot {index} is occupied")
        self._pending[index] = (np.array(x0), np.array(cond),
                                None if omega is None else np.array(omega),
                                None if start is None else np.array(start))

    def sample(self, rng: np.random.Generator) -> tuple[int, BankEntry]:
        """Uniform draw over occupied slots; returns a copy of the entry."""
        occ = self.occupied
        if not occ:
            raise LookupError("cannot sample from an empty trajectory bank")
        i = occ[int(rng.integers(len(occ)))]
        return i, self.slots[i].copy()

    def commit(self, index: int, new_state, new_t: int) -> None:
        """Store the advanced state; a slot that reaches t = 0 is freed."""
        if not 0 <= index < self.capacity:
            raise IndexError(f"slot {index} outside bank of size {self.capacity}")
        entry = self.slots[index]
        if entry is None:
            if index not in self._pending:
                raise ValueError(f"slot {index} is neither occupied nor reserved")
            x0, cond, omega, start = self._pending.pop(index)
            if new_t == 0:
                return
            self.slots[index] = BankEntry(x0, np.array(new_state), cond, int(new_t), omega, start)
            return
        if new_t >= entry.t:
            raise ValueError(f"slot {index}: timestep must decrease ({entry.t} -> {new_t})")
        if new_t == 0:
            self.slots[index] = None
        else:
            self.slots[index] = replace(entry, state=np.array(new_state), t=int(new_t))

    def to_csv(self, path) -> None:
        """Dump slot contents: one row per stored trajectory."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            d = None
            for i in self.occupied:
                e = self.slots[i]
                if d is None:
                    d = e.state.shape[1]
                    w.writerow(["slot", "t", "cond"] + [f"x_{j + 1}" for j in range(d)])
                for c, row in zip(e.cond, e.state):
                    w.writerow([i, e.t, int(c)] + [repr(float(v)) for v in row])
            if d is None:
                w.writerow(["slot", "t", "cond"])
