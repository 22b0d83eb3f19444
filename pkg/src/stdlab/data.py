"""Mixture datasets on disk: CSV with a ``label`` column then ``x_1..x_d``."""

from __future__ import annotations

import csv

import numpy as np

from .models import GmmSpec, gmm_sample


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_dataset(path, x0: np.ndarray, labels: np.ndarray):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    dim = x0.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"x_{k + 1}" for k in range(dim))])
        for lab, row in zip(labels, x0):
            w.writerow([int(lab), *(_fmt(v) for v in row)])


def gen_data(spec: GmmSpec, n: int, seed: int, out_path):
    """Sample ``n`` labelled points with a seeded generator and write them as CSV."""
    if n < 0:
        raise ValueError("n must be >= 0")
    x0, labels = gmm_sample(spec, n, np.random.default_rng(seed))
    write_dataset(out_path, x0.reshape(n, spec.dim), labels)
    return x0, labels


def read_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_dataset`; returns ``(x0, labels)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["label"]:
        raise ValueError(f"{path}: expected a header starting with 'label'")
    dim = len(rows[0]) - 1
    body = rows[1:]
    labels = np.array([int(r[0]) for r in body], dtype=np.int64)
    x0 = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), dim)
    return x0, labels
