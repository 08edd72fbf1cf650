"""Datasets: synthetic draws y = m(x) + eps, and CSV ingestion."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import (REGISTRY, RegressionModel, UnknownModelError, eval_model,
                     make_model, user_model, with_noise)

__all__ = ["DataFormatError", "Dataset", "generate_sample", "load_csv", "write_csv",
           "REGISTRY", "RegressionModel", "UnknownModelError", "eval_model", "make_model",
           "user_model", "with_noise"]


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """n observations with features in [0,1]^p; arrays are read-only."""
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float, copy=True)
        y = np.array(self.y, dtype=float, copy=True).reshape(-1)
        if x.ndim != 2:
            raise ValueError("x must be a 2-d array")
        if x.shape[0] < 1:
            raise ValueError("no observations")
        if x.shape[0] != y.shape[0]:
            raise ValueError("x and y lengths differ")
        if np.any(~np.isfinite(x)) or np.any(x < 0) or np.any(x > 1):
            raise ValueError("features must lie in [0, 1]")
        if np.any(~np.isfinite(y)):
            raise ValueError("responses must be finite")
        order = np.argsort(x, axis=0, kind="stable").T.copy()
        for a in (x, y, order):
            a.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sorted_index", order)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


def generate_sample(model: RegressionModel, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x = model.sample_features(rng, n)
    y = model.evaluate(x)
    if model.noise > 0:
        y = y + rng.uniform(-model.noise, model.noise, size=n)
    return Dataset(x, y)


def load_csv(path) -> Dataset:
    """Read a file with header x1,...,xp,y."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataFormatError("no observations")
    _, header = rows[0]
    header = [h.strip() for h in header]
    p = len(header) - 1
    if p < 1 or header != [f"x{j}" for j in range(1, p + 1)] + ["y"]:
        raise DataFormatError("line 1: header must be x1,...,xp,y")
    if len(rows) == 1:
        raise DataFormatError("no observations")
    x = np.empty((len(rows) - 1, p))
    y = np.empty(len(rows) - 1)
    for k, (line, r) in enumerate(rows[1:]):
        if len(r) != p + 1:
            raise DataFormatError(f"line {line}: expected {p + 1} fields, got {len(r)}")
        try:
            vals = [float(c) for c in r]
        except ValueError as e:
            raise DataFormatError(f"line {line}: {e}") from None
        bad = [j for j in range(p) if not 0.0 <= vals[j] <= 1.0]
        if bad:
            raise DataFormatError(
                f"line {line} (row {k + 1}): feature x{bad[0] + 1}={vals[bad[0]]} outside [0, 1]")
        x[k] = vals[:p]
        y[k] = vals[p]
    return Dataset(x, y)


def write_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(1, data.p + 1)] + ["y"])
        for xi, yi in zip(data.x, data.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])
