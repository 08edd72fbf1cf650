"""Axis-aligned cells in the unit cube, splits, and grid snapping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class InvalidSplitError(ValueError):
    pass


@dataclass(frozen=True)
class Split:
    """Split along feature `j` (0-based) at threshold `c`."""
    j: int
    c: float


@dataclass(frozen=True)
class Cell:
    """Box of per-feature intervals.

    Interval j is [lo_j, hi_j) when `closed[j]` is False and [lo_j, hi_j]
    otherwise. By default an interval is closed exactly when hi_j == 1, so the
    root and every right-most descendant keep the face x_j = 1. A left daughter
    cut at c = 1 is the half-open [lo, 1), which is what a split at 1 of a
    {0, 1}-valued feature needs.
    """
    lo: tuple
    hi: tuple
    closed: tuple = field(default=None)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi):
            raise ValueError("lo and hi must have the same length")
        for a, b in zip(lo, hi):
            if not (0.0 <= a <= b <= 1.0):
                raise ValueError(f"bad interval [{a}, {b}]")
        closed = self.closed
        if closed is None:
            closed = tuple(b == 1.0 for b in hi)
        else:
            closed = tuple(bool(v) for v in closed)
            if len(closed) != len(lo):
                raise ValueError("closed flags must match dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "closed", closed)

    @classmethod
    def unit(cls, p: int) -> "Cell":
        return cls((0.0,) * p, (1.0,) * p)

    @property
    def p(self) -> int:
        return len(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b in zip(self.lo, self.hi)]))

    @property
    def is_empty(self) -> bool:
        """True when the cell holds no point at all."""
        return any(a == b and not c for a, b, c in zip(self.lo, self.hi, self.closed))

    def interval(self, j: int) -> tuple:
        return self.lo[j], self.hi[j], self.closed[j]

    def contains(self, X) -> np.ndarray:
        """Vectorized membership for an (n, p) array."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.p:
            raise ValueError(f"point dimension {X.shape[1]} != cell dimension {self.p}")
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        closed = np.asarray(self.closed)
        upper = (X < hi) | (closed & (X == hi))
        return np.all((X >= lo) & upper, axis=1)

    def replace(self, j: int, lo=None, hi=None, closed=None) -> "Cell":
        los, his, cls_ = list(self.lo), list(self.hi), list(self.closed)
        if lo is not None:
            los[j] = lo
        if hi is not None:
            his[j] = hi
        if closed is not None:
            cls_[j] = closed
        return Cell(tuple(los), tuple(his), tuple(cls_))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "closed": list(self.closed)}


def split_cell(parent: Cell, split: Split) -> tuple:
    """Return (left, right) = (t ∩ {x_j < c}, t ∩ {x_j >= c})."""
    j, c = split.j, float(split.c)
    if not 0 <= j < parent.p:
        raise InvalidSplitError(f"feature {j} out of range for p={parent.p}")
    lo, hi, closed = parent.interval(j)
    if not (lo <= c <= hi):
        raise InvalidSplitError(f"threshold {c} outside [{lo}, {hi}] on feature {j}")
    if c == hi and not closed and hi > lo:
        raise InvalidSplitError(f"threshold {c} outside [{lo}, {hi}) on feature {j}")
    left = parent.replace(j, hi=c, closed=False)
    right = parent.replace(j, lo=c)
    return left, right


def cell_contains(cell: Cell, point) -> bool:
    point = np.asarray(point, dtype=float)
    if point.ndim != 1 or point.shape[0] != cell.p:
        raise ValueError(f"point dimension {point.shape} != cell dimension {cell.p}")
    return bool(cell.contains(point[None, :])[0])


@dataclass(frozen=True)
class GridConfig:
    """Lattice {i/G : 0 <= i <= G} on every axis; half-way ties round up."""
    G: int

    def __post_init__(self):
        if int(self.G) < 1:
            raise ValueError("G must be a positive integer")

    def snap(self, v: float) -> float:
        x = v * self.G
        i = math.floor(x)
        # tolerance absorbs representation error, e.g. 0.15 * 10
        if x - i >= 0.5 - 1e-9:
            i += 1
        return min(i, self.G) / self.G


def snap_to_grid(cell: Cell, grid: GridConfig) -> Cell:
    lo = tuple(grid.snap(a) for a in cell.lo)
    hi = tuple(grid.snap(b) for b in cell.hi)
    return Cell(lo, hi, cell.closed)
