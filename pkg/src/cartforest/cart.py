"""Sample CART splits, the binary-feature variant, and a brute-force oracle."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .geometry import Cell, Split

ORACLE_GUARD = 100_000


class CandidateGuardError(RuntimeError):
    pass


@dataclass(frozen=True)
class SplitDecision:
    split: Split
    objective: float
    degenerate: bool = False
    n_candidates: int = 0
    minimizers: tuple = ()
    trivial: bool = False


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sse(v: np.ndarray) -> float:
    """Sum of squared deviations from the mean, exactly-rounded sums.

    fsum makes the value independent of element order, so any two code paths
    that produce the same partition get the same bits.
    """
    if v.size == 0:
        return 0.0
    mu = math.fsum(v) / v.size
    return math.fsum((v - mu) ** 2)


def partition_objective(y_left: np.ndarray, y_right: np.ndarray) -> float:
    return sse(y_left) + sse(y_right)


def in_cell(data: Dataset, subsample, cell: Cell) -> np.ndarray:
    sub = np.unique(np.asarray(subsample, dtype=np.int64))
    if sub.size == 0:
        return sub
    return sub[cell.contains(data.x[sub])]


def _check_inputs(data, subsample, features):
    features = sorted(set(int(j) for j in features))
    if not features:
        raise ValueError("feature set is empty")
    if any(not 0 <= j < data.p for j in features):
        raise ValueError(f"feature index out of range for p={data.p}")
    if len(np.asarray(subsample)) == 0:
        raise ValueError("subsample is empty")
    return features


def random_split(cell: Cell, features, rng) -> Split:
    """Direction uniform over `features`, threshold uniform on the open interval."""
    j = int(features[rng.integers(len(features))])
    lo, hi, _ = cell.interval(j)
    if hi <= lo:
        return Split(j, lo)
    c = lo
    while not lo < c < hi:
        c = rng.uniform(lo, hi)
    return Split(j, float(c))


def _degenerate(data, idx, cell, features, rng, n_candidates):
    s = random_split(cell, features, rng)
    v = data.x[idx, s.j]
    obj = partition_objective(data.y[idx[v < s.c]], data.y[idx[v >= s.c]])
    return SplitDecision(s, obj, degenerate=True, n_candidates=n_candidates)


def cart_split_indices(data: Dataset, idx: np.ndarray, cell: Cell, features, rng) -> SplitDecision:
    """CART split for the in-cell index set `idx` (sorted scan with prefix sums)."""
    m = idx.size
    if m <= 1:
        return _degenerate(data, idx, cell, features, rng, 0)
    y = data.y[idx]
    yc = y - y.mean()
    T1, T2 = yc.sum(), (yc * yc).sum()
    scans = []
    n_cand = 0
    best = math.inf
    for j in features:
        lo, hi, _ = cell.interval(j)
        v = data.x[idx, j]
        order = np.argsort(v, kind="stable")
        vs, ys = v[order], yc[order]
        s1 = np.concatenate([[0.0], np.cumsum(ys)])
        s2 = np.concatenate([[0.0], np.cumsum(ys * ys)])
        first = np.flatnonzero(np.concatenate([[True], vs[1:] != vs[:-1]]))
        c = vs[first]
        ok = (c > lo) & (c < hi)
        first, c = first[ok], c[ok]
        if first.size == 0:
            continue
        n_cand += first.size
        nl = first.astype(float)
        nr = m - nl
        with np.errstate(invalid="ignore", divide="ignore"):
            left = np.where(nl > 0, s2[first] - s1[first] ** 2 / nl, 0.0)
            right = (T2 - s2[first]) - (T1 - s1[first]) ** 2 / nr
        obj = left + right
        best = min(best, obj.min())
        scans.append((j, order, first, c, obj))
    if n_cand == 0:
        return _degenerate(data, idx, cell, features, rng, 0)
    # shortlist generously, then rescore with the canonical objective
    tol = 1e-9 * T2 + 1e-300
    scored = []
    for j, order, first, c, obj in scans:
        for i in np.flatnonzero(obj <= best + tol):
            cut = first[i]
            val = partition_objective(y[order[:cut]], y[order[cut:]])
            scored.append((val, j, float(c[i])))
    low = min(s[0] for s in scored)
    mins = tuple(Split(j, c) for val, j, c in scored if val == low)
    choice = mins[rng.integers(len(mins))] if len(mins) > 1 else mins[0]
    return SplitDecision(choice, low, False, n_cand, mins)


def sample_cart_split(data: Dataset, subsample, cell: Cell, features, seed) -> SplitDecision:
    features = _check_inputs(data, subsample, features)
    idx = in_cell(data, subsample, cell)
    return cart_split_indices(data, idx, cell, features, as_rng(seed))


def brute_force_split_oracle(data: Dataset, subsample, cell: Cell, features, seed=0) -> SplitDecision:
    """Naive double loop over every (feature, in-cell value) pair; test oracle."""
    features = _check_inputs(data, subsample, features)
    rng = as_rng(seed)
    members = []
    for i in sorted(set(int(i) for i in subsample)):
        if cell.contains(data.x[i])[0]:
            members.append(i)
    total = 0
    for j in features:
        total += len({data.x[i, j] for i in members})
    if total > ORACLE_GUARD:
        raise CandidateGuardError(f"{total} candidates exceed the oracle guard {ORACLE_GUARD}")
    idx = np.array(members, dtype=np.int64)
    if len(members) <= 1:
        return _degenerate(data, idx, cell, features, rng, 0)
    results = []
    for j in features:
        lo, hi, _ = cell.interval(j)
        for c in sorted({data.x[i, j] for i in members}):
            if not lo < c < hi:
                continue
            left, right = [], []
            for i in members:
                if data.x[i, j] < c:
                    left.append(data.y[i])
                else:
                    right.append(data.y[i])
            obj = partition_objective(np.array(left), np.array(right))
            results.append((obj, j, float(c)))
    if not results:
        return _degenerate(data, idx, cell, features, rng, 0)
    low = min(r[0] for r in results)
    mins = tuple(Split(j, c) for obj, j, c in results if obj == low)
    choice = mins[rng.integers(len(mins))] if len(mins) > 1 else mins[0]
    return SplitDecision(choice, low, False, len(results), mins)


def binary_available(cell: Cell, j: int) -> bool:
    """Feature j still separates 0 from 1 inside the cell."""
    lo, hi, closed = cell.interval(j)
    return lo == 0.0 and hi == 1.0 and closed


def _bernoulli_empty(cell: Cell) -> bool:
    for lo, hi, closed in zip(cell.lo, cell.hi, cell.closed):
        if not any(lo <= v < hi or (closed and v == hi) for v in (0.0, 1.0)):
            return True
    return False


def trivial_split(cell: Cell, j: int) -> Split:
    """Split at the lower end: daughters are (empty, parent)."""
    return Split(j, cell.lo[j])


def binary_split_indices(data: Dataset, idx: np.ndarray, cell: Cell, features, rng) -> SplitDecision:
    v = data.x[idx][:, features] if idx.size else np.empty((0, len(features)))
    if np.any((v != 0) & (v != 1)):
        raise ValueError("binary CART requires feature values in {0, 1}")
    avail = [] if _bernoulli_empty(cell) else [j for j in features if binary_available(cell, j)]
    if not avail:
        return SplitDecision(trivial_split(cell, features[0]), 0.0, trivial=True)
    y = data.y[idx]
    scored = []
    for j in avail:
        ones = data.x[idx, j] >= 1.0
        scored.append((partition_objective(y[~ones], y[ones]), j))
    low = min(s[0] for s in scored)
    mins = tuple(Split(j, 1.0) for val, j in scored if val == low)
    choice = mins[rng.integers(len(mins))] if len(mins) > 1 else mins[0]
    return SplitDecision(choice, low, False, len(avail), mins)


def binary_cart_split(data: Dataset, subsample, cell: Cell, features, seed) -> SplitDecision:
    features = _check_inputs(data, subsample, features)
    idx = in_cell(data, subsample, cell)
    return binary_split_indices(data, idx, cell, features, as_rng(seed))


def split_objective(data: Dataset, subsample, cell: Cell, split: Split) -> float:
    idx = in_cell(data, subsample, cell)
    v = data.x[idx, split.j]
    return partition_objective(data.y[idx[v < split.c]], data.y[idx[v >= split.c]])


def sample_impurity_decrease(data: Dataset, subsample, cell: Cell, split: Split) -> float:
    """sum_d (N_d / N)(ybar_d - ybar)^2 over the two daughters, 0/0 = 0."""
    idx = in_cell(data, subsample, cell)
    N = idx.size
    if N == 0:
        return 0.0
    y = data.y[idx]
    ybar = math.fsum(y) / N
    left = data.x[idx, split.j] < split.c
    total = 0.0
    for part in (y[left], y[~left]):
        if part.size:
            total += part.size / N * (math.fsum(part) / part.size - ybar) ** 2
    return total
