"""Population quantities for a known regression model.

Conditional moments over a cell use per-coordinate quadrature rules that are
exact for piecewise polynomials (split at the model's breakpoints) and the
counting measure for {0,1} features. Additive models reduce to univariate
integrals, other models tensorize over the active coordinates only.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize_scalar

from .geometry import Cell, Split, split_cell
from .models import BERNOULLI, RegressionModel, gauss_legendre

# values this small relative to the scale of m are rounding residue
_FLOOR = 1e-20
_CHUNK = 1 << 21


@dataclass(frozen=True)
class Moments:
    prob: float
    mean: float
    var: float

    @property
    def empty(self) -> bool:
        return self.prob == 0.0


def cell_probability(model: RegressionModel, cell: Cell) -> float:
    return float(np.prod([model.interval_probability(*cell.interval(j)) for j in range(cell.p)]))


def _tensor(rules):
    xs = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    ws = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    pts = np.stack([x.reshape(-1) for x in xs], axis=1) if rules else np.zeros((1, 0))
    w = np.prod(np.stack([x.reshape(-1) for x in ws]), axis=0) if rules else np.ones(1)
    return pts, w


def moments(model: RegressionModel, cell: Cell) -> Moments:
    """P(X in t), E(m | t) and Var(m | t); a null cell gets mean 0 and var 0."""
    if cell.p != model.p:
        raise ValueError("cell dimension does not match the model")
    prob = cell_probability(model, cell)
    if prob == 0.0:
        return Moments(0.0, 0.0, 0.0)
    rules = [model.rule(a, *cell.interval(j)) for a, j in enumerate(model.active)]
    if model.additive:
        mean, var = model.intercept, 0.0
        for comp, (x, w, _) in zip(model.components, rules):
            v = np.asarray(comp(x), dtype=float)
            mu = float(w @ v)
            mean += mu
            var += float(w @ (v - mu) ** 2)
    else:
        pts, w = _tensor(rules)
        v = model.f_active(pts)
        mean = float(w @ v)
        var = float(w @ (v - mean) ** 2)
    if var <= _FLOOR * max(1.0, mean * mean):
        var = 0.0
    return Moments(prob, mean, var)


def conditional_mean(model: RegressionModel, cell: Cell) -> float:
    return moments(model, cell).mean


def conditional_variance(model: RegressionModel, cell: Cell) -> float:
    return moments(model, cell).var


@dataclass(frozen=True)
class ImpurityReport:
    var: float
    remaining: float       # (I)
    decrease: float        # (II)
    p_left: float
    p_right: float
    null_cell: bool = False


def impurity_decrease_II(model: RegressionModel, cell: Cell, split: Split) -> ImpurityReport:
    parent = moments(model, cell)
    if parent.empty:
        return ImpurityReport(0.0, 0.0, 0.0, 0.0, 0.0, null_cell=True)
    rem = dec = 0.0
    probs = []
    for d in split_cell(cell, split):
        m = moments(model, d)
        q = m.prob / parent.prob
        probs.append(q)
        if q > 0:
            rem += q * m.var
            dec += q * (m.mean - parent.mean) ** 2
    if dec <= _FLOOR * max(1.0, parent.mean ** 2):
        dec = 0.0
    return ImpurityReport(parent.var, rem, dec, probs[0], probs[1])


# ---- impurity decrease along one coordinate ---------------------------------

def _marginal(model: RegressionModel, cell: Cell, a: int):
    """x -> E(m | X_j = x, X_{-j} in t) for active position a (vectorized)."""
    if model.additive:
        comp = model.components[a]
        return lambda x: np.asarray(comp(x), dtype=float)
    others = [model.rule(b, *cell.interval(j)) for b, j in enumerate(model.active) if b != a]
    pts, w = _tensor(others)
    k = len(w)

    def g(x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.size)
        step = max(1, _CHUNK // k)
        for s in range(0, x.size, step):
            xc = x[s:s + step]
            rows = np.empty((xc.size * k, model.s_star))
            other = np.tile(pts, (xc.size, 1))
            rows[:, :a] = other[:, :a]
            rows[:, a] = np.repeat(xc, k)
            rows[:, a + 1:] = other[:, a:]
            out[s:s + step] = model.f_active(rows).reshape(xc.size, k) @ w
        return out

    return g


def _curve_uniform(model, cell, a, j, cs):
    """(II) of the splits (j, c) for sorted interior thresholds cs."""
    lo, hi, _ = cell.interval(j)
    g = _marginal(model, cell, a)
    cuts = np.unique(np.concatenate([[lo, hi], cs, [b for b in model.breakpoints[a] if lo < b < hi]]))
    t, w = gauss_legendre(model.nodes)
    u, v = cuts[:-1], cuts[1:]
    x = u[:, None] + (v - u)[:, None] * t[None, :]
    seg = (g(x.reshape(-1)).reshape(x.shape) @ w) * (v - u)
    F = np.concatenate([[0.0], np.cumsum(seg)])
    Fc = F[np.searchsorted(cuts, cs)]
    L = hi - lo
    mu = F[-1] / L
    pl = (cs - lo) / L
    ml = Fc / (cs - lo)
    mr = (F[-1] - Fc) / (hi - cs)
    ii = pl * (ml - mu) ** 2 + (1 - pl) * (mr - mu) ** 2
    ii[ii <= _FLOOR * max(1.0, mu * mu)] = 0.0
    return ii


class TheoreticalSplit(NamedTuple):
    split: Split
    ii: float
    degenerate: bool


@dataclass(frozen=True)
class SearchConfig:
    grid: int = 512
    refine: bool = True
    xatol: float = 1e-12


def _candidates(model, cell, a, j, search):
    lo, hi, _ = cell.interval(j)
    grid = lo + (hi - lo) * np.arange(1, search.grid + 1) / (search.grid + 1)
    extra = [(lo + hi) / 2, lo / 4 + 3 * hi / 4] + [b for b in model.breakpoints[a] if lo < b < hi]
    cs = np.unique(np.concatenate([grid, extra]))
    return cs[(cs > lo) & (cs < hi)]


def _best_on_coordinate(model, cell, a, j, search):
    lo, hi, closed = cell.interval(j)
    if model.features == BERNOULLI:
        if not (lo == 0.0 and hi == 1.0 and closed):
            return None
        return 1.0, impurity_decrease_II(model, cell, Split(j, 1.0)).decrease
    if hi <= lo:
        return None
    cs = _candidates(model, cell, a, j, search)
    if cs.size == 0:
        return None
    ii = _curve_uniform(model, cell, a, j, cs)
    i = int(np.argmax(ii))
    c, best = float(cs[i]), float(ii[i])
    if search.refine and best > 0:
        left = cs[i - 1] if i > 0 else lo
        right = cs[i + 1] if i + 1 < cs.size else hi
        res = minimize_scalar(
            lambda z: -_curve_uniform(model, cell, a, j, np.array([z]))[0],
            bounds=(left, right), method="bounded",
            options={"xatol": search.xatol * (hi - lo)})
        if lo < res.x < hi and -res.fun > best:
            c, best = float(res.x), float(-res.fun)
    return c, best


def theoretical_cart_split(model: RegressionModel, cell: Cell, features,
                           search: SearchConfig = SearchConfig()) -> TheoreticalSplit:
    """Approximate argsup of (II) over j in features and c in t_j.

    Coordinates m ignores have (II) = 0 under a product law and are skipped.
    Ties go to the lowest feature index.
    """
    features = sorted(set(int(j) for j in features))
    if not features:
        raise ValueError("feature set is empty")
    pos = {j: a for a, j in enumerate(model.active)}
    results = []
    if moments(model, cell).var > 0:
        for j in features:
            if j in pos:
                r = _best_on_coordinate(model, cell, pos[j], j, search)
                if r is not None and r[1] > 0:
                    results.append((j, r[0], r[1]))
    if not results:
        return TheoreticalSplit(_fallback_split(model, cell, features[0]), 0.0, True)
    top = max(r[2] for r in results)
    j, c, ii = next(r for r in results if r[2] >= top * (1 - 1e-12))
    return TheoreticalSplit(Split(j, c), ii, False)


def _fallback_split(model, cell, j):
    lo, hi, closed = cell.interval(j)
    if model.features == BERNOULLI:
        return Split(j, 1.0) if (lo == 0.0 and hi == 1.0 and closed) else Split(j, lo)
    return Split(j, (lo + hi) / 2)


# ---- SID constant ------------------------------------------------------------

@dataclass
class SidCertificate:
    model_id: str
    claimed_alpha: float
    alpha_hat: float
    budget: int
    worst_cell: Cell
    root_ratio: float
    skipped: int = 0

    def to_dict(self) -> dict:
        def num(v):
            if v is None:
                return None
            return v if math.isfinite(v) else "inf"
        return {
            "model_id": self.model_id,
            "claimed_alpha": num(self.claimed_alpha),
            "alpha_hat": num(self.alpha_hat),
            "alpha_hat_is_lower_bound": True,
            "root_ratio": num(self.root_ratio),
            "budget": self.budget,
            "skipped_constant_cells": self.skipped,
            "worst_cell": self.worst_cell.to_dict() if self.worst_cell else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def random_cell(model: RegressionModel, rng, max_depth: int = 8) -> Cell:
    """Cell reached by a random split sequence of depth uniform on 1..max_depth."""
    cell = Cell.unit(model.p)
    for _ in range(int(rng.integers(1, max_depth + 1))):
        j = int(rng.integers(model.p))
        lo, hi, closed = cell.interval(j)
        if model.features == BERNOULLI:
            if not (lo == 0.0 and hi == 1.0 and closed):
                continue
            c = 1.0
        else:
            c = lo
            while not lo < c < hi:
                c = rng.uniform(lo, hi)
        cell = split_cell(cell, Split(j, c))[int(rng.integers(2))]
    return cell


def sid_ratio(model: RegressionModel, cell: Cell, search=SearchConfig()):
    """Var(m | t) / sup (II), or None when Var is 0."""
    var = moments(model, cell).var
    if var == 0:
        return None
    sup = theoretical_cart_split(model, cell, range(model.p), search).ii
    return math.inf if sup == 0 else var / sup


def estimate_sid_alpha(model: RegressionModel, budget: int = 2000, seed: int = 0,
                       max_depth: int = 8, search=SearchConfig()) -> SidCertificate:
    """Largest Var/sup(II) over the root plus budget-1 random cells (a lower bound on alpha_1)."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    root = Cell.unit(model.p)
    best, worst, skipped = -math.inf, None, 0
    root_ratio = None
    for k in range(budget):
        cell = root if k == 0 else random_cell(model, rng, max_depth)
        r = sid_ratio(model, cell, search)
        if k == 0:
            root_ratio = r
        if r is None:
            skipped += 1
            continue
        if r > best:
            best, worst = r, cell
    if worst is None:
        raise ValueError("model constant on all probed cells")
    return SidCertificate(model.model_id, model.sid_alpha, best, budget, worst,
                          math.nan if root_ratio is None else root_ratio, skipped)


# ---- Condition 5 ---------------------------------------------------------------

@dataclass(frozen=True)
class Condition5Params:
    eps: float = 0.0
    alpha2: float = 1.0
    rtol: float = 1e-9

    def __post_init__(self):
        if self.eps < 0 or self.alpha2 < 1:
            raise ValueError("need eps >= 0 and alpha2 >= 1")


@dataclass
class Condition5Result:
    passed: bool
    violations: list = field(default_factory=list)


def verify_condition5(model: RegressionModel, tree, schedule=None,
                      params: Condition5Params = Condition5Params(),
                      search=SearchConfig()) -> Condition5Result:
    """Check both items of the condition at every internal node.

    A violation is reported as (level, index, item, chosen (II), sup (II)),
    where the node at depth `level` heads every branch through it.
    """
    schedule = schedule or tree.schedule
    if schedule.k != tree.k:
        raise ValueError("tree height does not match the schedule")
    out = []
    for lvl in range(tree.k):
        for s in range(2 ** lvl):
            cell = tree.cells[lvl][s]
            chosen = impurity_decrease_II(model, cell, tree.splits[lvl][s]).decrease
            sup = theoretical_cart_split(model, cell, schedule.subsets[lvl][s], search).ii
            slack = 1 + params.rtol
            if chosen <= params.eps:
                if sup > params.alpha2 * params.eps * slack:
                    out.append((lvl, s, 1, chosen, sup))
            elif sup > params.alpha2 * chosen * slack:
                out.append((lvl, s, 2, chosen, sup))
    return Condition5Result(not out, out)


# ---- relevance -----------------------------------------------------------------

class Relevance(NamedTuple):
    iota: float
    se: float


def relevance_iota(model: RegressionModel, j: int, mc_budget: int = 4096, seed: int = 0) -> Relevance:
    """E[Var(m(X) | X_s, s != j)]; exact for additive models."""
    if not 0 <= j < model.p:
        raise ValueError(f"feature {j} out of range")
    if j not in model.active:
        return Relevance(0.0, 0.0)
    a = model.active.index(j)
    x, w, _ = model.rule(a, 0.0, 1.0, True)
    if model.additive:
        v = np.asarray(model.components[a](x), dtype=float)
        mu = w @ v
        return Relevance(float(w @ (v - mu) ** 2), 0.0)
    rng = np.random.default_rng(seed)
    Xa = model.sample_features(rng, mc_budget)[:, list(model.active)]
    rows = np.repeat(Xa, x.size, axis=0)
    rows[:, a] = np.tile(x, mc_budget)
    v = model.f_active(rows).reshape(mc_budget, x.size)
    mu = v @ w
    inner = ((v - mu[:, None]) ** 2) @ w
    return Relevance(float(inner.mean()), float(inner.std(ddof=1) / math.sqrt(mc_budget)))
