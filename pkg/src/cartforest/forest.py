"""Feature-subset schedules, height-k trees, forests, trimming, tree files.

Random streams are keyed by integer tuples passed to numpy's default_rng:
  subsample a          -> (seed, 0, a)
  schedule (a, t)      -> (seed, 1, a, t)
  tree (a, t)          -> (seed, 2, a, t), node (l, s) appends (l, s)
so every tree is reproducible on its own, whatever the worker count.
"""
from __future__ import annotations

import itertools
import json
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .cart import binary_split_indices, cart_split_indices
from .data import Dataset
from .geometry import Cell, Split, split_cell
from .population import SearchConfig, cell_probability, conditional_mean, theoretical_cart_split

TREE_FORMAT_VERSION = 1


def _key(seed):
    return list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]


def subset_size(p: int, gamma0: float) -> int:
    return max(1, math.ceil(gamma0 * p - 1e-9))


@dataclass(frozen=True)
class ThetaSchedule:
    """subsets[l][s] is the feature set for node s at depth l (l = 0..k-1)."""
    k: int
    p: int
    subsets: tuple

    def __post_init__(self):
        if len(self.subsets) != self.k:
            raise ValueError("schedule needs one level per split depth")
        for l, level in enumerate(self.subsets):
            if len(level) != 2 ** l:
                raise ValueError(f"level {l} needs {2 ** l} subsets")
        object.__setattr__(self, "subsets",
                           tuple(tuple(tuple(sorted(int(j) for j in s)) for s in lv)
                                 for lv in self.subsets))

    def truncate(self, k: int) -> "ThetaSchedule":
        return ThetaSchedule(k, self.p, self.subsets[:k])

    def to_list(self):
        return [[list(s) for s in lv] for lv in self.subsets]


def draw_theta_schedule(p: int, gamma0: float, k: int, seed, pool=None) -> ThetaSchedule:
    """Independent uniform subsets of size ceil(gamma0 p) drawn from `pool`."""
    pool = np.arange(p) if pool is None else np.asarray(sorted(pool))
    size = min(subset_size(p, gamma0), len(pool))
    if size < 1:
        raise ValueError("empty feature pool")
    rng = np.random.default_rng(_key(seed))
    levels = []
    for l in range(k):
        levels.append(tuple(tuple(rng.choice(pool, size, replace=False)) for _ in range(2 ** l)))
    return ThetaSchedule(k, p, tuple(levels))


def enumerate_schedules(p: int, gamma0: float, k: int, pool=None):
    """Every schedule; there are C(|pool|, size)^(2^k - 1) of them."""
    pool = list(range(p)) if pool is None else sorted(pool)
    size = min(subset_size(p, gamma0), len(pool))
    combos = list(itertools.combinations(pool, size))
    for pick in itertools.product(combos, repeat=2 ** k - 1):
        levels, pos = [], 0
        for l in range(k):
            levels.append(pick[pos:pos + 2 ** l])
            pos += 2 ** l
        yield ThetaSchedule(k, p, tuple(levels))


@dataclass(frozen=True, eq=False)
class Tree:
    k: int
    p: int
    cells: tuple       # cells[l][s], l = 0..k
    splits: tuple      # splits[l][s], l = 0..k-1
    schedule: ThetaSchedule
    flags: tuple = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flags is None:
            object.__setattr__(self, "flags", tuple(("",) * 2 ** l for l in range(self.k)))
        feat = [np.array([s.j for s in lv], dtype=np.int64) for lv in self.splits]
        thr = [np.array([s.c for s in lv], dtype=float) for lv in self.splits]
        object.__setattr__(self, "_feat", feat)
        object.__setattr__(self, "_thr", thr)

    def __eq__(self, other):
        return (isinstance(other, Tree) and self.k == other.k and self.p == other.p
                and self.cells == other.cells and self.splits == other.splits
                and self.schedule == other.schedule and self.flags == other.flags
                and self.provenance == other.provenance)

    __hash__ = None

    @property
    def leaves(self) -> tuple:
        return self.cells[self.k]

    def leaf_index(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for l in range(self.k):
            j = self._feat[l][node]
            node = 2 * node + (X[rows, j] >= self._thr[l][node])
        return node

    def truncate(self, k: int) -> "Tree":
        return Tree(k, self.p, self.cells[:k + 1], self.splits[:k],
                    self.schedule.truncate(k), self.flags[:k], dict(self.provenance))


def _splitter(kind, data, model, search):
    if callable(kind):
        return kind
    if kind == "cart":
        return lambda cell, idx, feats, rng: cart_split_indices(data, idx, cell, feats, rng)
    if kind == "binary":
        return lambda cell, idx, feats, rng: binary_split_indices(data, idx, cell, feats, rng)
    if kind == "theoretical":
        if model is None:
            raise ValueError("theoretical splitter needs a model")
        return lambda cell, idx, feats, rng: theoretical_cart_split(model, cell, feats, search)
    raise ValueError(f"unknown splitter {kind!r}")


def _flag(decision):
    if getattr(decision, "trivial", False):
        return "trivial"
    return "degenerate" if decision.degenerate else ""


def grow_tree(data: Dataset, subsample, schedule: ThetaSchedule, splitter="cart", seed=0,
              model=None, search: SearchConfig = SearchConfig(), provenance=None) -> Tree:
    """Grow a complete tree of height schedule.k level by level.

    `splitter` is "cart", "binary", "theoretical" or a callable
    (cell, in-cell indices, features, rng) -> decision with `.split`.
    """
    split_fn = _splitter(splitter, data, model, search)
    p = schedule.p
    root = Cell.unit(p)
    if data is not None:
        idx = np.unique(np.asarray(subsample, dtype=np.int64))
        x = data.x
    else:
        idx = np.empty(0, dtype=np.int64)
        x = np.empty((0, p))
    cells, splits, flags = [(root,)], [], []
    members = [idx]
    key = _key(seed)
    for l in range(schedule.k):
        lv_cells, lv_splits, lv_flags, lv_members = [], [], [], []
        for s, cell in enumerate(cells[l]):
            rng = np.random.default_rng(key + [l, s])
            dec = split_fn(cell, members[s], list(schedule.subsets[l][s]), rng)
            left, right = split_cell(cell, dec.split)
            go_left = x[members[s], dec.split.j] < dec.split.c
            lv_cells += [left, right]
            lv_members += [members[s][go_left], members[s][~go_left]]
            lv_splits.append(dec.split)
            lv_flags.append(_flag(dec))
        cells.append(tuple(lv_cells))
        splits.append(tuple(lv_splits))
        flags.append(tuple(lv_flags))
        members = lv_members
    prov = {"splitter": splitter if isinstance(splitter, str) else "custom",
            "seed": key}
    prov.update(provenance or {})
    return Tree(schedule.k, p, tuple(cells), tuple(splits), schedule, tuple(flags), prov)


def leaf_means(tree: Tree, data: Dataset, subsample) -> np.ndarray:
    sub = np.asarray(subsample, dtype=np.int64)
    leaf = tree.leaf_index(data.x[sub])
    size = 2 ** tree.k
    sums = np.bincount(leaf, weights=data.y[sub], minlength=size)
    counts = np.bincount(leaf, minlength=size)
    out = np.zeros(size)
    np.divide(sums, counts, out=out, where=counts > 0)
    return out


def tree_predict(tree: Tree, data: Dataset, subsample, points) -> np.ndarray:
    """Mean response of the subsample points sharing the leaf; 0 for empty leaves."""
    return leaf_means(tree, data, subsample)[tree.leaf_index(points)]


def population_means(model, tree: Tree) -> np.ndarray:
    return np.array([conditional_mean(model, c) for c in tree.leaves])


def population_tree_estimate(model, tree: Tree, points) -> np.ndarray:
    return population_means(model, tree)[tree.leaf_index(points)]


# ---- forests ---------------------------------------------------------------

@dataclass(frozen=True)
class ForestConfig:
    k: int
    gamma0: float = 1.0
    b: float = 1.0
    B: int = 1
    M: int = 1
    seed: int = 0
    splitter: str = "cart"
    exclude: tuple = ()

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not 0 < self.gamma0 <= 1:
            raise ValueError("gamma0 must lie in (0, 1]")
        if not 0 < self.b <= 1:
            raise ValueError("b must lie in (0, 1]")
        if self.B < 1 or self.M < 1:
            raise ValueError("B and M must be >= 1")
        object.__setattr__(self, "exclude", tuple(sorted(int(j) for j in self.exclude)))

    def pool(self, p: int):
        return [j for j in range(p) if j not in self.exclude]


def draw_subsamples(n: int, b: float, B: int, seed: int) -> list:
    size = math.ceil(b * n - 1e-9)
    out = []
    for a in range(B):
        rng = np.random.default_rng([seed, 0, a])
        out.append(np.sort(rng.choice(n, size, replace=False)))
    return out


@dataclass(frozen=True, eq=False)
class Forest:
    config: ForestConfig
    data: Dataset
    subsamples: list
    trees: list          # trees[a][t]

    def tree_predictions(self, points) -> np.ndarray:
        """Array of shape (B, M, n_points)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((self.config.B, self.config.M, points.shape[0]))
        for a, row in enumerate(self.trees):
            for t, tree in enumerate(row):
                out[a, t] = tree_predict(tree, self.data, self.subsamples[a], points)
        return out

    def predict(self, points) -> np.ndarray:
        return self.tree_predictions(points).mean(axis=1).mean(axis=0)


_JOB = None


def _grow_task(at):
    data, config, subs, model, search = _JOB
    return _grow_one(data, config, subs, model, search, *at)


def _grow_one(data, config, subs, model, search, a, t):
    sched = draw_theta_schedule(data.p, config.gamma0, config.k, (config.seed, 1, a, t),
                                pool=config.pool(data.p))
    return grow_tree(data, subs[a], sched, config.splitter, (config.seed, 2, a, t),
                     model=model, search=search, provenance={"subsample": a, "schedule": t})


def _run_tasks(fn, tasks, job, workers):
    global _JOB
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*job, *at) for at in tasks]
    _JOB = job
    try:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            chunk = max(1, len(tasks) // (4 * workers))
            return list(ex.map(_grow_task, tasks, chunksize=chunk))
    finally:
        _JOB = None


def fit_forest(config: ForestConfig, data: Dataset, model=None, workers: int = 1,
               search: SearchConfig = SearchConfig()) -> Forest:
    subs = draw_subsamples(data.n, config.b, config.B, config.seed)
    tasks = [(a, t) for a in range(config.B) for t in range(config.M)]
    flat = _run_tasks(_grow_one, tasks, (data, config, subs, model, search), workers)
    trees = [flat[a * config.M:(a + 1) * config.M] for a in range(config.B)]
    return Forest(config, data, subs, trees)


def forest_predict(config: ForestConfig, data: Dataset, points, model=None, workers: int = 1):
    return fit_forest(config, data, model, workers).predict(points)


def exact_theta_forest_predict(config: ForestConfig, data: Dataset, points, model=None):
    """Average over every schedule instead of M random draws (tiny p and k only)."""
    subs = draw_subsamples(data.n, config.b, config.B, config.seed)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    total = np.zeros(points.shape[0])
    for a in range(config.B):
        preds = []
        for t, sched in enumerate(enumerate_schedules(data.p, config.gamma0, config.k,
                                                      config.pool(data.p))):
            tree = grow_tree(data, subs[a], sched, config.splitter, (config.seed, 3, a, t),
                             model=model)
            preds.append(tree_predict(tree, data, subs[a], points))
        total += np.mean(preds, axis=0)
    return total / config.B


# ---- trimming ----------------------------------------------------------------

def trim_to_semi_sample(tree: Tree, model, zeta: float, schedule: ThetaSchedule = None,
                        search: SearchConfig = SearchConfig()) -> Tree:
    """Regrow, by theoretical CART, everything below the first cell of each
    branch whose probability falls under zeta; other nodes are kept as is."""
    if not 0 <= zeta <= 1:
        raise ValueError("zeta must lie in [0, 1]")
    schedule = schedule or tree.schedule
    cells = [tree.cells[0]]
    splits, flags = [], []
    regrown = [False]
    for l in range(tree.k):
        lv_cells, lv_splits, lv_flags, lv_regrown = [], [], [], []
        for s, cell in enumerate(cells[l]):
            redo = regrown[s] or cell_probability(model, cell) < zeta
            if redo:
                split = theoretical_cart_split(model, cell, schedule.subsets[l][s], search).split
                flag = "trimmed"
            else:
                split, flag = tree.splits[l][s], tree.flags[l][s]
            left, right = split_cell(cell, split)
            lv_cells += [left, right]
            lv_splits.append(split)
            lv_flags.append(flag)
            lv_regrown += [redo, redo]
        cells.append(tuple(lv_cells))
        splits.append(tuple(lv_splits))
        flags.append(tuple(lv_flags))
        regrown = lv_regrown
    prov = dict(tree.provenance, trimmed_zeta=zeta)
    return Tree(tree.k, tree.p, tuple(cells), tuple(splits), schedule, tuple(flags), prov)


# ---- serialization -------------------------------------------------------------

class TreeFormatError(ValueError):
    pass


class TreeVersionError(TreeFormatError):
    pass


def serialize_tree(tree: Tree) -> bytes:
    nodes = []

    def visit(l, s):
        c = tree.cells[l][s]
        node = {"level": l, "index": s, "lo": list(c.lo), "hi": list(c.hi),
                "closed": list(c.closed), "split": None}
        if l < tree.k:
            sp = tree.splits[l][s]
            node["split"] = {"j": sp.j, "c": sp.c}
            node["flag"] = tree.flags[l][s]
        nodes.append(node)
        if l < tree.k:
            visit(l + 1, 2 * s)
            visit(l + 1, 2 * s + 1)

    visit(0, 0)
    doc = {"version": TREE_FORMAT_VERSION, "artifact_version": __version__,
           "k": tree.k, "p": tree.p, "schedule": tree.schedule.to_list(),
           "nodes": nodes, "provenance": tree.provenance}
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def deserialize_tree(payload) -> Tree:
    if isinstance(payload, (bytes, bytearray)):
        payload = payload.decode("utf-8")
    try:
        doc = json.loads(payload)
    except json.JSONDecodeError as e:
        raise TreeFormatError(f"malformed tree payload: {e}") from None
    if not isinstance(doc, dict):
        raise TreeFormatError("tree payload must be an object")
    if doc.get("version") != TREE_FORMAT_VERSION:
        raise TreeVersionError(
            f"tree format version {doc.get('version')!r} is not {TREE_FORMAT_VERSION}")
    try:
        k, p = int(doc["k"]), int(doc["p"])
        schedule = ThetaSchedule(k, p, tuple(tuple(tuple(s) for s in lv) for lv in doc["schedule"]))
        nodes = doc["nodes"]
        if len(nodes) != 2 ** (k + 1) - 1:
            raise TreeFormatError(f"expected {2 ** (k + 1) - 1} nodes, got {len(nodes)}")
        cells = [[None] * 2 ** l for l in range(k + 1)]
        splits = [[None] * 2 ** l for l in range(k)]
        flags = [[""] * 2 ** l for l in range(k)]
        for nd in nodes:
            l, s = int(nd["level"]), int(nd["index"])
            cells[l][s] = Cell(nd["lo"], nd["hi"], nd["closed"])
            if l < k:
                splits[l][s] = Split(int(nd["split"]["j"]), float(nd["split"]["c"]))
                flags[l][s] = nd.get("flag", "")
            elif nd["split"] is not None:
                raise TreeFormatError("leaf node carries a split")
        for l in range(k):
            for s in range(2 ** l):
                kids = split_cell(cells[l][s], splits[l][s])
                if kids != (cells[l + 1][2 * s], cells[l + 1][2 * s + 1]):
                    raise TreeFormatError(f"node ({l}, {s}) does not match its daughters")
    except TreeFormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise TreeFormatError(f"malformed tree payload: {e}") from None
    return Tree(k, p, tuple(tuple(lv) for lv in cells), tuple(tuple(lv) for lv in splits),
                schedule, tuple(tuple(lv) for lv in flags), doc.get("provenance", {}))
