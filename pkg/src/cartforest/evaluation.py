"""Bias/variance decomposition of forests and checks of the theoretical bounds.

Squared bias and estimation variance are computed per tree as exact sums over
its leaves, E(m - m*_T)^2 = sum_t P(t) Var(m | t) and
E(m*_T - mhat_T)^2 = sum_t P(t) (E(m | t) - ybar_t)^2, then averaged over
the trees; their standard errors are across trees. The total loss of the
aggregated forest has no leaf form and uses fresh test points.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .data import Dataset, generate_sample
from .forest import ForestConfig, draw_theta_schedule, fit_forest, grow_tree, leaf_means
from .geometry import Cell
from .models import make_model
from .population import moments, relevance_iota

CSV_COLUMNS = ["model_id", "n", "p", "k", "gamma0", "b", "B", "M", "sq_bias", "sq_bias_se",
               "est_var", "est_var_se", "total_loss", "total_loss_se", "bound_bias",
               "bound_var", "pass_bias", "pass_var"]

# rounding slack on bounds that are attained exactly (standard error 0)
_ROUND = 1e-12


def _se(v) -> float:
    v = np.asarray(v, dtype=float)
    return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


@dataclass
class BiasVarianceReport:
    model_id: str
    n: int
    p: int
    k: int
    gamma0: float
    b: float
    B: int
    M: int
    sq_bias: float
    sq_bias_se: float
    est_var: float
    est_var_se: float
    total_loss: float
    total_loss_se: float
    tree_loss: float = math.nan
    tree_loss_se: float = math.nan
    n_test: int = 0
    bound_bias: float = None
    bound_var: float = None
    pass_bias: bool = None
    pass_var: bool = None
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {c: getattr(self, c) for c in CSV_COLUMNS}

    @property
    def coherent(self) -> bool:
        se = self.total_loss_se + self.sq_bias_se + self.est_var_se
        return self.total_loss <= 2 * (self.sq_bias + self.est_var) + 3 * se + _ROUND


def leaf_terms(model, tree, data: Dataset, subsample):
    """(sum P Var, sum P (mu - ybar)^2) over the leaves of one tree."""
    ybar = leaf_means(tree, data, subsample) if data is not None else None
    bias = var = 0.0
    for s, cell in enumerate(tree.leaves):
        mo = moments(model, cell)
        if mo.prob == 0:
            continue
        bias += mo.prob * mo.var
        if ybar is not None:
            var += mo.prob * (mo.mean - ybar[s]) ** 2
    return bias, var


def draw_test_points(model, n_test: int, seed):
    rng = np.random.default_rng([seed, 4])
    X = model.sample_features(rng, n_test)
    return X, model.evaluate(X)


def _report(model, data, config, trees, subsamples, X, mx) -> BiasVarianceReport:
    biases, variances = [], []
    preds = np.empty((config.B, config.M, X.shape[0]))
    for a, row in enumerate(trees):
        for t, tree in enumerate(row):
            bi, va = leaf_terms(model, tree, data, subsamples[a])
            biases.append(bi)
            variances.append(va)
            preds[a, t] = leaf_means(tree, data, subsamples[a])[tree.leaf_index(X)]
    forest = preds.mean(axis=1).mean(axis=0)
    loss = (mx - forest) ** 2
    per_tree = ((mx[None, None, :] - preds) ** 2).mean(axis=(0, 1))
    return BiasVarianceReport(
        model.model_id, data.n, data.p, config.k, config.gamma0, config.b, config.B, config.M,
        float(np.mean(biases)), _se(biases), float(np.mean(variances)), _se(variances),
        float(loss.mean()), _se(loss), float(per_tree.mean()), _se(per_tree), X.shape[0])


def bias_variance_decompose(model, data: Dataset, config: ForestConfig, n_test: int = 2000,
                            workers: int = 1, seed: int = None) -> BiasVarianceReport:
    forest = fit_forest(config, data, model, workers)
    X, mx = draw_test_points(model, n_test, config.seed if seed is None else seed)
    return _report(model, data, config, forest.trees, forest.subsamples, X, mx)


def decompose_over_depths(model, data: Dataset, config: ForestConfig, ks, n_test: int = 2000,
                          workers: int = 1) -> list:
    """One report per k in ks; trees are grown once at max(ks) and truncated,
    which gives exactly the trees a height-k forest would grow."""
    ks = sorted(set(int(k) for k in ks))
    top = ForestConfig(max(ks), config.gamma0, config.b, config.B, config.M, config.seed,
                       config.splitter, config.exclude)
    forest = fit_forest(top, data, model, workers)
    X, mx = draw_test_points(model, n_test, config.seed)
    out = []
    for k in ks:
        cfg = ForestConfig(k, config.gamma0, config.b, config.B, config.M, config.seed,
                           config.splitter, config.exclude)
        trees = [[t.truncate(k) for t in row] for row in forest.trees]
        out.append(_report(model, data, cfg, trees, forest.subsamples, X, mx))
    return out


# ---- bound checks ---------------------------------------------------------------

@dataclass
class BoundTable:
    rows: list
    passed: bool


def check_theorem3_bound(model, alpha1: float = None, alpha2: float = 1.0, eps: float = 0.0,
                         gamma0: float = 1.0, k_max: int = 6, mc_budget: int = 200,
                         seed: int = 0) -> BoundTable:
    """Theoretical-CART trees over random schedules against
    alpha1 alpha2 eps + (1 - gamma0 / (alpha1 alpha2))^k Var(m)."""
    alpha1 = model.sid_alpha if alpha1 is None else alpha1
    if alpha1 is None:
        raise ValueError("no SID constant known for this model; pass alpha1")
    var_m = moments(model, Cell.unit(model.p)).var
    per_k = np.zeros((mc_budget, k_max + 1))
    for t in range(mc_budget):
        sched = draw_theta_schedule(model.p, gamma0, k_max, (seed, 1, 0, t))
        tree = grow_tree(None, None, sched, "theoretical", (seed, 2, 0, t), model=model)
        for k in range(k_max + 1):
            per_k[t, k] = sum(mo.prob * mo.var for mo in
                              (moments(model, c) for c in tree.cells[k]) if mo.prob > 0)
    rows = []
    for k in range(k_max + 1):
        est, se = float(per_k[:, k].mean()), _se(per_k[:, k])
        bound = alpha1 * alpha2 * eps + (1 - gamma0 / (alpha1 * alpha2)) ** k * var_m
        rows.append({"model_id": model.model_id, "gamma0": gamma0, "k": k, "M": mc_budget,
                     "sq_bias": est, "sq_bias_se": se, "bound_bias": bound,
                     "pass_bias": est <= bound + 3 * se + _ROUND})
    return BoundTable(rows, all(r["pass_bias"] for r in rows))


def prop2_variance_envelope(M0, noise, k, n, p, eps_prime=0.01):
    return 2 * (3 * M0 + 2 * noise) ** 2 * 2 ** k * math.log(max(n, p)) ** (2 + eps_prime) / n


def check_prop2_bounds(s_star: int = 4, beta: float = 1.0, p: int = 10, gamma0: float = 1.0,
                       n: int = 5000, k_grid=range(0, 5), noise: float = 0.0,
                       mc_budget: int = 50, seed: int = 0, n_test: int = 2000,
                       workers: int = 1) -> BoundTable:
    model = make_model("binary-linear", p=p, s_star=s_star, beta=beta, noise=noise)
    data = generate_sample(model, n, seed)
    config = ForestConfig(max(k_grid), gamma0, 1.0, 1, mc_budget, seed, "binary")
    var_m = s_star * beta ** 2 / 4
    rows = []
    for rep in decompose_over_depths(model, data, config, k_grid, n_test, workers):
        k = rep.k
        bound = 2 * (1 - gamma0 / s_star) ** k * var_m
        ok = rep.sq_bias <= bound + 3 * rep.sq_bias_se + _ROUND
        if gamma0 == 1:
            exact = max((s_star - k) * beta ** 2 / 2, 0.0)
            rep.extra["bound_bias_gamma1"] = exact
            ok = ok and rep.sq_bias <= exact + 3 * rep.sq_bias_se + _ROUND
            bound = min(bound, exact)
        rep.bound_bias = bound
        rep.bound_var = prop2_variance_envelope(model.M0, noise, k, n, p)
        rep.pass_bias = bool(ok)
        rep.pass_var = bool(rep.est_var <= rep.bound_var + 3 * rep.est_var_se)
        rows.append(rep)
    return BoundTable(rows, all(r.pass_bias and r.pass_var for r in rows))


@dataclass
class RelevanceCheck:
    loss: float
    loss_se: float
    iota: float
    passed: bool
    report: BiasVarianceReport = None


def check_theorem2_relevance(model, j_relevant: int, config: ForestConfig, n: int = 4000,
                             n_test: int = 4000, seed: int = 0, workers: int = 1) -> RelevanceCheck:
    """Forest without feature j everywhere: its L2 loss stays above iota_j."""
    iota = relevance_iota(model, j_relevant).iota
    cfg = ForestConfig(config.k, config.gamma0, config.b, config.B, config.M, config.seed,
                       config.splitter, tuple(set(config.exclude) | {j_relevant}))
    data = generate_sample(model, n, seed)
    rep = bias_variance_decompose(model, data, cfg, n_test, workers)
    passed = True if iota == 0 else rep.total_loss >= iota - 3 * rep.total_loss_se
    return RelevanceCheck(rep.total_loss, rep.total_loss_se, iota, passed, rep)


# ---- sweeps ----------------------------------------------------------------------

@dataclass
class SweepConfig:
    models: list                      # [{"id": ..., "params": {...}}]
    n_grid: list
    gamma0_grid: list = field(default_factory=lambda: [1.0])
    c_height: float = 0.125
    b: float = 1.0
    B: int = 1
    M: int = 10
    n_test: int = 2000
    seed: int = 0
    splitter: str = "cart"


@dataclass
class SweepResult:
    rows: list
    slopes: list
    errors: list


def sweep_k(n: int, c_height: float) -> int:
    return max(0, math.floor(c_height * math.log2(n) + 1e-12))


def run_convergence_sweep(cfg: SweepConfig, workers: int = 1) -> SweepResult:
    grid = [(m, n, g) for m in cfg.models for n in cfg.n_grid for g in cfg.gamma0_grid]
    if not grid:
        raise ValueError("empty sweep")
    rows, errors = [], []
    for spec, n, g in grid:
        try:
            model = make_model(spec["id"], **spec.get("params", {}))
            data = generate_sample(model, n, cfg.seed)
            splitter = spec.get("splitter", "binary" if model.features == "bernoulli" else cfg.splitter)
            config = ForestConfig(sweep_k(n, cfg.c_height), g, cfg.b, cfg.B, cfg.M, cfg.seed, splitter)
            rows.append(bias_variance_decompose(model, data, config, cfg.n_test, workers))
        except Exception as e:  # recorded per row, the sweep goes on
            errors.append({"model_id": spec.get("id"), "n": n, "gamma0": g, "error": str(e)})
    slopes = []
    keys = sorted({(r.model_id, r.gamma0) for r in rows})
    for mid, g in keys:
        sel = [r for r in rows if r.model_id == mid and r.gamma0 == g and r.total_loss > 0]
        if len({r.n for r in sel}) >= 2:
            slope = np.polyfit(np.log([r.n for r in sel]), np.log([r.total_loss for r in sel]), 1)[0]
            slopes.append({"model_id": mid, "gamma0": g, "loglog_slope": float(slope)})
    return SweepResult(rows, slopes, errors)


# ---- report files -------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        d = r.row() if isinstance(r, BiasVarianceReport) else r
        w.writerow([_fmt(d.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def rows_to_json(rows, config: dict = None, extra: dict = None) -> str:
    out = [asdict(r) if isinstance(r, BiasVarianceReport) else dict(r) for r in rows]
    doc = {"version": __version__, "config": config or {}, "rows": out}
    doc.update(extra or {})
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"
