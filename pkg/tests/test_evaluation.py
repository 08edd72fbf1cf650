import csv
import io
import json
import math

import numpy as np
import pytest

from cartforest.data import generate_sample
from cartforest.evaluation import (CSV_COLUMNS, SweepConfig, bias_variance_decompose,
                                   check_prop2_bounds, check_theorem2_relevance,
                                   check_theorem3_bound, decompose_over_depths, draw_test_points,
                                   prop2_variance_envelope, rows_to_csv, rows_to_json,
                                   run_convergence_sweep, sweep_k)
from cartforest.forest import ForestConfig, fit_forest, population_tree_estimate
from cartforest.models import make_model, user_model
from cartforest.population import Condition5Params, verify_condition5

x1 = user_model(lambda xa: xa[:, 0], p=2, active=(0,), M0=1.0, degree=1)


def test_constant_model_has_zero_bias_and_variance():
    m = user_model(lambda xa: np.full(len(xa), 1.5), p=3, active=(0,), M0=1.5, degree=0)
    data = generate_sample(m, 200, 0)
    rep = bias_variance_decompose(m, data, ForestConfig(3, 0.5, 1.0, 1, 5, 0), 300)
    assert rep.sq_bias == 0.0 and rep.est_var == 0.0 and rep.total_loss == 0.0


def test_full_depth_binary_has_zero_bias():
    m = make_model("binary-linear", p=6, s_star=3)
    data = generate_sample(m, 3000, 0)
    rep = bias_variance_decompose(m, data, ForestConfig(3, 1.0, 1.0, 1, 3, 0, "binary"), 500)
    assert rep.sq_bias <= 3 * rep.sq_bias_se + 1e-12


def test_depth_zero_bias_is_variance_of_m():
    m = make_model("binary-linear", p=5, s_star=2)
    data = generate_sample(m, 500, 0)
    rep = bias_variance_decompose(m, data, ForestConfig(0, 1.0, 1.0, 1, 3, 0, "binary"), 500)
    assert rep.sq_bias == pytest.approx(0.5, rel=1e-12)


@pytest.mark.parametrize("model_id,splitter", [("smooth-additive", "cart"), ("logistic", "cart"),
                                               ("binary-linear", "binary"),
                                               ("indicator-combination", "cart")])
def test_decomposition_coherence_and_aggregation(model_id, splitter):
    m = make_model(model_id, noise=0.3)
    data = generate_sample(m, 400, 1)
    rep = bias_variance_decompose(m, data, ForestConfig(3, 0.5, 0.8, 2, 8, 2, splitter), 1000)
    assert min(rep.sq_bias, rep.est_var, rep.total_loss) >= 0
    assert rep.coherent
    assert rep.total_loss <= rep.tree_loss + 3 * rep.tree_loss_se


def test_leaf_sums_match_test_point_estimates():
    m = make_model("smooth-additive", p=3, noise=0.5)
    data = generate_sample(m, 300, 3)
    cfg = ForestConfig(3, 2 / 3, 1.0, 1, 10, 4)
    rep = bias_variance_decompose(m, data, cfg, 100)
    forest = fit_forest(cfg, data)
    X, mx = draw_test_points(m, 20_000, 99)
    preds = forest.tree_predictions(X)[0]
    b_terms, v_terms = [], []
    for tree, mhat in zip(forest.trees[0], preds):
        mstar = population_tree_estimate(m, tree, X)
        b_terms.append((mx - mstar) ** 2)
        v_terms.append((mstar - mhat) ** 2)
    # conservative SE: trees share the test points, so average the per-tree SEs
    for terms, exact in ((b_terms, rep.sq_bias), (v_terms, rep.est_var)):
        se = np.mean([t.std(ddof=1) / np.sqrt(t.size) for t in terms])
        assert abs(np.mean(terms) - exact) <= 4 * se


def test_depth_truncation_matches_direct_growth():
    m = make_model("smooth-additive", p=3, noise=0.2)
    data = generate_sample(m, 200, 0)
    cfg = ForestConfig(2, 2 / 3, 1.0, 1, 4, 5)
    via_top = [r for r in decompose_over_depths(m, data, cfg, [1, 2, 4], 300) if r.k == 2][0]
    direct = bias_variance_decompose(m, data, cfg, 300)
    assert via_top.sq_bias == direct.sq_bias and via_top.est_var == direct.est_var
    assert via_top.total_loss == direct.total_loss


def test_depth_bound_examples():
    m = make_model("binary-linear", p=6, s_star=2)
    tab = check_theorem3_bound(m, gamma0=1.0, k_max=2, mc_budget=20)
    assert tab.passed
    assert tab.rows[0]["sq_bias"] == pytest.approx(0.5, rel=1e-12)
    assert tab.rows[2]["bound_bias"] == pytest.approx(0.125)
    ind = make_model("indicator")
    tab = check_theorem3_bound(ind, gamma0=1.0, k_max=1, mc_budget=5)
    assert tab.rows[1]["sq_bias"] <= 1e-12 and tab.passed
    with pytest.raises(ValueError):
        check_theorem3_bound(make_model("saddle"), k_max=1, mc_budget=2)


def test_prop2_examples():
    tab = check_prop2_bounds(s_star=3, p=6, n=3000, k_grid=[0, 3], mc_budget=5, n_test=500)
    k0, k3 = tab.rows
    assert k0.sq_bias == pytest.approx(0.75, rel=1e-12)
    assert k3.sq_bias <= 3 * k3.sq_bias_se + 1e-12
    assert tab.passed
    env = [prop2_variance_envelope(3.0, 0.5, k, 5000, 10) for k in range(6)]
    assert all(b == pytest.approx(2 * a) for a, b in zip(env, env[1:]))


def test_relevance_examples():
    m = make_model("binary-linear", p=5, s_star=3)
    cfg = ForestConfig(3, 1.0, 1.0, 1, 4, 0, "binary")
    res = check_theorem2_relevance(m, 0, cfg, n=2000, n_test=2000)
    assert res.iota == 0.25 and res.passed
    res = check_theorem2_relevance(m, 4, cfg, n=500, n_test=500)
    assert res.iota == 0.0 and res.passed
    res = check_theorem2_relevance(x1, 0, ForestConfig(3, 1.0, 1.0, 1, 2, 0), n=1000, n_test=2000)
    assert res.iota == pytest.approx(1 / 12) and res.passed


def test_sweep_examples():
    sc = SweepConfig([{"id": "smooth-additive", "params": {"p": 3}}], [256], M=3, n_test=300)
    res = run_convergence_sweep(sc)
    assert len(res.rows) == 1 and not res.errors
    m = make_model("smooth-additive", p=3)
    direct = bias_variance_decompose(m, generate_sample(m, 256, 0),
                                     ForestConfig(sweep_k(256, 0.125), 1.0, 1.0, 1, 3, 0), 300)
    assert res.rows[0].row() == direct.row()
    with pytest.raises(ValueError, match="empty sweep"):
        run_convergence_sweep(SweepConfig([], [100]))
    bad = run_convergence_sweep(SweepConfig([{"id": "nope"}, {"id": "indicator"}], [64], M=2, n_test=100))
    assert len(bad.errors) == 1 and len(bad.rows) == 1


def test_sweep_loss_does_not_grow_with_n_on_binary_model():
    sc = SweepConfig([{"id": "binary-linear", "params": {"p": 6, "s_star": 2, "noise": 0.5}}],
                     [1024, 2048, 4096], M=5, n_test=2000)
    rows = run_convergence_sweep(sc).rows
    assert len({r.k for r in rows}) == 1
    for a, b in zip(rows, rows[1:]):
        assert b.total_loss <= a.total_loss + 3 * (a.total_loss_se + b.total_loss_se)


def test_condition5_certificate_rate():
    m = make_model("binary-linear", p=10, s_star=4)
    data = generate_sample(m, 5000, 0)
    forest = fit_forest(ForestConfig(4, 0.5, 1.0, 1, 100, 0, "binary"), data)
    params = Condition5Params(eps=0.0, alpha2=1 + 1e-9)
    ok = [verify_condition5(m, t, params=params).passed for t in forest.trees[0]]
    assert np.mean(ok) >= 0.99


def test_report_files_are_deterministic():
    m = make_model("smooth-additive", p=3, noise=0.1)
    data = generate_sample(m, 150, 0)
    rep = bias_variance_decompose(m, data, ForestConfig(2, 1.0, 1.0, 1, 2, 0), 200)
    again = bias_variance_decompose(m, data, ForestConfig(2, 1.0, 1.0, 1, 2, 0), 200)
    text = rows_to_csv([rep])
    assert text == rows_to_csv([again])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == CSV_COLUMNS and float(rows[1][8]) == rep.sq_bias
    doc = json.loads(rows_to_json([rep], {"seed": 0}, {"note": math.inf}))
    assert doc["version"] and doc["config"] == {"seed": 0} and doc["note"] == "inf"
    assert doc["rows"][0]["sq_bias"] == rep.sq_bias
