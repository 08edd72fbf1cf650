import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from cartforest.geometry import Cell, Split, split_cell
from cartforest.models import REGISTRY, make_model, user_model
from cartforest.population import (Condition5Params, conditional_mean,
                                   conditional_variance, estimate_sid_alpha, impurity_decrease_II,
                                   moments, random_cell, relevance_iota, theoretical_cart_split,
                                   verify_condition5)
from cartforest.forest import draw_theta_schedule, grow_tree, Tree

seeds = st.integers(0, 2**32 - 1)
x1 = user_model(lambda xa: xa[:, 0], p=3, active=(0,), M0=1.0, degree=1)
x1x2 = user_model(lambda xa: xa[:, 0] * xa[:, 1], p=2, active=(0, 1), M0=1.0, degree=1)
x1_plus_x2 = user_model(lambda xa: xa[:, 0] + xa[:, 1], p=2, active=(0, 1), M0=2.0, degree=1)
constant = user_model(lambda xa: np.full(len(xa), 2.0), p=2, active=(0,), M0=2.0, degree=0)


def nquad_moments(model, cell):
    """Adaptive-quadrature oracle over the active coordinates of a uniform model."""
    ranges = [(cell.lo[j], cell.hi[j]) for j in model.active]
    vol = np.prod([b - a for a, b in ranges])
    f = lambda *x: float(model.f_active(np.array([x]))[0])
    opts = {"epsabs": 1e-13, "epsrel": 1e-12}
    m1 = integrate.nquad(f, ranges, opts=opts)[0] / vol
    m2 = integrate.nquad(lambda *x: (f(*x) - m1) ** 2, ranges, opts=opts)[0] / vol
    return m1, m2


def quadratic_mean(model, cell):
    """Closed form of E(m | t) for beta0 + b.x + x'Qx under a uniform law on a box."""
    b = np.asarray(model.params["beta"])
    Q = np.asarray(model.params["quad"])
    lo = np.array([cell.lo[j] for j in model.active])
    hi = np.array([cell.hi[j] for j in model.active])
    e1 = (lo + hi) / 2
    e2 = (lo * lo + lo * hi + hi * hi) / 3
    cross = np.outer(e1, e1)
    np.fill_diagonal(cross, e2)
    return model.params["beta0"] + b @ e1 + np.sum(Q * cross)


def cell_with_positive_volume(model, rng):
    while True:
        c = random_cell(model, rng, 6)
        if all(c.hi[j] > c.lo[j] for j in model.active):
            return c


def test_mean_and_variance_examples():
    root = Cell.unit(3)
    assert conditional_mean(x1, root) == pytest.approx(0.5, abs=1e-15)
    assert conditional_variance(x1, root) == pytest.approx(1 / 12, rel=1e-14)
    assert conditional_mean(x1x2, Cell((0, 0), (0.5, 0.5))) == pytest.approx(0.0625, rel=1e-14)
    assert conditional_variance(constant, Cell.unit(2)) == 0.0
    m = make_model("binary-linear", p=6, s_star=3)
    assert conditional_mean(m, Cell.unit(6)) == 1.5


@pytest.mark.parametrize("s_star", [1, 2, 4])
@pytest.mark.parametrize("beta", [1.0, 2.0])
def test_binary_exact_identities(s_star, beta):
    m = make_model("binary-linear", p=10, s_star=s_star, beta=beta)
    root = Cell.unit(10)
    assert conditional_variance(m, root) == pytest.approx(s_star * beta**2 / 4, rel=1e-12)
    best = max(impurity_decrease_II(m, root, Split(j, 1.0)).decrease for j in range(10))
    assert best == pytest.approx(beta**2 / 4, rel=1e-12)


def test_zero_probability_cell():
    m = make_model("binary-linear", p=3, s_star=2)
    empty = Cell((0.2, 0, 0), (0.8, 1, 1))
    mo = moments(m, empty)
    assert mo.empty and mo.mean == 0.0 and mo.var == 0.0
    assert impurity_decrease_II(m, empty, Split(1, 0.5)).null_cell


@given(seeds)
def test_quadratic_mean_matches_closed_form(seed):
    m = make_model("sparse-quadratic", p=3, beta0=0.3, beta=(1.0, 2.0), quad=((0.5, 1.0), (0.0, 0.7)))
    cell = cell_with_positive_volume(m, np.random.default_rng(seed))
    assert conditional_mean(m, cell) == pytest.approx(quadratic_mean(m, cell), rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("model_id", ["logistic", "polynomial-interaction", "saddle", "sparse-quadratic"])
def test_moments_match_adaptive_quadrature(model_id):
    m = make_model(model_id)
    rng = np.random.default_rng(1)
    for cell in [Cell.unit(m.p)] + [cell_with_positive_volume(m, rng) for _ in range(4)]:
        mean, var = nquad_moments(m, cell)
        mo = moments(m, cell)
        assert mo.mean == pytest.approx(mean, rel=1e-8, abs=1e-12)
        assert mo.var == pytest.approx(var, rel=1e-6, abs=1e-12)


def test_indicator_combination_moments_by_counting_pieces():
    m = make_model("indicator-combination")
    cuts = [np.array(c) for c in m.params["cuts"]]
    coef = np.array(m.params["coef"])
    rng = np.random.default_rng(2)
    for _ in range(20):
        cell = cell_with_positive_volume(m, rng)
        w = [np.clip(np.minimum(c[1:], cell.hi[j]) - np.maximum(c[:-1], cell.lo[j]), 0, None)
             for j, c in enumerate(cuts)]
        P = np.outer(w[0], w[1])
        P /= P.sum()
        mean = np.sum(P * coef)
        assert conditional_mean(m, cell) == pytest.approx(mean, rel=1e-12)
        assert conditional_variance(m, cell) == pytest.approx(np.sum(P * (coef - mean) ** 2), rel=1e-9, abs=1e-15)


def test_impurity_examples():
    ind = make_model("indicator", b=0.5)
    r = impurity_decrease_II(ind, Cell.unit(2), Split(0, 0.5))
    assert (r.decrease, r.remaining, r.var) == pytest.approx((0.25, 0.0, 0.25), abs=1e-15)
    r = impurity_decrease_II(ind, Cell.unit(2), Split(1, 0.3))
    assert r.decrease == 0.0
    r = impurity_decrease_II(x1, Cell.unit(3), Split(0, 0.5))
    assert r.decrease == pytest.approx(0.0625, rel=1e-14)
    assert (r.p_left, r.p_right) == (0.5, 0.5)


@pytest.mark.parametrize("model_id", sorted(REGISTRY))
def test_additivity_of_I_and_II(model_id):
    m = make_model(model_id)
    rtol = 1e-8 if (m.additive or m.features == "bernoulli") else 1e-5
    rng = np.random.default_rng(3)
    for _ in range(40):
        cell = random_cell(m, rng, 6)
        j = int(rng.integers(m.p))
        lo, hi, _ = cell.interval(j)
        c = 1.0 if m.features == "bernoulli" else (rng.uniform(lo, hi) if hi > lo else lo)
        if m.features == "bernoulli" and cell.interval(j) != (0.0, 1.0, True):
            continue
        r = impurity_decrease_II(m, cell, Split(j, c))
        assert r.remaining >= 0 and r.decrease >= 0
        assert r.remaining + r.decrease == pytest.approx(r.var, rel=rtol, abs=1e-12)
        if not r.null_cell:
            assert r.p_left + r.p_right == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("model_id", ["sparse-quadratic", "smooth-additive", "additive-oracle", "piecewise-linear"])
def test_impurity_lower_bound_by_mean_gap(model_id):
    m = make_model(model_id)
    rng = np.random.default_rng(4)
    for _ in range(100):
        cell = cell_with_positive_volume(m, rng)
        j = int(rng.choice(m.active))
        c = rng.uniform(cell.lo[j], cell.hi[j])
        r = impurity_decrease_II(m, cell, Split(j, c))
        left, right = split_cell(cell, Split(j, c))
        H = conditional_mean(m, right) - conditional_mean(m, left)
        assert r.decrease >= r.p_left * r.p_right * H * H * (1 - 1e-9) - 1e-15


def test_theoretical_split_examples():
    ts = theoretical_cart_split(make_model("indicator", b=0.3), Cell.unit(2), [0])
    assert ts.split.j == 0 and ts.split.c == pytest.approx(0.3, abs=1e-12)
    ts = theoretical_cart_split(constant, Cell.unit(2), [0, 1])
    assert ts.degenerate and ts.ii == 0.0
    ts = theoretical_cart_split(x1_plus_x2, Cell.unit(2), [0, 1])
    assert ts.split.j == 0 and ts.split.c == pytest.approx(0.5, abs=1e-9)
    assert ts.ii == pytest.approx(0.0625, rel=1e-12)


@pytest.mark.parametrize("model_id", ["sparse-quadratic", "logistic", "piecewise-linear", "indicator-combination"])
def test_theoretical_split_beats_dense_grid(model_id):
    m = make_model(model_id)
    rng = np.random.default_rng(5)
    for _ in range(3):
        cell = cell_with_positive_volume(m, rng)
        ts = theoretical_cart_split(m, cell, range(m.p))
        grid_best = 0.0
        for j in m.active:
            for c in np.linspace(cell.lo[j], cell.hi[j], 2001)[1:-1]:
                grid_best = max(grid_best, impurity_decrease_II(m, cell, Split(j, c)).decrease)
        assert ts.ii >= grid_best * (1 - 1e-7)
        assert impurity_decrease_II(m, cell, ts.split).decrease == pytest.approx(ts.ii, rel=1e-6)


@given(seeds)
def test_theoretical_split_ignores_unused_coordinates(seed):
    m = make_model("smooth-additive", p=6)
    cell = cell_with_positive_volume(m, np.random.default_rng(seed))
    a = theoretical_cart_split(m, cell, [0, 1])
    b = theoretical_cart_split(m, cell, range(6))
    assert a == b


def test_sid_examples():
    cert = estimate_sid_alpha(make_model("indicator"), budget=300, seed=1)
    assert 1.0 <= cert.alpha_hat <= 1 + 1e-9
    cert = estimate_sid_alpha(make_model("binary-linear", p=6, s_star=3), budget=50)
    assert cert.root_ratio == 3.0
    with pytest.raises(ValueError, match="constant on all probed cells"):
        estimate_sid_alpha(constant, budget=20)


@pytest.mark.parametrize("model_id", [k for k, e in sorted(REGISTRY.items())
                                      if make_model(k).sid_alpha is not None])
def test_sid_estimate_does_not_refute_claim(model_id):
    m = make_model(model_id)
    cert = estimate_sid_alpha(m, budget=60, seed=2)
    assert 1.0 - 1e-12 <= cert.alpha_hat <= m.sid_alpha * (1 + 1e-9)


def test_sid_certificate_json():
    cert = estimate_sid_alpha(make_model("saddle"), budget=5)
    doc = json.loads(cert.to_json())
    assert doc["alpha_hat"] == "inf" and doc["alpha_hat_is_lower_bound"]
    assert doc["budget"] == 5 and doc["worst_cell"]["lo"] == [0.0, 0.0]


def test_condition5_examples():
    m = make_model("sparse-quadratic", p=3)
    sched = draw_theta_schedule(3, 2 / 3, 3, 0)
    tree = grow_tree(None, None, sched, "theoretical", 0, model=m)
    assert verify_condition5(m, tree).passed

    flat = user_model(lambda xa: np.full(len(xa), 2.0), p=3, active=(0,), M0=2.0, degree=0)
    tree = grow_tree(None, None, sched, "theoretical", 0, model=flat)
    assert verify_condition5(flat, tree).passed
    assert verify_condition5(flat, tree, params=Condition5Params(eps=0.3)).passed

    ind = make_model("indicator", b=0.5)
    sched = draw_theta_schedule(2, 1.0, 1, 0)
    root = Cell.unit(2)
    bad = Tree(1, 2, ((root,), split_cell(root, Split(1, 0.4))), ((Split(1, 0.4),),), sched)
    res = verify_condition5(ind, bad, params=Condition5Params(eps=1e-6, alpha2=1.1))
    assert not res.passed
    level, index, item, chosen, sup = res.violations[0]
    assert (level, index, item) == (0, 0, 1) and chosen == 0.0
    assert sup == pytest.approx(0.25)


def test_condition5_rejects_bad_params():
    with pytest.raises(ValueError):
        Condition5Params(eps=-1)
    with pytest.raises(ValueError):
        Condition5Params(alpha2=0.5)


def test_relevance_examples():
    m = make_model("binary-linear", p=5, s_star=2, beta=2.0)
    assert relevance_iota(m, 0).iota == pytest.approx(1.0, rel=1e-14)
    assert relevance_iota(m, 4).iota == 0.0
    assert relevance_iota(x1, 0).iota == pytest.approx(1 / 12, rel=1e-14)
    r = relevance_iota(x1x2, 0, mc_budget=20000)
    # E[Var(x1 x2 | x2)] = E[x2^2] / 12 = 1/36
    assert abs(r.iota - 1 / 36) <= 4 * r.se
