"""Registry of regression functions m: [0,1]^p -> R with their feature laws.

Every model evaluates on the active coordinates only (the coordinates m
depends on), so conditional moments only have to integrate over those.
"""
from __future__ import annotations

import dataclasses
import difflib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

UNIFORM = "uniform"
BERNOULLI = "bernoulli"


@lru_cache(maxsize=None)
def gauss_legendre(q: int):
    """Nodes and weights on [0, 1] (weights sum to 1)."""
    x, w = np.polynomial.legendre.leggauss(q)
    return (x + 1.0) / 2.0, w / 2.0


@dataclass(frozen=True, eq=False)
class RegressionModel:
    """A regression function with its feature distribution and noise law.

    `f` maps an (n, len(active)) array to n values. Additive models also
    carry `components`, one univariate callable per active coordinate, with
    m = intercept + sum of components. `degree` is the per-coordinate
    polynomial degree on each piece between `breakpoints` (None when m is
    smooth but not piecewise polynomial); it decides how many quadrature
    nodes make the moments exact.
    """
    model_id: str
    kind: str
    p: int
    active: tuple
    f: Callable
    M0: float
    features: str = UNIFORM
    noise: float = 0.0
    components: tuple = None
    intercept: float = 0.0
    breakpoints: tuple = None
    degree: int = None
    sid_alpha: float = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if any(not 0 <= j < self.p for j in self.active):
            raise ValueError(f"active coordinates {self.active} out of range for p={self.p}")
        if self.features not in (UNIFORM, BERNOULLI):
            raise ValueError(f"unknown feature distribution {self.features!r}")
        if self.noise < 0:
            raise ValueError("noise half-width must be >= 0")
        if self.breakpoints is None:
            object.__setattr__(self, "breakpoints", tuple(() for _ in self.active))

    @property
    def s_star(self) -> int:
        return len(self.active)

    @property
    def additive(self) -> bool:
        return self.components is not None

    @property
    def nodes(self) -> int:
        # q nodes integrate degree 2q - 1 exactly; m^2 has degree 2 * degree
        return 32 if self.degree is None else self.degree + 1

    def evaluate(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.p:
            raise ValueError(f"expected {self.p} features, got {X.shape[1]}")
        if np.any(X < 0) or np.any(X > 1):
            raise ValueError("point outside the unit cube")
        return self.f_active(X[:, list(self.active)])

    def f_active(self, Xa: np.ndarray) -> np.ndarray:
        return np.asarray(self.f(Xa), dtype=float).reshape(len(Xa))

    def rule(self, a: int, lo: float, hi: float, closed: bool):
        """Normalized quadrature rule for active coordinate `a` on one interval.

        Returns (nodes, weights, prob) where prob = P(X_j in interval).
        """
        if self.features == BERNOULLI:
            support = [v for v in (0.0, 1.0) if lo <= v < hi or (closed and v == hi)]
            if not support:
                return np.empty(0), np.empty(0), 0.0
            k = len(support)
            return np.array(support), np.full(k, 1.0 / k), k / 2.0
        if hi <= lo:
            return np.empty(0), np.empty(0), 0.0
        cuts = [lo] + [b for b in self.breakpoints[a] if lo < b < hi] + [hi]
        t, w = gauss_legendre(self.nodes)
        xs, ws = [], []
        for u, v in zip(cuts[:-1], cuts[1:]):
            xs.append(u + (v - u) * t)
            ws.append((v - u) * w)
        return np.concatenate(xs), np.concatenate(ws) / (hi - lo), hi - lo

    def interval_probability(self, lo: float, hi: float, closed: bool) -> float:
        if self.features == BERNOULLI:
            return sum(1 for v in (0.0, 1.0) if lo <= v < hi or (closed and v == hi)) / 2.0
        return max(hi - lo, 0.0)

    def sample_features(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.features == BERNOULLI:
            return rng.integers(0, 2, size=(n, self.p)).astype(float)
        return rng.random((n, self.p))

    def describe(self) -> dict:
        return {
            "id": self.model_id,
            "kind": self.kind,
            "p": self.p,
            "active": list(self.active),
            "features": self.features,
            "noise": self.noise,
            "M0": self.M0,
            "sid_alpha": self.sid_alpha,
            "params": _jsonable(self.params),
        }


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def eval_model(model: RegressionModel, point) -> float:
    point = np.asarray(point, dtype=float)
    if point.ndim != 1:
        raise ValueError("point must be a vector")
    return float(model.evaluate(point[None, :])[0])


# ---- builders ---------------------------------------------------------------

def _indicator(p=2, b=0.5, j=0, noise=0.0):
    b = float(b)
    if not 0 <= b <= 1:
        raise ValueError("b must lie in [0, 1]")
    comp = lambda x: (np.asarray(x) >= b).astype(float)
    return RegressionModel(
        "indicator", "indicator", p, (j,), lambda Xa: comp(Xa[:, 0]), 1.0,
        noise=noise, components=(comp,), breakpoints=((b,),), degree=0,
        sid_alpha=1.0, params={"b": b, "j": j},
    )


def _sparse_quadratic(p=5, beta0=0.0, beta=(1.0, 1.0), quad=((0.5, 1.0), (0.0, 0.5)), noise=0.0):
    beta = np.asarray(beta, dtype=float)
    s = len(beta)
    Q = np.zeros((s, s)) if quad is None else np.triu(np.asarray(quad, dtype=float))
    if Q.shape != (s, s):
        raise ValueError("quad must be an s* x s* matrix")
    for j in range(s):
        group = [beta[j]] + [Q[min(l, j), max(l, j)] for l in range(s)]
        if any(Q[min(l, j), max(l, j)] != 0 for l in range(s) if l != j):
            if min(group) < 0 < max(group):
                raise ValueError(f"coefficients touching x{j + 1} must share a sign")

    def f(Xa):
        return beta0 + Xa @ beta + np.einsum("ni,ij,nj->n", Xa, Q, Xa)

    M0 = abs(beta0) + np.abs(beta).sum() + np.abs(Q).sum()
    offdiag = np.any(Q - np.diag(np.diag(Q)) != 0)
    comps = None
    if not offdiag:
        comps = tuple((lambda x, a=beta[i], c=Q[i, i]: a * x + c * x * x) for i in range(s))
    return RegressionModel(
        "sparse-quadratic", "sparse-quadratic", p, tuple(range(s)), f, float(M0),
        noise=noise, components=comps, intercept=float(beta0), degree=2,
        sid_alpha=86.4 * s if s else None,
        params={"beta0": beta0, "beta": beta.tolist(), "quad": Q.tolist()},
    )


def _smooth_additive(p=5, beta=(1.0, 1.0), noise=0.0):
    # m_j(x) = beta_j (x + x^2 / 2); derivative in [|beta_j|, 2|beta_j|]
    beta = [float(v) for v in beta]
    comps = tuple((lambda x, c=c: c * (x + 0.5 * x * x)) for c in beta)
    f = lambda Xa: sum(comp(Xa[:, i]) for i, comp in enumerate(comps))
    return RegressionModel(
        "smooth-additive", "smooth-monotone-additive", p, tuple(range(len(beta))), f,
        1.5 * sum(abs(c) for c in beta), noise=noise, components=comps, degree=2,
        params={"beta": beta},
    )


def _additive_oracle(p=5, beta=(1.0, 1.0), noise=0.0, components=None):
    # default m_j(x) = beta_j (e^x - 1) / (e - 1); user components may replace it
    if components is None:
        components = tuple((lambda x, c=c: c * np.expm1(x) / math.expm1(1.0)) for c in beta)
        M0 = sum(abs(c) for c in beta)
    else:
        components = tuple(components)
        grid = np.linspace(0, 1, 10001)
        M0 = float(sum(np.max(np.abs(c(grid))) for c in components))
    f = lambda Xa: sum(comp(Xa[:, i]) for i, comp in enumerate(components))
    return RegressionModel(
        "additive-oracle", "additive-with-oracle", p, tuple(range(len(components))), f,
        float(M0), noise=noise, components=components,
        params={"beta": list(beta)},
    )


def _binary_linear(p=10, s_star=4, beta=1.0, noise=0.0):
    if not 1 <= s_star <= p:
        raise ValueError("need 1 <= s_star <= p")
    beta = float(beta)
    comps = tuple((lambda x, c=beta: c * x) for _ in range(s_star))
    return RegressionModel(
        "binary-linear", "binary-linear", p, tuple(range(s_star)),
        lambda Xa: beta * Xa.sum(axis=1), s_star * abs(beta), features=BERNOULLI,
        noise=noise, components=comps, degree=1, sid_alpha=float(s_star),
        params={"s_star": s_star, "beta": beta},
    )


def _logistic(p=5, beta=(1.0, 1.0), noise=0.0):
    beta = np.asarray(beta, dtype=float)
    if np.any(beta == 0):
        raise ValueError("logistic coefficients must be nonzero")
    a = np.abs(beta)
    alpha = 4 * (len(beta) * a.max() / a.min()) ** 2 * math.exp(2 * a.sum())
    return RegressionModel(
        "logistic", "logistic", p, tuple(range(len(beta))),
        lambda Xa: 1.0 / (1.0 + np.exp(-(Xa @ beta))), 1.0, noise=noise,
        sid_alpha=float(alpha), params={"beta": beta.tolist()},
    )


def _polynomial_interaction(p=5, beta=(1.0, 1.0), terms=((1.0, (2, 1)),), noise=0.0):
    """m = sum_k b_k prod_j x_j^{r_jk} + sum_j beta_j x_j over the first s* coordinates.

    Each term is (b_k, powers) with one nonnegative integer power per active
    coordinate.
    """
    beta = np.asarray(beta, dtype=float)
    s = len(beta)
    coefs = np.array([float(t[0]) for t in terms])
    powers = np.array([list(t[1]) for t in terms], dtype=int).reshape(len(terms), s)
    signs = np.sign(np.concatenate([coefs, beta]))
    if np.any(signs == 0) or not (np.all(signs > 0) or np.all(signs < 0)):
        raise ValueError("all coefficients must be nonzero with a common sign")

    def f(Xa):
        out = Xa @ beta
        for b, r in zip(coefs, powers):
            out = out + b * np.prod(Xa ** r, axis=1)
        return out

    rmax = int(powers.max()) if powers.size else 1
    alpha = 4 * s**2 * ((rmax * np.abs(coefs).sum() + np.abs(beta).max()) / np.abs(beta).min()) ** 2
    return RegressionModel(
        "polynomial-interaction", "polynomial-interaction", p, tuple(range(s)), f,
        float(np.abs(coefs).sum() + np.abs(beta).sum()), noise=noise,
        degree=max(rmax, 1), sid_alpha=float(alpha),
        params={"beta": beta.tolist(), "terms": [[b, r.tolist()] for b, r in zip(coefs, powers)]},
    )


def _piecewise_linear(p=5, s_star=2, knots=(0.0, 0.5, 1.0), slopes=(1.0, -2.0), noise=0.0):
    knots = np.asarray(knots, dtype=float)
    slopes = np.asarray(slopes, dtype=float)
    if knots[0] != 0 or knots[-1] != 1 or np.any(np.diff(knots) <= 0):
        raise ValueError("knots must increase from 0 to 1")
    if len(slopes) != len(knots) - 1 or np.any(slopes == 0):
        raise ValueError("need one nonzero slope per piece")
    vals = np.concatenate([[0.0], np.cumsum(slopes * np.diff(knots))])

    def comp(x):
        return np.interp(x, knots, vals)

    comps = (comp,) * s_star
    r, R = np.abs(slopes).min(), np.abs(slopes).max()
    bstar = np.diff(knots).min()
    return RegressionModel(
        "piecewise-linear", "piecewise-linear", p, tuple(range(s_star)),
        lambda Xa: comp(Xa).sum(axis=1), float(s_star * np.abs(vals).max()), noise=noise,
        components=comps, breakpoints=(tuple(knots[1:-1]),) * s_star, degree=1,
        sid_alpha=float(s_star * 1024 * R**5 / (bstar**3 * r**5)),
        params={"s_star": s_star, "knots": knots.tolist(), "slopes": slopes.tolist()},
    )


def _indicator_combination(p=5, cuts=((0.0, 0.5, 1.0), (0.0, 0.5, 1.0)),
                           coef=((0.0, 1.0), (1.0, 3.0)), noise=0.0):
    cuts = [np.asarray(c, dtype=float) for c in cuts]
    coef = np.asarray(coef, dtype=float)
    s = len(cuts)
    if coef.shape != tuple(len(c) - 1 for c in cuts):
        raise ValueError("coefficient array shape must match the cut counts")
    iota = math.inf
    for j in range(s):
        d = np.diff(coef, axis=j)
        if d.size == 0:
            continue
        if np.all(d > 0):
            iota = min(iota, d.min())
        elif np.all(d < 0):
            iota = min(iota, (-d).min())
        else:
            raise ValueError(f"coefficients must be strictly monotone along axis {j + 1}")

    def f(Xa):
        # last piece is closed at 1 so m is defined on the whole cube
        idx = tuple(np.clip(np.searchsorted(c, Xa[:, i], side="right") - 1, 0, len(c) - 2)
                    for i, c in enumerate(cuts))
        return coef[idx]

    M0 = float(np.abs(coef).max())
    cdag = min(0.25, min(np.diff(c).min() for c in cuts))
    alpha = None
    if math.isfinite(iota):
        alpha = s / (cdag * (1 - cdag)) * (2 * M0 / iota) ** 2
    return RegressionModel(
        "indicator-combination", "indicator-combination", p, tuple(range(s)), f, M0,
        noise=noise, breakpoints=tuple(tuple(c[1:-1]) for c in cuts), degree=0,
        sid_alpha=alpha,
        params={"cuts": [c.tolist() for c in cuts], "coef": coef.tolist(), "iota": iota},
    )


def _saddle(p=2, noise=0.0):
    return RegressionModel(
        "saddle", "user-callable", p, (0, 1),
        lambda Xa: (Xa[:, 0] - 0.5) * (Xa[:, 1] - 0.5), 0.25, noise=noise, degree=1,
        params={},
    )


def user_model(f, p, active, M0, features=UNIFORM, noise=0.0, degree=None,
               breakpoints=None, model_id="user", check_points=100_000, seed=0):
    """Wrap a callable f(Xa) on the active coordinates; M0 is spot-checked."""
    model = RegressionModel(model_id, "user-callable", p, tuple(active), f, float(M0),
                            features=features, noise=noise, degree=degree,
                            breakpoints=breakpoints)
    if check_points:
        X = model.sample_features(np.random.default_rng(seed), check_points)
        if np.max(np.abs(model.evaluate(X))) > M0:
            raise ValueError("declared M0 is exceeded by sampled values of m")
    return model


@dataclass(frozen=True)
class RegistryEntry:
    builder: Callable
    summary: str
    sid_claim: str


REGISTRY = {
    "indicator": RegistryEntry(_indicator, "1{x_j >= b}", "1"),
    "sparse-quadratic": RegistryEntry(
        _sparse_quadratic, "beta0 + sum beta_j x_j + sum_{l>=j} beta_lj x_l x_j, uniform", "86.4 s*"),
    "smooth-additive": RegistryEntry(
        _smooth_additive, "sum beta_j (x_j + x_j^2/2), uniform", "c s* (c unspecified)"),
    "additive-oracle": RegistryEntry(
        _additive_oracle, "sum of univariate components, uniform", "c s* (c unspecified)"),
    "binary-linear": RegistryEntry(
        _binary_linear, "beta * sum_{j<=s*} x_j, Bernoulli(1/2) features", "s*"),
    "logistic": RegistryEntry(
        _logistic, "logistic(sum beta_j x_j), uniform",
        "4 (#S* max|beta| / min|beta|)^2 exp(2 sum|beta|)"),
    "polynomial-interaction": RegistryEntry(
        _polynomial_interaction, "sum_k b_k prod x_j^r_jk + sum beta_j x_j, uniform",
        "4 (#S*)^2 ((max r) sum|b_k| + max|beta|)^2 / min|beta|^2"),
    "piecewise-linear": RegistryEntry(
        _piecewise_linear, "additive continuous piecewise-linear, uniform",
        "s* 1024 R^5 / (b*^3 r^5)"),
    "indicator-combination": RegistryEntry(
        _indicator_combination, "monotone step function on a product grid, uniform",
        "s* / (c(1-c)) (2 M0 / iota)^2"),
    "saddle": RegistryEntry(_saddle, "(x1 - 1/2)(x2 - 1/2), uniform; violates SID", "none"),
}


class UnknownModelError(KeyError):
    def __init__(self, model_id):
        self.model_id = model_id
        self.suggestions = difflib.get_close_matches(model_id, list(REGISTRY), n=3, cutoff=0.3)
        super().__init__(model_id)

    def __str__(self):
        return f"unknown model {self.model_id!r}; did you mean {self.suggestions}?"


def make_model(model_id: str, **params) -> RegressionModel:
    if model_id not in REGISTRY:
        raise UnknownModelError(model_id)
    return REGISTRY[model_id].builder(**params)


def with_noise(model: RegressionModel, noise: float) -> RegressionModel:
    return dataclasses.replace(model, noise=float(noise))
