"""Short-time curvature estimates from heat-flow contraction, and the cone vertex dichotomy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .functionals import cos_potential
from .geometry import ConeSpace, build_cone
from .heat import (HeatModel, bessel_first_moment_constant, build_generator_graph,
                   heat_measure, truncation_radius, vertex_heat_measure)
from .mmspace import FiniteMMSpace
from .transport import (cone_dual_function, kr_dual_bound, product_coupling_cost,
                        solve_ot_exact)

logger = logging.getLogger(__name__)

PRUNE_REL = 1e-13
DEFECT_FLOOR = 1e-9
FINITE, DIVERGENT, INCONCLUSIVE = "finite", "divergent", "inconclusive"


class UnderflowError(ArithmeticError):
    pass


def _pruned(w: np.ndarray, rel: float = PRUNE_REL):
    keep = np.flatnonzero(w > rel * w.max())
    sub = w[keep]
    return keep, sub / sub.sum()


def heat_w2(model: HeatModel, x: int, y: int, t: float) -> float:
    """Exact W_2 between the heat measures from x and y at time t.

    Weights below 1e-13 of the peak are dropped before solving, which keeps
    small-t problems small and moves W_2 by far less than solver precision.
    """
    a = heat_measure(model, x, t).weights
    b = heat_measure(model, y, t).weights
    ia, wa = _pruned(a)
    ib, wb = _pruned(b)
    D = model.space.dist[np.ix_(ia, ib)]
    return solve_ot_exact(wa, wb, D * D).value


def _check_tgrid(t_grid, minimum: int = 2) -> np.ndarray:
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size < minimum or np.any(t <= 0) or np.any(np.diff(t) <= 0):
        raise ValueError(f"t_grid must hold >= {minimum} increasing positive times")
    return t


def parse_tgrid(spec) -> np.ndarray:
    """``"log:lo:hi:k"`` or ``"lin:lo:hi:k"`` or a sequence."""
    if isinstance(spec, str):
        kind, lo, hi, k = spec.split(":")
        lo, hi, k = float(lo), float(hi), int(k)
        if kind == "log":
            return np.geomspace(lo, hi, k)
        if kind == "lin":
            return np.linspace(lo, hi, k)
        raise ValueError(f"bad t-grid spec {spec!r}")
    return np.asarray(spec, dtype=float)


@dataclass
class ThetaEstimate:
    """Raw short-time curve v(t) = -(1/t) log(W_2/d) and its extrapolation to t = 0."""

    x: int
    y: int
    d: float
    t: np.ndarray
    w2: np.ndarray
    v: np.ndarray
    theta: float
    slope: float
    residual: float
    growth_exponent: float
    defect_exponent: float
    classification: str
    half_classification: Optional[str] = None

    @property
    def is_finite(self) -> bool:
        return self.classification == FINITE

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "d": self.d, "t": self.t.tolist(), "w2": self.w2.tolist(),
                "v": self.v.tolist(), "theta": self.theta, "slope": self.slope,
                "residual": self.residual, "growth_exponent": self.growth_exponent,
                "defect_exponent": self.defect_exponent, "classification": self.classification,
                "half_classification": self.half_classification}

    def rows(self):
        return [{"t": t, "w2": w, "v": v} for t, w, v in zip(self.t, self.w2, self.v)]


def _growth_exponent(t: np.ndarray, v: np.ndarray) -> float:
    # v ~ t^-p  <=>  |dv/dt| ~ t^-(p+1); differencing removes additive constants
    dv = np.diff(v) / np.diff(t)
    tm = np.sqrt(t[1:] * t[:-1])
    if np.any(dv >= 0):
        return np.nan
    return float(-np.polyfit(np.log(tm), np.log(-dv), 1)[0] - 1.0)


def classify_theta(t, v, d, w2, *, fit_tol: float = 0.05, v_max: float = 100.0):
    A = np.c_[np.ones_like(t), t]
    coef, *_ = np.linalg.lstsq(A, v, rcond=None)
    residual = float(np.sqrt(np.mean((A @ coef - v) ** 2)))
    growth = _growth_exponent(t, v)
    # d^2 - W^2 ~ t^(1/2) when v blows up like t^(-1/2), ~ t when v stays bounded
    defect = d * d - w2 * w2
    measurable = np.all(defect > DEFECT_FLOOR * d * d)
    defect_exp = float(np.polyfit(np.log(t), np.log(defect), 1)[0]) if measurable else np.nan
    if np.isfinite(defect_exp) and abs(defect_exp - 0.5) <= 0.1:
        label = DIVERGENT
    elif residual <= fit_tol and np.all(np.abs(v) <= v_max):
        label = FINITE
    else:
        label = INCONCLUSIVE
    return float(coef[0]), float(coef[1]), residual, growth, defect_exp, label


def theta_plus_estimate(model: HeatModel, x: int, y: int, t_grid, *, fit_tol: float = 0.05,
                        half: Optional[tuple] = None) -> ThetaEstimate:
    """Estimate the short-time contraction rate between delta_x and delta_y.

    v(t) is computed with exact OT on a log-spaced grid and extrapolated
    linearly to t = 0. Finite: linear fit residual <= ``fit_tol`` and v
    bounded. Divergent: the defect d^2 - W_2^2 scales like t^(1/2) (log-log
    exponent within 0.5 +- 0.1), i.e. v grows like t^(-1/2). The growth
    exponent of v itself, read off its derivative, is reported alongside.
    ``half`` = (model, x, y) at half resolution triggers a rerun whose
    classification must agree, else the result is downgraded.
    """
    if x == y:
        raise ValueError("x and y must differ")
    t = _check_tgrid(t_grid, 6)
    d = float(model.space.dist[x, y])
    w2 = np.array([heat_w2(model, x, y, ti) for ti in t])
    if np.any(w2 <= 0):
        raise UnderflowError("W_2 vanished; points are too close for this bandwidth (increase d or decrease eps)")
    v = -np.log(w2 / d) / t
    theta, slope, residual, growth, defect_exp, label = classify_theta(t, v, d, w2, fit_tol=fit_tol)
    est = ThetaEstimate(x=x, y=y, d=d, t=t, w2=w2, v=v, theta=theta, slope=slope, residual=residual,
                        growth_exponent=growth, defect_exponent=defect_exp, classification=label)
    if half is not None:
        hm, hx, hy = half
        other = theta_plus_estimate(hm, hx, hy, t, fit_tol=fit_tol)
        est.half_classification = other.classification
        if other.classification != label:
            est.classification = INCONCLUSIVE
    return est


def theta_star_estimate(model: HeatModel, x: int, radius: float, t_grid, *, max_pairs: int = 6,
                        fit_tol: float = 0.05) -> float:
    """Largest finite estimate over pairs (x, y) with radius/2 <= d(x, y) <= radius.

    Returns ``inf`` if any sampled pair is classified divergent. Pairs are
    taken at evenly spread distances, at most ``max_pairs`` of them.
    """
    d = model.space.dist[x]
    ball = np.flatnonzero((d > 0) & (d <= radius))
    if ball.size < 2:
        raise ValueError("ball contains fewer than two other points")
    ring = ball[d[ball] >= radius / 2]
    cand = ring if ring.size else ball
    cand = cand[np.argsort(d[cand], kind="stable")]
    pick = cand[np.unique(np.linspace(0, cand.size - 1, min(max_pairs, cand.size)).round().astype(int))]
    best = -np.inf
    for y in pick:
        est = theta_plus_estimate(model, x, int(y), t_grid, fit_tol=fit_tol)
        if est.classification == DIVERGENT:
            return np.inf
        if est.classification == FINITE:
            best = max(best, est.theta)
    if not np.isfinite(best):
        raise ArithmeticError("no pair in the ball gave a finite estimate")
    return float(best)


@dataclass
class ContractionReport:
    K: float
    rows: list = field(default_factory=list)
    tol: float = 2e-2

    @property
    def worst_ratio(self) -> float:
        return max(row["ratio"] for row in self.rows)

    @property
    def passed(self) -> bool:
        return self.worst_ratio <= 1.0 + self.tol

    def to_json(self) -> dict:
        return {"K": self.K, "tol": self.tol, "worst_ratio": self.worst_ratio,
                "passed": self.passed, "rows": self.rows}


def contraction_check(model: HeatModel, K: float, pairs: Sequence[tuple], t_grid,
                      tol: float = 2e-2) -> ContractionReport:
    """Compare W_2(P^_t delta_x, P^_t delta_y) with e^{-Kt} d(x, y) per pair and time."""
    report = ContractionReport(K=float(K), tol=tol)
    for x, y in pairs:
        d = float(model.space.dist[x, y])
        for t in np.atleast_1d(np.asarray(t_grid, dtype=float)):
            w = d if t == 0 else heat_w2(model, x, y, t)
            bound = np.exp(-K * t) * d
            report.rows.append({"x": int(x), "y": int(y), "t": float(t), "w2": w, "bound": bound,
                                "ratio": w / bound})
    return report


# --- cone dichotomy ---------------------------------------------------------

def fit_power_plus_linear(t, y, bounds=(0.1, 1.5)):
    """Least squares for y = A t^alpha + B t, alpha by bounded 1-D search.

    Returns (alpha, A, B, rms residual).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)

    def solve(alpha):
        X = np.c_[t ** alpha, t]
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        return coef, float(np.sqrt(np.mean((X @ coef - y) ** 2)))

    opt = minimize_scalar(lambda al: solve(al)[1], bounds=bounds, method="bounded",
                          options={"xatol": 1e-6})
    coef, res = solve(opt.x)
    return float(opt.x), float(coef[0]), float(coef[1]), res


@dataclass
class DichotomyReport:
    """Upper and lower bound curves for W_2 between the vertex and p0 = (r0, x0)."""

    x0: int
    r0: float
    a: float
    a_tol: float
    t: np.ndarray
    d_up: np.ndarray
    product_cost: np.ndarray
    g: np.ndarray
    w2: Optional[np.ndarray]
    alpha: float
    A: float
    B: float
    A_pred: float
    fit_residual: float
    g_slope: float
    g_residual: float
    classification: str
    notes: list = field(default_factory=list)
    half_classification: Optional[str] = None
    boundary_mass: float = 0.0

    @property
    def d(self) -> float:
        return self.r0

    def sandwich_ok(self, tol: float = 1e-9) -> Optional[bool]:
        """g <= W_2 <= sqrt(product cost) at every time, when W_2 was computed."""
        if self.w2 is None:
            return None
        return bool(np.all(self.g <= self.w2 + tol) and np.all(self.w2 <= np.sqrt(self.product_cost) + tol))

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in ("x0", "r0", "a", "a_tol", "alpha", "A", "B", "A_pred",
                                             "fit_residual", "g_slope", "g_residual",
                                             "classification", "notes", "half_classification",
                                             "boundary_mass")}
        for k in ("t", "d_up", "product_cost", "g"):
            out[k] = getattr(self, k).tolist()
        out["w2"] = None if self.w2 is None else self.w2.tolist()
        out["sandwich_ok"] = self.sandwich_ok()
        return out

    def rows(self):
        out = []
        for k, t in enumerate(self.t):
            out.append({"t": t, "w2": None if self.w2 is None else self.w2[k], "d_up": self.d_up[k],
                        "product_cost": self.product_cost[k], "g": self.g[k]})
        return out


def cos_potential_error(base: FiniteMMSpace, x0: int) -> float:
    """Spread of the cos-potential between the even and odd halves of the base sample."""
    a = cos_potential(base, x0)
    out = 0.0
    for sl in (slice(0, None, 2), slice(1, None, 2)):
        idx = np.arange(base.n)[sl]
        w = base.mass[idx]
        if w.sum() == 0:
            continue
        out = max(out, abs(float(np.sum(np.cos(np.minimum(base.dist[x0, idx], np.pi)) * w) / w.sum()) - a))
    return out


def half_resolution_cone(cone: ConeSpace, x0: int = 0, r0: Optional[float] = None):
    """Same cone over every other base point and every other radial node.

    The subsampling keeps base point ``x0`` and the radial node nearest
    ``r0`` (and the outermost node). Returns the coarse cone and the new
    index of ``x0``.
    """
    bidx = np.arange(x0 % 2, cone.nb, 2)
    base = FiniteMMSpace(cone.base.dist[np.ix_(bidx, bidx)], cone.base.mass[bidx],
                         name=cone.base.name + "[::2]", meta=dict(cone.base.meta))
    m = cone.grid.size
    i0 = 0 if r0 is None else int(np.argmin(np.abs(cone.grid - r0)))
    ridx = np.union1d(np.arange(i0 % 2, m, 2), [m - 1])
    return build_cone(base, cone.K, cone.N, cone.grid[ridx]), int(np.searchsorted(bidx, x0))


def local_bandwidth(space: FiniteMMSpace, p: int, factor: float = 2.0) -> float:
    row = space.dist[p].copy()
    row[p] = np.inf
    return factor * float(row.min()) ** 2


def cone_dichotomy(cone: ConeSpace, x0: int, r0: float, t_grid, *, eps: Optional[float] = None,
                   a_tol: Optional[float] = None, exact: Optional[bool] = None,
                   exact_max: int = 1500, half_resolution: bool = True,
                   alpha_tol: float = 0.05, coef_tol: float = 0.2,
                   g_tol: Optional[float] = None, w2_tol: Optional[float] = None,
                   method: str = "spectral") -> DichotomyReport:
    """Classify the vertex of a flat cone by the short-time behaviour of W_2(o, p0).

    Upper curve: d^2 minus the product-coupling cost, fitted as
    A t^alpha + B t. Case (ii) needs a > a_tol, alpha = 0.5 +- alpha_tol
    and A within ``coef_tol`` of 2 c r0 a. Lower curve: the dual bound
    g(t) from phi(s, y) = s cos(d_X(x0, y)). Case (i) needs a <= a_tol and
    g(t) - r0 linear in t through the origin within ``g_tol``; when exact
    W_2 is available it must also stay below d + ``w2_tol`` (default 1% of
    r0: the graph flow from p0 is only a discretized Gaussian, which puts
    a floor under W_2 - d even where the continuum value is exactly d).
    """
    if cone.K != 0:
        raise ValueError("cone_dichotomy needs a flat (K=0) cone")
    t = _check_tgrid(t_grid, 4)
    base = cone.base
    if base.diameter > np.pi + 1e-9:
        raise ValueError("base diameter exceeds pi")
    p0 = cone.nearest_index(r0, x0)
    r0 = float(cone.radius[p0])
    top = cone.grid[-1]
    if top < truncation_radius(cone.N, r0, t[-1]):
        raise ValueError(f"radial grid ends at {top:.4g}, below the truncation rule "
                         f"{truncation_radius(cone.N, r0, t[-1]):.4g}")
    a = cos_potential(base, x0)
    if a_tol is None:
        a_tol = 3.0 * max(cos_potential_error(base, x0), 1e-12)
    if g_tol is None:
        g_tol = 2e-3 * r0
    if w2_tol is None:
        w2_tol = 1e-2 * r0
    if exact is None:
        exact = cone.n <= exact_max
    if eps is None:
        eps = local_bandwidth(cone.space, p0)
    model = build_generator_graph(cone.space, eps, method=method)
    phi = cone_dual_function(cone, x0)
    c = bessel_first_moment_constant(cone.N)
    A_pred = 2.0 * c * r0 * a

    d_up, cost, g, w2 = [], [], [], []
    boundary = 0.0
    for ti in t:
        nu_p = heat_measure(model, p0, ti)
        nu_o = vertex_heat_measure(cone, ti)
        boundary = max(boundary, float(cone.radial_marginal(nu_p)[-1]))
        pc = product_coupling_cost(cone, nu_p, nu_o)
        cost.append(pc)
        d_up.append(r0 * r0 - pc)
        g.append(kr_dual_bound(cone.space, nu_p, nu_o, phi, check=False))
        if exact:
            ia, wa = _pruned(nu_p.weights)
            ib, wb = _pruned(nu_o.weights)
            D = cone.space.dist[np.ix_(ia, ib)]
            w2.append(solve_ot_exact(wa, wb, D * D).value)
    d_up, cost, g = map(np.asarray, (d_up, cost, g))
    w2 = np.asarray(w2) if exact else None

    alpha, A, B, res = fit_power_plus_linear(t, d_up)
    g_slope = float(np.sum(t * (g - r0)) / np.sum(t * t))
    g_res = float(np.max(np.abs(g - r0 - g_slope * t)))
    notes = []
    if np.any(d_up < -(8 * (cone.N + 1) * t).max() - 1e-6):
        notes.append("upper curve far below zero: discretization failure suspected")
    if np.any(g > r0 * (1 + 1e-6)):
        notes.append("dual bound exceeds d: discretization failure suspected")
    if boundary > 1e-6:
        notes.append(f"heat measure reaches the outer radial cell (mass {boundary:.3g})")

    if a > a_tol:
        ok = abs(alpha - 0.5) <= alpha_tol and A_pred > 0 and abs(A / A_pred - 1.0) <= coef_tol
        label = "(ii)" if ok else "inconclusive"
    else:
        ok = g_res <= g_tol
        if w2 is not None:
            ok = ok and bool(np.all(w2 <= r0 + w2_tol))
        label = "(i)" if ok else "inconclusive"
        notes.append("a below tolerance: result is consistent with (i), not a proof of a = 0")

    report = DichotomyReport(x0=x0, r0=r0, a=a, a_tol=a_tol, t=t, d_up=d_up, product_cost=cost, g=g,
                             w2=w2, alpha=alpha, A=A, B=B, A_pred=A_pred, fit_residual=res,
                             g_slope=g_slope, g_residual=g_res, classification=label, notes=notes,
                             boundary_mass=boundary)
    if half_resolution:
        coarse, cx0 = half_resolution_cone(cone, x0, r0)
        other = cone_dichotomy(coarse, cx0, r0, t, a_tol=a_tol, exact=False,
                               half_resolution=False, alpha_tol=alpha_tol, coef_tol=coef_tol,
                               g_tol=g_tol, w2_tol=w2_tol, method=method)
        report.half_classification = other.classification
        if other.classification != label:
            report.notes.append(f"half-resolution rerun disagrees ({other.classification})")
            report.classification = "inconclusive"
    return report
