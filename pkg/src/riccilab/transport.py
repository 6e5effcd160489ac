"""Exact and entropic optimal transport on finite spaces, plus Kantorovich-Rubinstein bounds."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

for _backend in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402

from .geometry import ConeSpace  # noqa: E402
from .mmspace import FiniteMMSpace, ProbMeasure, as_weights  # noqa: E402

logger = logging.getLogger(__name__)

MARGINAL_TOL = 1e-9
EXACT_MAX_SUPPORT = 3000


class LipschitzError(ValueError):
    pass


@dataclass(frozen=True)
class Coupling:
    plan: np.ndarray
    source: np.ndarray
    target: np.ndarray

    def cost(self, cost: np.ndarray) -> float:
        return float(np.sum(self.plan * cost))

    def marginal_violation(self) -> float:
        return float(max(np.abs(self.plan.sum(axis=1) - self.source).max(),
                         np.abs(self.plan.sum(axis=0) - self.target).max()))


@dataclass
class OTResult:
    """Optimal cost W_p^p, its root W_p, the plan and solver diagnostics."""

    cost: float
    value: float
    coupling: Coupling
    method: str
    iterations: int = 0
    duality_gap: float = 0.0
    marginal_violation: float = 0.0
    converged: bool = True
    rounded_cost: Optional[float] = None
    extra: dict = field(default_factory=dict)


def _check_marginals(a: np.ndarray, b: np.ndarray) -> None:
    for name, w in (("mu", a), ("nu", b)):
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError(f"{name} must be finite and nonnegative")
    if abs(a.sum() - 1.0) > MARGINAL_TOL or abs(b.sum() - 1.0) > MARGINAL_TOL:
        raise ValueError(f"marginals must be normalized (got {a.sum()!r}, {b.sum()!r})")


def solve_ot_exact(mu, nu, cost: np.ndarray, p: int = 2) -> OTResult:
    """Minimum-cost coupling of ``mu`` and ``nu`` by network simplex.

    Zero-mass points are pruned before solving; the returned plan is over
    the full index sets. ``value`` is ``cost ** (1/p)``.
    """
    a = np.asarray(as_weights(mu), dtype=float)
    b = np.asarray(as_weights(nu), dtype=float)
    C = np.asarray(cost, dtype=float)
    if C.shape != (a.size, b.size):
        raise ValueError(f"cost has shape {C.shape}, expected {(a.size, b.size)}")
    if not np.all(np.isfinite(C)) or np.any(C < 0):
        raise ValueError("cost must be finite and nonnegative")
    _check_marginals(a, b)
    ia, ib = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    if max(ia.size, ib.size) > EXACT_MAX_SUPPORT:
        logger.warning("exact OT on %d x %d support; consider sinkhorn", ia.size, ib.size)
    aa, bb = a[ia], b[ib]
    # POT wants identical totals to machine precision
    aa, bb = aa / aa.sum(), bb / bb.sum()
    Cs = np.ascontiguousarray(C[np.ix_(ia, ib)])
    G, log = ot.emd(aa, bb, Cs, numItermax=max(10 ** 6, 50 * ia.size * ib.size), log=True)
    if log.get("result_code", 1) != 1:
        raise RuntimeError(f"network simplex failed: {log.get('warning')}")
    plan = np.zeros((a.size, b.size))
    plan[np.ix_(ia, ib)] = G
    total = float(np.sum(G * Cs))
    dual = float(aa @ log["u"] + bb @ log["v"])
    coupling = Coupling(plan, a, b)
    total = max(total, 0.0)
    return OTResult(cost=total, value=total ** (1.0 / p), coupling=coupling, method="network-simplex",
                    duality_gap=abs(total - dual), marginal_violation=coupling.marginal_violation())


def _cost_table(space: FiniteMMSpace, p: int) -> np.ndarray:
    if p not in (1, 2):
        raise ValueError("only p in {1, 2} is supported")
    return space.dist if p == 1 else space.dist ** 2


def wasserstein(space: FiniteMMSpace, mu, nu, p: int = 2) -> float:
    a, b = as_weights(mu, space.n), as_weights(nu, space.n)
    ia, ib = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    # restrict the cost table before squaring: heat measures on big spaces are sparse after pruning
    D = space.dist[np.ix_(ia, ib)]
    res = solve_ot_exact(a[ia], b[ib], D if p == 1 else D * D, p=p)
    return res.value


def w2(space: FiniteMMSpace, mu, nu) -> float:
    return wasserstein(space, mu, nu, 2)


def w1(space: FiniteMMSpace, mu, nu) -> float:
    return wasserstein(space, mu, nu, 1)


def round_to_marginals(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a nonnegative plan onto the coupling polytope of (a, b).

    Rows and columns are scaled down to their targets, then the missing
    mass is added back as a rank-one correction.
    """
    P = plan.copy()
    row = P.sum(axis=1)
    P *= np.minimum(1.0, np.divide(a, row, out=np.ones_like(a), where=row > 0))[:, None]
    col = P.sum(axis=0)
    P *= np.minimum(1.0, np.divide(b, col, out=np.ones_like(b), where=col > 0))[None, :]
    err_a = a - P.sum(axis=1)
    err_b = b - P.sum(axis=0)
    total = err_a.sum()
    if total > 0:
        P += np.outer(err_a, err_b) / total
    return P


def sinkhorn(mu, nu, cost: np.ndarray, epsilon: float, max_iter: int = 10_000,
             tol: float = 1e-9) -> OTResult:
    """Entropic OT by log-domain Sinkhorn scaling.

    ``cost`` is the raw transport cost of the entropic plan (no entropy
    term). ``rounded_cost`` is the cost of the plan after rounding onto
    the exact marginals, so it upper-bounds the true optimum.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a = np.asarray(as_weights(mu), dtype=float)
    b = np.asarray(as_weights(nu), dtype=float)
    C = np.asarray(cost, dtype=float)
    _check_marginals(a, b)
    with np.errstate(divide="ignore"):
        la, lb = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    M = -C / epsilon
    violation = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = la - logsumexp(M + g[None, :], axis=1)
        g = lb - logsumexp(M + f[:, None], axis=0)
        if it % 10 == 0 or it == max_iter:
            P = np.exp(M + f[:, None] + g[None, :])
            violation = float(np.abs(P.sum(axis=1) - a).sum())
            if violation <= tol:
                break
    P = np.exp(M + f[:, None] + g[None, :])
    violation = float(np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum())
    converged = violation <= 2 * tol
    if not converged:
        logger.warning("sinkhorn stopped after %d iterations with marginal violation %.3g", it, violation)
    raw = float(np.sum(P * C))
    rounded = round_to_marginals(P, a, b)
    rcost = float(np.sum(rounded * C))
    return OTResult(cost=raw, value=np.sqrt(max(raw, 0.0)), coupling=Coupling(P, a, b),
                    method="sinkhorn", iterations=it, marginal_violation=violation,
                    converged=converged, rounded_cost=rcost,
                    extra={"epsilon": epsilon, "rounded_plan": rounded})


def _radial_base_moments(cone: ConeSpace, w: np.ndarray):
    r = cone.radius
    second = float(np.sum(w * r * r))
    body = slice(1, 1 + cone.grid.size * cone.nb)
    wr = (w[body] * r[body]).reshape(cone.grid.size, cone.nb).sum(axis=0)
    return second, wr


def product_coupling_cost(cone: ConeSpace, nu_p, nu_o) -> float:
    """Cost of the product coupling nu_p x nu_o under squared cone distance.

    Uses d_C^2 = r^2 + s^2 - 2 r s cos(d_X), so the double sum splits into
    second radial moments and one base-level bilinear form.
    """
    if cone.K != 0:
        raise ValueError("product_coupling_cost is defined for flat (K=0) cones")
    wp, wo = as_weights(nu_p, cone.n), as_weights(nu_o, cone.n)
    mp, rp = _radial_base_moments(cone, wp)
    mo, ro = _radial_base_moments(cone, wo)
    cosb = np.cos(np.minimum(cone.base.dist, np.pi))
    cross = float(rp @ cosb @ ro)
    return mp + mo - 2.0 * cross


def verify_lipschitz(phi, space: FiniteMMSpace) -> float:
    """max |phi(x) - phi(y)| / d(x, y) over pairs, with 0/0 read as 0."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (space.n,):
        raise ValueError("phi must have one value per point")
    D = space.dist
    best = 0.0
    for lo in range(0, space.n, 1024):
        dphi = np.abs(phi[lo:lo + 1024, None] - phi[None, :])
        d = D[lo:lo + 1024]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(d > 0, dphi / d, np.where(dphi > 0, np.inf, 0.0))
        best = max(best, float(ratio.max()))
    return best


def kr_dual_bound(space: FiniteMMSpace, mu, nu, phi, lip_const: float = 1.0, *, check: bool = True) -> float:
    """(int phi dmu - int phi dnu) / L, a lower bound on W_1(mu, nu) for L-Lipschitz phi."""
    if lip_const <= 0:
        raise ValueError("lip_const must be positive")
    phi = np.asarray(phi, dtype=float)
    if check:
        lip = verify_lipschitz(phi, space)
        if lip > lip_const + 1e-9:
            raise LipschitzError(f"phi has Lipschitz constant {lip:.12g} > {lip_const:.12g}")
    a, b = as_weights(mu, space.n), as_weights(nu, space.n)
    return float((phi @ a - phi @ b) / lip_const)


def cone_dual_function(cone: ConeSpace, x0: int, *, certify: bool = True) -> np.ndarray:
    """phi(s, y) = s cos(d_X(x0, y)) on a flat cone, zero at the vertex; 1-Lipschitz."""
    if cone.K != 0:
        raise ValueError("cone_dual_function needs a flat (K=0) cone")
    if cone.base.diameter > np.pi + 1e-9:
        raise ValueError("base diameter exceeds pi; the dual function need not be 1-Lipschitz")
    phi = np.zeros(cone.n)
    body = cone.base_index >= 0
    phi[body] = cone.radius[body] * np.cos(cone.base.dist[x0, cone.base_index[body]])
    if certify:
        lip = verify_lipschitz(phi, cone.space)
        if lip > 1.0 + 1e-9:
            raise LipschitzError(f"cone dual function has Lipschitz constant {lip:.12g}")
    return phi
