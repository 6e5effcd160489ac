"""Heat semigroups on finite mm-spaces, their dual flow on measures, and the radial Bessel model.

Convention throughout: d/dt u = L u, with L approximating the weighted
Laplacian itself (no factor 1/2). Brownian motion in R^n then has
E|X_t - x|^2 = 2 n t.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, sparse
from scipy.linalg import eigh_tridiagonal
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import expm_multiply
from scipy.special import gammaln

from .geometry import ConeSpace, cell_edges, radial_cell_masses
from .mmspace import FiniteMMSpace, ProbMeasure

logger = logging.getLogger(__name__)

CONVENTION = "du/dt = L u"
DENSE_MAX = 2000
TRUNCATION_SIGMAS = 6.0
BOUNDARY_MASS_TOL = 1e-6
CACHE_ENV = "RICCILAB_CACHE"


class TruncationError(ValueError):
    pass


class HeatModel:
    """A generator L on a finite mm-space, self-adjoint in L^2(m), and its semigroup e^{tL}.

    Dense models evaluate e^{tL} from a cached eigendecomposition of the
    symmetrized matrix M^{1/2} L M^{-1/2}; sparse models use Krylov
    (``expm_multiply``) stepping.
    """

    convention = CONVENTION

    def __init__(self, space: FiniteMMSpace, generator, *, kind: str = "custom",
                 method: Optional[str] = None, params: Optional[dict] = None,
                 check: bool = True):
        self.space = space
        self.kind = kind
        self.params = dict(params or {})
        if method is None:
            method = "spectral" if space.n <= DENSE_MAX else "krylov"
        if method not in ("spectral", "krylov"):
            raise ValueError("method must be 'spectral' or 'krylov'")
        self.method = method
        if sparse.issparse(generator):
            self.generator = generator.tocsr()
        else:
            self.generator = np.asarray(generator, dtype=float)
        if self.generator.shape != (space.n, space.n):
            raise ValueError("generator shape does not match the space")
        self._eig = None
        if check:
            self.check()

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def mass(self) -> np.ndarray:
        return self.space.mass

    def dense(self) -> np.ndarray:
        L = self.generator
        return L.toarray() if sparse.issparse(L) else L

    def check(self, tol: float = 1e-9) -> None:
        L = self.generator
        m = self.mass
        rows = np.asarray(L.sum(axis=1)).ravel()
        scale = max(1.0, float(np.abs(L.diagonal()).max()))
        if np.abs(rows).max() > tol * scale:
            raise ValueError(f"generator rows do not sum to zero (max {np.abs(rows).max():.3g})")
        A = sparse.diags(m) @ L if sparse.issparse(L) else m[:, None] * L
        asym = abs(A - A.T).max()
        if asym > tol * scale * m.max():
            raise ValueError(f"generator violates m-detailed balance (max {asym:.3g})")
        off = L - sparse.diags(L.diagonal()) if sparse.issparse(L) else L - np.diag(np.diag(L))
        if off.min() < 0:
            raise ValueError("generator has negative off-diagonal rates")

    # --- spectral machinery -------------------------------------------------

    def _cache_path(self) -> Optional[Path]:
        root = os.environ.get(CACHE_ENV)
        if not root or sparse.issparse(self.generator):
            return None
        h = hashlib.sha256(np.ascontiguousarray(self.generator).tobytes())
        h.update(np.ascontiguousarray(self.mass).tobytes())
        return Path(root) / f"eig-{h.hexdigest()[:24]}.npz"

    def eig(self):
        """Eigenpairs (lam, U) of the symmetrized generator, lam ascending (all <= 0)."""
        if self._eig is None:
            path = self._cache_path()
            if path is not None and path.exists():
                with np.load(path) as z:
                    self._eig = (z["lam"], z["U"])
                return self._eig
            if self.params.get("tridiagonal"):
                self._eig = eigh_tridiagonal(*self._symmetric_bands())
            else:
                sm = np.sqrt(self.mass)
                S = sm[:, None] * self.dense() / sm[None, :]
                self._eig = np.linalg.eigh(0.5 * (S + S.T))
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                np.savez(path, lam=self._eig[0], U=self._eig[1])
        return self._eig

    def _symmetric_bands(self):
        L = self.generator
        d = L.diagonal() if sparse.issparse(L) else np.diag(L)
        up = np.asarray(L.diagonal(1) if sparse.issparse(L) else np.diag(L, 1))
        down = np.asarray(L.diagonal(-1) if sparse.issparse(L) else np.diag(L, -1))
        return np.asarray(d), np.sqrt(up * down)

    def eigenvalues(self) -> np.ndarray:
        """Spectrum of -L, ascending (the first is 0 on a connected space)."""
        return np.sort(-self.eig()[0])

    def spectral_gap(self) -> float:
        return float(self.eigenvalues()[1])

    def semigroup(self, t: float) -> np.ndarray:
        """The dense matrix e^{tL}."""
        if t < 0:
            raise ValueError("t must be nonnegative")
        if t == 0:
            return np.eye(self.n)
        if self.method == "krylov":
            return expm_multiply(t * sparse.csc_matrix(self.generator), np.eye(self.n))
        lam, U = self.eig()
        sm = np.sqrt(self.mass)
        core = (U * np.exp(t * lam)) @ U.T
        return core * (1.0 / sm)[:, None] * sm[None, :]

    def apply(self, u, t: float) -> np.ndarray:
        """(P_t u) = e^{tL} u for a function (or columns of functions) u."""
        if t < 0:
            raise ValueError("t must be nonnegative")
        u = np.asarray(u, dtype=float)
        if t == 0:
            return u.copy()
        if self.method == "krylov":
            return expm_multiply(t * sparse.csr_matrix(self.generator), u)
        lam, U = self.eig()
        sm = np.sqrt(self.mass)
        v = sm[:, None] * u if u.ndim == 2 else sm * u
        out = U @ (np.exp(t * lam)[:, None] * (U.T @ v)) if u.ndim == 2 else U @ (np.exp(t * lam) * (U.T @ v))
        return out / sm[:, None] if u.ndim == 2 else out / sm

    def heat_row(self, x: int, t: float) -> np.ndarray:
        """Row x of e^{tL}: by detailed balance, the density-free dual flow of delta_x."""
        if t == 0:
            e = np.zeros(self.n)
            e[x] = 1.0
            return e
        if self.method == "krylov":
            e = np.zeros(self.n)
            e[x] = 1.0
            col = expm_multiply(t * sparse.csr_matrix(self.generator), e)
            return self.mass * col / self.mass[x]
        lam, U = self.eig()
        sm = np.sqrt(self.mass)
        return (U[x] * np.exp(t * lam)) @ U.T * sm / sm[x]

    def __repr__(self):
        return f"HeatModel(kind={self.kind!r}, n={self.n}, method={self.method!r})"


def mean_nn_distance(space: FiniteMMSpace) -> float:
    D = space.dist.copy()
    np.fill_diagonal(D, np.inf)
    return float(D.min(axis=1).mean())


def build_generator_graph(space: FiniteMMSpace, eps: Optional[float] = None, *,
                          method: Optional[str] = None, cutoff: float = 1e-12) -> HeatModel:
    """Gaussian-kernel generator approximating the weighted Laplacian of (X, d, m).

    Weights exp(-d^2 / (4 eps)) are divided by sqrt(q_i q_j), q the
    m-weighted kernel row mass, which removes the density bias of the
    sampled measure and leaves the drift of the m-weighted Laplacian.
    Rates are scaled by 2 / (eps (deg_i + deg_j)) so that m_i L_ij is
    symmetric. ``eps`` defaults to the squared mean nearest-neighbor
    distance.
    """
    if space.n < 2:
        raise ValueError("a generator needs at least two points")
    if eps is None:
        eps = mean_nn_distance(space) ** 2
    if eps <= 0:
        raise ValueError("eps must be positive")
    m = space.probability
    n = space.n
    K = np.exp(-space.dist ** 2 / (4.0 * eps))
    K[K < cutoff] = 0.0
    adjacency = sparse.csr_matrix(K)
    ncomp, _ = connected_components(adjacency, directed=False)
    if ncomp > 1:
        raise ValueError(f"kernel graph is disconnected at eps={eps:.3g} ({ncomp} components)")
    q = K @ m
    K /= np.sqrt(q)[:, None]
    K /= np.sqrt(q)[None, :]
    deg = K @ m
    L = K * m[None, :]
    L *= 2.0 / eps
    L /= deg[:, None] + deg[None, :]
    np.fill_diagonal(L, 0.0)
    np.fill_diagonal(L, -L.sum(axis=1))
    if method is None:
        method = "spectral" if n <= DENSE_MAX else "krylov"
    gen = sparse.csr_matrix(L) if method == "krylov" else L
    return HeatModel(space.normalized(), gen, kind="graph", method=method,
                     params={"eps": float(eps), "cutoff": cutoff})


def _sturm_weight(domain: str, N: float):
    if domain == "halfline":
        return lambda r: np.asarray(r, dtype=float) ** N
    if domain == "interval":
        return lambda r: np.sin(np.asarray(r, dtype=float)) ** (N - 1)
    raise ValueError("domain must be 'halfline' or 'interval'")


def build_generator_sturm(N: float, domain: str = "halfline", n: int = 512, *,
                          R_max: Optional[float] = None, nodes=None) -> HeatModel:
    """Three-point finite-volume discretization of L u = (1/w)(w u')'.

    ``w = r^N`` on [0, R_max] (radial Bessel model, reflecting at R_max)
    or ``w = sin^(N-1)`` on [0, pi]. Nodes include r = 0; each node owns the
    cell between the neighbouring midpoints and the flux between nodes k and
    k+1 is w(midpoint) / spacing, so m_k L_{k,k+1} is symmetric by
    construction. The degenerate weight at 0 needs no boundary condition.
    """
    weight = _sturm_weight(domain, N)
    if nodes is None:
        if n < 16:
            raise ValueError("n must be >= 16")
        top = np.pi if domain == "interval" else R_max
        if top is None or top <= 0:
            raise ValueError("halfline models need a positive R_max")
        nodes = np.linspace(0.0, top, n)
        edges = np.r_[0.0, 0.5 * (nodes[1:] + nodes[:-1]), top]
    else:
        nodes = np.asarray(nodes, dtype=float)
        if nodes[0] != 0 or np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must start at 0 and increase")
        edges = cell_edges(nodes, upper=np.pi if domain == "interval" else None)
    if domain == "halfline":
        cell = radial_cell_masses(edges, 0.0, N)
    elif N == 1:
        cell = np.diff(edges)
    else:
        cell = np.array([integrate.quad(weight, a, b, epsabs=0, epsrel=1e-12)[0]
                         for a, b in zip(edges[:-1], edges[1:])])
    if np.any(cell <= 0):
        raise ValueError("degenerate radial cell")
    mids = edges[1:-1]
    cond = weight(mids) / np.diff(nodes)
    up = cond / cell[:-1]
    down = cond / cell[1:]
    diag = -(np.r_[up, 0.0] + np.r_[0.0, down])
    L = sparse.diags([down, diag, up], [-1, 0, 1], format="csr")
    dist = np.abs(nodes[:, None] - nodes[None, :])
    space = FiniteMMSpace(dist, cell / cell.sum(), coords=nodes[:, None],
                          name=f"sturm({domain},N={N:g},n={nodes.size})",
                          meta={"generator": "build_generator_sturm",
                                "params": {"N": N, "domain": domain, "n": int(nodes.size),
                                           "R_max": float(nodes[-1])}})
    return HeatModel(space, L, kind=f"sturm-{domain}", method="spectral",
                     params={"N": N, "tridiagonal": True, "nodes": nodes, "edges": edges})


def heat_measure(model: HeatModel, x: int, t: float) -> ProbMeasure:
    """P^_t delta_x, the dual heat flow of a Dirac mass; exactly delta_x at t = 0."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return ProbMeasure.dirac(model.n, x)
    row = model.heat_row(x, t)
    if row.min() < -1e-9:
        logger.warning("heat kernel row has negative entries down to %.3g", row.min())
    return ProbMeasure.from_weights(row, clip=True)


# --- radial Bessel model ----------------------------------------------------

@dataclass(frozen=True)
class RadialLaw:
    """Law of the radial part of the cone heat flow on a grid of radii."""

    grid: np.ndarray
    weights: np.ndarray
    N: float
    r: float
    t: float
    boundary_mass: float

    def moment(self, k: float = 1.0) -> float:
        return float(np.sum(self.weights * self.grid ** k))

    @property
    def truncation_ok(self) -> bool:
        return self.boundary_mass <= BOUNDARY_MASS_TOL

    def to_json(self) -> dict:
        return {"grid": self.grid.tolist(), "weights": self.weights.tolist(),
                "params": {"N": self.N, "r": self.r, "t": self.t,
                           "boundary_mass": self.boundary_mass}}


def bessel_first_moment_constant(N: float) -> float:
    """c with E[s] = c sqrt(t) for the radial law started at 0 (E[s^2] = 2(N+1)t).

    Closed form 2 Gamma((N+2)/2) / Gamma((N+1)/2), i.e. the first moment at
    time 1.
    """
    return float(2.0 * np.exp(gammaln((N + 2) / 2) - gammaln((N + 1) / 2)))


def truncation_radius(N: float, r: float, t: float) -> float:
    return r + TRUNCATION_SIGMAS * np.sqrt((N + 1) * t)


@functools.lru_cache(maxsize=32)
def _halfline_model(N: float, R_max: float, n: int) -> HeatModel:
    return build_generator_sturm(N, "halfline", n, R_max=R_max)


_node_models: dict = {}


def _nodes_model(N: float, nodes: np.ndarray) -> HeatModel:
    key = (float(N), hashlib.sha1(np.ascontiguousarray(nodes).tobytes()).hexdigest())
    if key not in _node_models:
        if len(_node_models) > 16:
            _node_models.clear()
        _node_models[key] = build_generator_sturm(N, "halfline", nodes=nodes)
    return _node_models[key]


def radial_model(N: float, grid) -> HeatModel:
    """Half-line model for ``grid`` = (R_max, n) or an array of nodes starting at 0."""
    if isinstance(grid, HeatModel):
        return grid
    if isinstance(grid, tuple):
        R_max, n = grid
        return _halfline_model(float(N), float(R_max), int(n))
    return _nodes_model(N, np.asarray(grid, dtype=float))


def bessel_radial_law(N: float, r: float, t: float, grid=None, *, check_truncation: bool = True) -> RadialLaw:
    """Evolve delta_r under the radial generator (1/s^N)(s^N u')'.

    ``grid`` is ``(R_max, n)``, an array of nodes starting at 0, or a
    prebuilt half-line :class:`HeatModel`; by default R_max is set by the
    6-sigma rule and the spacing resolves sqrt(t).
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if grid is None:
        R = truncation_radius(N, r, max(t, 1e-12)) * 1.25
        h = min(np.sqrt(max(t, 1e-12)) / 40, R / 64)
        grid = (R, int(min(4000, max(256, np.ceil(R / h) + 1))))
    model = radial_model(N, grid)
    nodes = model.space.coords[:, 0]
    R_max = float(nodes[-1])
    if check_truncation and R_max < truncation_radius(N, r, t):
        raise TruncationError(f"R_max={R_max:.4g} violates the truncation rule "
                              f"R_max >= r + 6 sqrt((N+1) t) = {truncation_radius(N, r, t):.4g}")
    k = int(np.argmin(np.abs(nodes - r)))
    tol = 0.5 * np.max(np.diff(nodes)[max(k - 1, 0):k + 1])
    if abs(nodes[k] - r) > tol + 1e-12:
        raise ValueError(f"start radius {r} is not on the grid")
    w = heat_measure(model, k, t).weights
    return RadialLaw(grid=nodes, weights=w, N=float(N), r=float(nodes[k]), t=float(t),
                     boundary_mass=float(w[-1]))


def simulate_bessel(N: float, r: float, t_grid: Sequence[float], *, n_paths: int = 200_000,
                    dt: float = 1e-4, seed: int = 0) -> np.ndarray:
    """Monte-Carlo samples of the radial process at each time in ``t_grid``.

    Simulates Y = X^2, which solves dY = 2(N+1) dt + 2 sqrt(2Y) dW with no
    singular drift at the origin (Euler-Maruyama, reflected at 0). This is
    an independent check on the deterministic finite-volume path.
    Returns samples of X, shape (len(t_grid), n_paths).
    """
    rng = np.random.default_rng(seed)
    t_grid = np.asarray(t_grid, dtype=float)
    y = np.full(n_paths, float(r) ** 2)
    out = np.empty((t_grid.size, n_paths))
    now = 0.0
    drift = 2.0 * (N + 1) * dt
    for j, target in enumerate(t_grid):
        steps = int(round((target - now) / dt))
        for _ in range(steps):
            y = np.abs(y + drift + 2.0 * np.sqrt(2.0 * y * dt) * rng.standard_normal(n_paths))
        now += steps * dt
        out[j] = np.sqrt(y)
    return out


def vertex_heat_measure(cone: ConeSpace, t: float, *, check_truncation: bool = True) -> ProbMeasure:
    """Heat flow from the vertex of a flat cone: radial Bessel law times the normalized base measure."""
    if cone.K != 0:
        raise ValueError("vertex_heat_measure needs a flat (K=0) cone")
    law = bessel_radial_law(cone.N, 0.0, t, cone.nodes, check_truncation=check_truncation)
    w = np.r_[law.weights[0], (law.weights[1:, None] * cone.base.probability[None, :]).ravel()]
    return ProbMeasure.from_weights(w)


class ConeHeatModel(HeatModel):
    """Graph heat flow on a flat cone with the exact product law from the vertex.

    A kernel generator cannot resolve times below its bandwidth, and from the
    vertex the sampled flow sticks: it leaves only by rare long jumps. The
    vertex row is therefore replaced by ``vertex_heat_measure``; all other rows
    come from the graph generator. The result is no longer a semigroup, so
    use it only through ``heat_row`` / ``heat_measure``.
    """

    def __init__(self, cone: ConeSpace, eps: Optional[float] = None, *, method: Optional[str] = None):
        if cone.K != 0:
            raise ValueError("ConeHeatModel needs a flat (K=0) cone")
        base = build_generator_graph(cone.space, eps, method=method)
        super().__init__(base.space, base.generator, kind="cone", method=base.method,
                         params=dict(base.params, vertex="bessel"), check=False)
        self.cone = cone

    def heat_row(self, x: int, t: float) -> np.ndarray:
        if x == 0 and t > 0:
            return vertex_heat_measure(self.cone, t).weights.copy()
        return super().heat_row(x, t)


@dataclass
class VarianceReport:
    """W_2(P^_t delta_x, delta_x)^2 against 2 N t."""

    rows: list = field(default_factory=list)
    rel_tol: float = 0.05

    @property
    def worst_ratio(self) -> float:
        ratios = [row["ratio"] for row in self.rows if row["t"] > 0]
        return max(ratios) if ratios else 0.0

    @property
    def passed(self) -> bool:
        return all(row["w2sq"] <= row["bound"] * (1 + self.rel_tol) + 1e-15 for row in self.rows)

    def to_json(self) -> dict:
        return {"rows": self.rows, "rel_tol": self.rel_tol, "worst_ratio": self.worst_ratio,
                "passed": self.passed}


def variance_bound_check(model: HeatModel, N: float, points: Sequence[int], t_grid: Sequence[float],
                         rel_tol: float = 0.05) -> VarianceReport:
    """Check W_2(P^_t delta_x, delta_x)^2 <= 2 N t (1 + rel_tol).

    The only coupling with a Dirac mass is the product one, so the left
    side is an exact second moment.
    """
    report = VarianceReport(rel_tol=rel_tol)
    D2 = model.space.dist ** 2
    for x in points:
        for t in t_grid:
            w = heat_measure(model, x, t).weights
            w2sq = float(w @ D2[x])
            bound = 2.0 * N * t
            report.rows.append({"x": int(x), "t": float(t), "w2sq": w2sq, "bound": bound,
                                "ratio": w2sq / bound if bound > 0 else 0.0})
    return report
