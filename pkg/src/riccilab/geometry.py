"""Comparison functions, distortion coefficients, (K, N)-cones and volume comparison."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import integrate

from .mmspace import FiniteMMSpace, ProbMeasure, as_weights, space_from_json, space_to_json

logger = logging.getLogger(__name__)

DIAMETER_TOL = 1e-9
_ROW_BLOCK = 512


def s_kappa(kappa, theta):
    """Generalized sine: sin(sqrt(k) t)/sqrt(k), t, or sinh(sqrt(-k) t)/sqrt(-k)."""
    kappa = float(kappa)
    theta = np.asarray(theta, dtype=float)
    if kappa > 0:
        rk = np.sqrt(kappa)
        out = np.sin(rk * theta) / rk
    elif kappa < 0:
        rk = np.sqrt(-kappa)
        out = np.sinh(rk * theta) / rk
    else:
        out = theta.copy()
    return out if out.ndim else float(out)


def c_kappa(kappa, theta):
    """Derivative of :func:`s_kappa` in theta."""
    kappa = float(kappa)
    theta = np.asarray(theta, dtype=float)
    if kappa > 0:
        out = np.cos(np.sqrt(kappa) * theta)
    elif kappa < 0:
        out = np.cosh(np.sqrt(-kappa) * theta)
    else:
        out = np.ones_like(theta)
    return out if out.ndim else float(out)


def sigma(t: float, kappa: float, theta: float) -> float:
    """Distortion coefficient sigma_kappa^(t)(theta); ``inf`` once kappa*theta^2 >= pi^2."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    k2 = kappa * theta * theta
    if k2 >= np.pi ** 2:
        return np.inf
    if k2 == 0.0:
        return float(t)
    if k2 > 0:
        a = np.sqrt(kappa) * theta
        return float(np.sin(t * a) / np.sin(a))
    a = np.sqrt(-kappa) * theta
    return float(np.sinh(t * a) / np.sinh(a))


def tau(t: float, K: float, N: float, theta: float) -> float:
    """tau_{K/N}^(t)(theta) = t^(1/N) * sigma_{K/(N-1)}^(t)(theta)^(1 - 1/N)."""
    if N <= 1:
        raise ValueError("tau needs N > 1")
    s = sigma(t, K / (N - 1), theta)
    if np.isinf(s):
        return np.inf
    return float(t ** (1.0 / N) * s ** (1.0 - 1.0 / N))


# --- radial grids -----------------------------------------------------------

def parse_grid(spec) -> np.ndarray:
    """Radial nodes from ``"geo:m:rmin:rmax"``, ``"lin:m:rmin:rmax"`` or an array.

    Specs joined by ``+`` are concatenated, e.g. ``"geo:16:0.002:0.04+lin:40:0.05:2"``
    refines the vertex region geometrically and keeps a uniform grid further out.
    Geometric grids are the default kind because short-time experiments
    probe radii of order sqrt(t) near the vertex.
    """
    if isinstance(spec, str) and "+" in spec:
        nodes = np.concatenate([parse_grid(part) for part in spec.split("+")])
    elif isinstance(spec, str):
        parts = spec.split(":")
        if len(parts) != 4 or parts[0] not in ("geo", "lin"):
            raise ValueError(f"bad grid spec {spec!r}; expected geo|lin:m:rmin:rmax")
        m, lo, hi = int(parts[1]), float(parts[2]), float(parts[3])
        if m < 1 or not 0 < lo <= hi:
            raise ValueError(f"bad grid spec {spec!r}")
        nodes = np.geomspace(lo, hi, m) if parts[0] == "geo" else np.linspace(lo, hi, m)
    else:
        nodes = np.atleast_1d(np.asarray(spec, dtype=float))
    if nodes.size < 1 or np.any(nodes <= 0) or np.any(np.diff(nodes) <= 0):
        raise ValueError("radial grid must be positive and strictly increasing")
    return nodes


def cell_edges(nodes: np.ndarray, upper: Optional[float] = None) -> np.ndarray:
    """Edges of the radial cells around ``nodes`` (which start at the vertex, 0).

    Interior edges are midpoints. The outer edge is ``upper`` if given,
    otherwise the last node plus half the last spacing.
    """
    nodes = np.asarray(nodes, dtype=float)
    mids = 0.5 * (nodes[1:] + nodes[:-1])
    if upper is None:
        upper = nodes[-1] + 0.5 * (nodes[-1] - nodes[-2]) if nodes.size > 1 else nodes[-1]
    return np.r_[0.0, mids, upper]


def radial_cell_masses(edges: np.ndarray, K: float, N: float) -> np.ndarray:
    """Integral of s_K(r)^N over each radial cell."""
    if K == 0:
        return (edges[1:] ** (N + 1) - edges[:-1] ** (N + 1)) / (N + 1)
    return np.array([integrate.quad(lambda r: s_kappa(K, r) ** N, a, b,
                                    epsabs=0, epsrel=1e-12, limit=200)[0]
                     for a, b in zip(edges[:-1], edges[1:])])


def cone_distance(r, s, beta, K: float):
    """Cone distance between (r, x) and (s, y) with beta = d_X(x, y) (already clamped).

    Written in half-angle form so that nearby points and antipodal points
    keep full relative precision; algebraically this is the law of cosines
    of the (K, N)-cone.
    """
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    half = np.sin(0.5 * np.asarray(beta, dtype=float))
    if K == 0:
        return np.sqrt((r - s) ** 2 + 4.0 * r * s * half ** 2)
    rk = np.sqrt(K)
    R, S = rk * r, rk * s
    prod = np.sin(R) * np.sin(S)
    h = np.sin(0.5 * (R - S)) ** 2 + prod * half ** 2
    g = np.cos(0.5 * (R + S)) ** 2 + prod * (1.0 - half ** 2)
    return 2.0 * np.arctan2(np.sqrt(np.maximum(h, 0.0)), np.sqrt(np.maximum(g, 0.0))) / rk


@dataclass(frozen=True, eq=False)
class ConeSpace:
    """Discretized (K, N)-cone over a finite base.

    Point 0 is the vertex; point ``1 + i * len(base) + x`` sits at radius
    ``grid[i]`` over base point ``x``; for K > 0 the last point is the
    collapsed far pole at radius pi/sqrt(K).
    """

    base: FiniteMMSpace
    K: float
    N: float
    grid: np.ndarray
    edges: np.ndarray
    cell_mass: np.ndarray
    space: FiniteMMSpace
    radius: np.ndarray
    base_index: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def nb(self) -> int:
        return self.base.n

    @property
    def vertex(self) -> int:
        return 0

    @property
    def far_pole(self) -> Optional[int]:
        return self.n - 1 if self.K > 0 else None

    @property
    def nodes(self) -> np.ndarray:
        """Radii of all radial cells, vertex (and far pole) included."""
        if self.K > 0:
            return np.r_[0.0, self.grid, np.pi / np.sqrt(self.K)]
        return np.r_[0.0, self.grid]

    def index(self, i: int, x: int) -> int:
        """Point index of radial node ``i`` (0-based into ``grid``) over base point ``x``."""
        if not 0 <= i < self.grid.size or not 0 <= x < self.nb:
            raise IndexError("cone cell out of range")
        return 1 + i * self.nb + x

    def nearest_index(self, r: float, x: int) -> int:
        return self.index(int(np.argmin(np.abs(self.grid - r))), x)

    def radial_marginal(self, mu) -> np.ndarray:
        """Mass per radial cell (vertex first, far pole last when present)."""
        w = as_weights(mu, self.n)
        body = w[1:1 + self.grid.size * self.nb].reshape(self.grid.size, self.nb).sum(axis=1)
        out = np.r_[w[0], body]
        if self.K > 0:
            out = np.r_[out, w[-1]]
        return out

    def base_marginal(self, mu) -> np.ndarray:
        """Mass per base point of the non-pole part of ``mu``."""
        w = as_weights(mu, self.n)
        return w[1:1 + self.grid.size * self.nb].reshape(self.grid.size, self.nb).sum(axis=0)

    def to_json(self) -> dict:
        doc = space_to_json(self.space)
        doc["meta"]["cone"] = {"K": self.K, "N": self.N, "grid": self.grid.tolist(),
                               "base": self.base.name, "base_space": space_to_json(self.base)}
        return doc

    def __repr__(self):
        return (f"ConeSpace(K={self.K:g}, N={self.N:g}, base={self.base.name!r}, "
                f"radial={self.grid.size}, n={self.n})")


def build_cone(base: FiniteMMSpace, K: float, N: float, radial_grid="geo:64:0.01:4.0") -> ConeSpace:
    """Discretize the (K, N)-cone over ``base``.

    The radial measure of each cell is the integral of s_K(r)^N over the
    cell, times the normalized base measure. Base distances above pi are
    clamped (the ``d_X ^ pi`` in the cone metric) with a warning.
    """
    if base.n == 0:
        raise ValueError("empty base")
    if K < 0:
        raise ValueError("cones need K >= 0")
    if N < 1:
        raise ValueError("cones need N >= 1")
    grid = parse_grid(radial_grid)
    if K > 0:
        top = np.pi / np.sqrt(K)
        if grid[-1] >= top:
            raise ValueError(f"radial grid must lie in (0, {top:.6g}) for K={K:g}")
        nodes = np.r_[0.0, grid, top]
        edges = np.r_[0.0, 0.5 * (nodes[1:] + nodes[:-1]), top]
    else:
        nodes = np.r_[0.0, grid]
        edges = cell_edges(nodes)
    cell = radial_cell_masses(edges, K, N)

    if base.diameter > np.pi + DIAMETER_TOL:
        warnings.warn(f"base diameter {base.diameter:.6g} exceeds pi; clamping base distances",
                      stacklevel=2)
    beta_base = np.minimum(base.dist, np.pi)
    nb, m = base.n, grid.size
    radius = np.r_[0.0, np.repeat(grid, nb)]
    bidx = np.r_[-1, np.tile(np.arange(nb), m)]
    mbase = base.probability
    mass = np.r_[cell[0], (cell[1:m + 1][:, None] * mbase[None, :]).ravel()]
    if K > 0:
        radius = np.r_[radius, nodes[-1]]
        bidx = np.r_[bidx, -1]
        mass = np.r_[mass, cell[-1]]
    mass = mass / mass.sum()

    n = radius.size
    dist = np.empty((n, n))
    # poles have no base coordinate; any beta works since sin(r) = 0 there
    bsafe = np.where(bidx < 0, 0, bidx)
    for lo in range(0, n, _ROW_BLOCK):
        hi = min(n, lo + _ROW_BLOCK)
        beta = beta_base[bsafe[lo:hi][:, None], bsafe[None, :]]
        dist[lo:hi] = cone_distance(radius[lo:hi, None], radius[None, :], beta, K)
    np.fill_diagonal(dist, 0.0)
    dist = 0.5 * (dist + dist.T)

    labels = ("o",) + tuple(f"{r:.6g}@{x}" for r in grid for x in range(nb))
    if K > 0:
        labels = labels + ("o'",)
    kind = "suspension" if K == 1 else "cone"
    view = FiniteMMSpace(dist, mass, labels=labels, name=f"{kind}(K={K:g},N={N:g},{base.name})",
                         meta={"generator": "build_cone",
                               "params": {"K": K, "N": N, "base": base.name, "grid": grid.tolist()}})
    return ConeSpace(base=base, K=float(K), N=float(N), grid=grid, edges=edges, cell_mass=cell,
                     space=view, radius=radius, base_index=bidx)


def suspension(base: FiniteMMSpace, N: float, grid=63) -> ConeSpace:
    """Spherical suspension: the (1, N)-cone. An integer ``grid`` means that many equispaced interior radii."""
    if isinstance(grid, (int, np.integer)):
        grid = np.pi * np.arange(1, grid + 1) / (grid + 1)
    return build_cone(base, 1.0, N, grid)


@dataclass(frozen=True)
class PushforwardResult:
    measure: ProbMeasure
    overflow: float


OVERFLOW_WARN = 1e-6


def homothety_pushforward(cone: ConeSpace, mu, lam: float, *, full: bool = False):
    """Push ``mu`` forward under the dilation (s, y) -> (lam * s, y) of a flat cone.

    Each radial cell's mass is spread uniformly in r over its dilated image
    and split among the overlapped cells. Mass dilated beyond the outer
    edge lands in the outermost cell and is reported as overflow.
    """
    if cone.K != 0:
        raise ValueError("homothety_pushforward needs a flat (K=0) cone")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    w = as_weights(mu, cone.n)
    m, nb = cone.grid.size, cone.nb
    edges = cone.edges
    lo, hi = lam * edges[:-1], lam * edges[1:]
    # overlap[i, j] = |[lo_i, hi_i] & [e_j, e_j+1]| / |[lo_i, hi_i]|
    a = np.maximum(lo[:, None], edges[None, :-1])
    b = np.minimum(hi[:, None], edges[None, 1:])
    T = np.clip(b - a, 0.0, None) / (hi - lo)[:, None]
    spill = 1.0 - T.sum(axis=1)
    T[:, -1] += spill

    src = np.zeros((m + 1, nb))
    src[1:] = w[1:].reshape(m, nb)
    mbase = cone.base.probability
    src[0] = w[0] * mbase  # vertex mass is spread over the base like the measure
    out = T.T @ src
    new = np.r_[out[0].sum(), out[1:].ravel()]
    overflow = float(spill @ src.sum(axis=1))
    if overflow > OVERFLOW_WARN:
        warnings.warn(f"homothety pushes mass {overflow:.3g} beyond the radial grid", stacklevel=2)
    measure = ProbMeasure.from_weights(np.clip(new, 0.0, None))
    return PushforwardResult(measure, overflow) if full else measure


# --- Bishop-Gromov ----------------------------------------------------------

@dataclass(frozen=True)
class ComparisonProfile:
    """Measured ball masses against the (K, N) model volume profile."""

    r: np.ndarray
    v: np.ndarray
    s: np.ndarray
    model_v: np.ndarray
    model_area: np.ndarray
    margins: np.ndarray
    degenerate: tuple = ()

    @property
    def min_margin(self) -> float:
        return float(self.margins.min())

    @property
    def max_abs_margin(self) -> float:
        return float(np.abs(self.margins).max())

    def to_json(self) -> dict:
        return {k: (getattr(self, k).tolist() if isinstance(getattr(self, k), np.ndarray)
                    else list(getattr(self, k)))
                for k in ("r", "v", "s", "model_v", "model_area", "margins", "degenerate")}


def model_volume(r_grid, K: float, N: float) -> np.ndarray:
    """Cumulative integral of s_{K/(N-1)}(t)^(N-1) from 0 to each r (flat profile r for N=1)."""
    r_grid = np.asarray(r_grid, dtype=float)
    if N == 1:
        return r_grid.copy()
    kappa = K / (N - 1)
    pieces = np.r_[0.0, r_grid]
    incr = [integrate.quad(lambda t: s_kappa(kappa, t) ** (N - 1), a, b,
                           epsabs=0, epsrel=1e-12, limit=200)[0]
            for a, b in zip(pieces[:-1], pieces[1:])]
    return np.cumsum(incr)


def bishop_gromov_check(space: FiniteMMSpace, x0: int, K: float, N: float, r_grid) -> ComparisonProfile:
    """Volume-ratio margins v(r)/v(R) - V(r)/V(R) around ``x0`` with R = max(r_grid).

    The shell profile s(r) is a symmetric difference quotient of v and is
    informational only.
    """
    r = np.asarray(r_grid, dtype=float)
    if r.ndim != 1 or r.size < 1 or np.any(r <= 0) or np.any(np.diff(r) <= 0):
        raise ValueError("r_grid must be positive and increasing")
    if N < 1:
        raise ValueError("N must be >= 1")
    if K > 0 and N > 1 and r[-1] > np.pi * np.sqrt((N - 1) / K) + 1e-12:
        raise ValueError("r_grid exceeds the model diameter pi*sqrt((N-1)/K)")
    d = space.dist[x0]
    order = np.argsort(d, kind="stable")
    cum = np.cumsum(space.mass[order])
    # closed balls, with slack for float ties
    counts = np.searchsorted(d[order], r * (1 + 1e-12), side="right")
    v = cum[counts - 1]
    degenerate = tuple(int(i) for i in np.flatnonzero(counts <= 1))
    V = model_volume(r, K, N)
    margins = v / v[-1] - V / V[-1]
    s = np.gradient(v, r) if r.size > 1 else np.zeros(1)
    if N == 1:
        area = np.ones_like(r)
    else:
        area = s_kappa(K / (N - 1), r) ** (N - 1)
    if degenerate:
        logger.info("balls around %d contain only the center at %d radii", x0, len(degenerate))
    return ComparisonProfile(r=r, v=v, s=np.asarray(s), model_v=V, model_area=np.asarray(area),
                             margins=margins, degenerate=degenerate)


def cone_from_json(doc: dict) -> dict:
    """Cone meta block of a serialized cone (the view itself loads as a space)."""
    return dict(doc.get("meta", {}).get("cone", {}))


def cone_from_doc(doc: dict) -> ConeSpace:
    """Rebuild a cone from its serialized form (needs the embedded base)."""
    block = cone_from_json(doc)
    if "base_space" not in block:
        raise ValueError("cone document carries no base space")
    base = space_from_json(block["base_space"])
    return build_cone(base, block["K"], block["N"], np.asarray(block["grid"], dtype=float))


def load_cone(path) -> ConeSpace:
    with open(path) as fh:
        return cone_from_doc(json.load(fh))


def dump_cone(cone: ConeSpace, path) -> None:
    with open(path, "w") as fh:
        json.dump(cone.to_json(), fh)
