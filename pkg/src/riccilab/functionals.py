"""Mean-distance functionals, their sharp model values, cos-potential and entropy."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import integrate

from .mmspace import FiniteMMSpace, as_weights, distance_histogram

DIAMETER_TOL = 1e-9
BUILTIN = ("identity", "square", "cos")


@dataclass(frozen=True)
class KernelFunction:
    """A monotone function on [0, pi]: a builtin tag or a knot table.

    Knot tables are interpolated piecewise linearly, which preserves the
    flagged monotonicity.
    """

    tag: str = "identity"
    increasing: Optional[bool] = None
    knots: Optional[tuple] = None
    values: Optional[tuple] = None
    max_jump: float = np.inf

    def __post_init__(self):
        if self.tag in BUILTIN:
            natural = self.tag != "cos"
            if self.increasing is None:
                object.__setattr__(self, "increasing", natural)
            elif self.increasing != natural:
                raise ValueError(f"{self.tag} is {'increasing' if natural else 'decreasing'} on [0, pi]")
            return
        if self.tag != "custom":
            raise ValueError(f"unknown kernel tag {self.tag!r}")
        if self.knots is None or self.values is None:
            raise ValueError("custom kernels need knots and values")
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if k.shape != v.shape or k.size < 2:
            raise ValueError("knots and values must be matching arrays of length >= 2")
        if np.any(np.diff(k) <= 0) or k[0] > 0 or k[-1] < np.pi:
            raise ValueError("knots must increase and cover [0, pi]")
        dv = np.diff(v)
        inc = True if self.increasing is None else bool(self.increasing)
        if (inc and np.any(dv < 0)) or (not inc and np.any(dv > 0)):
            raise ValueError("custom table is not monotone as flagged")
        if np.any(np.abs(dv) > self.max_jump):
            raise ValueError("custom table jumps more than max_jump between adjacent knots")
        object.__setattr__(self, "increasing", inc)
        object.__setattr__(self, "knots", tuple(k))
        object.__setattr__(self, "values", tuple(v))

    @classmethod
    def parse(cls, spec: Union[str, "KernelFunction"]) -> "KernelFunction":
        if isinstance(spec, KernelFunction):
            return spec
        return cls(tag=spec)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.tag == "identity":
            return r
        if self.tag == "square":
            return r * r
        if self.tag == "cos":
            return np.cos(r)
        return np.interp(r, self.knots, self.values)


def _check_diameter(space: FiniteMMSpace, clamp: bool) -> np.ndarray:
    diam = space.diameter
    if diam > np.pi + DIAMETER_TOL:
        if not clamp:
            raise ValueError(f"diameter {diam:.6g} exceeds pi; f is only defined on [0, pi]")
        warnings.warn(f"diameter {diam:.6g} exceeds pi; clamping distances", stacklevel=3)
        return np.minimum(space.dist, np.pi)
    return np.minimum(space.dist, np.pi)


def _weighted_rows(F: np.ndarray, w: np.ndarray) -> np.ndarray:
    # elementwise product then numpy pairwise sum: independent of BLAS threading
    return (F * w[None, :]).sum(axis=1)


def m_f(space: FiniteMMSpace, f="identity", *, clamp: bool = False) -> float:
    """Average of f(d(x, y)) over m x m, normalized by m(X)^2 (diagonal included)."""
    f = KernelFunction.parse(f)
    D = _check_diameter(space, clamp)
    w = space.probability
    return float(np.sum(_weighted_rows(f(D), w) * w))


def m_f_star(N: float, f="identity", quad_n: int = 64) -> float:
    """Model value: integral of f(r) sin^(N-1)(r) over [0, pi], divided by that of sin^(N-1)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if quad_n < 64:
        raise ValueError("quad_n must be >= 64")
    f = KernelFunction.parse(f)
    weight = lambda r: np.sin(r) ** (N - 1)
    points = None if f.knots is None else [k for k in f.knots if 0 < k < np.pi][: quad_n // 2]
    den = integrate.quad(weight, 0, np.pi, epsabs=0, epsrel=1e-13, limit=quad_n)[0]
    num, err, info, *msg = integrate.quad(lambda r: float(f(r)) * weight(r), 0, np.pi, full_output=1,
                                          epsabs=1e-13 * den, epsrel=1e-12, limit=quad_n, points=points)
    # ier 2 (roundoff) is harmless for integrands that vanish exactly, like cos
    ier = 0 if not msg else 1
    if ier and err > 1e-10 * den:
        raise ArithmeticError(f"quadrature did not converge: {msg[0]}")
    return num / den


def cos_potential(space: FiniteMMSpace, x0: int) -> float:
    """Integral of cos(d(x0, y)) against the normalized measure."""
    d = np.minimum(space.dist[x0], np.pi)
    return float(np.sum(np.cos(d) * space.probability))


def cos_potentials(space: FiniteMMSpace) -> np.ndarray:
    """:func:`cos_potential` at every point."""
    return _weighted_rows(np.cos(np.minimum(space.dist, np.pi)), space.probability)


def suspension_cos_factor(N: float) -> float:
    """(int sin^(N+1) / int sin^N)^2 over [0, pi]: M_cos of the (1, N)-suspension over X is this times M_cos(X)."""
    num = integrate.quad(lambda s: np.sin(s) ** (N + 1), 0, np.pi, epsabs=0, epsrel=1e-13)[0]
    den = integrate.quad(lambda s: np.sin(s) ** N, 0, np.pi, epsabs=0, epsrel=1e-13)[0]
    return float((num / den) ** 2)


def entropy(mu, space: FiniteMMSpace) -> float:
    """Relative entropy sum mu_i log(mu_i / m_i); ``inf`` if mu charges a null point."""
    w = as_weights(mu, space.n)
    m = space.mass
    pos = w > 0
    if np.any(m[pos] == 0):
        return np.inf
    return float(np.sum(w[pos] * np.log(w[pos] / m[pos])))


def model_histogram(N: float, edges: np.ndarray) -> np.ndarray:
    """Probability of each distance bin under sin^(N-1)(r) dr / Z on [0, pi]."""
    weight = lambda r: np.sin(r) ** (N - 1)
    e = np.clip(edges, 0, np.pi)
    p = np.array([integrate.quad(weight, a, b, epsabs=0, epsrel=1e-12)[0] for a, b in zip(e[:-1], e[1:])])
    return p / integrate.quad(weight, 0, np.pi, epsabs=0, epsrel=1e-13)[0]


@dataclass
class RigidityReport:
    """M_f against the model value, plus diagnostics.

    ``gap`` is oriented so that the comparison inequality reads gap >= 0.
    ``discrepancy`` is the L1 distance between the normalized distance
    histogram and the model density: a proxy for closeness to the model,
    not a bound on any Gromov-Hausdorff distance.
    """

    m_f: float
    m_f_star: float
    gap: float
    worst_cos_potential: float
    worst_point: int
    discrepancy: float
    f: str
    N: float
    bins: int
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"m_f": self.m_f, "m_f_star": self.m_f_star, "gap": self.gap,
                "worst_cos_potential": self.worst_cos_potential, "worst_point": self.worst_point,
                "discrepancy": self.discrepancy, "discrepancy_kind": "L1 histogram proxy",
                "f": self.f, "N": self.N, "bins": self.bins, "provenance": self.provenance}


def rigidity_report(space: FiniteMMSpace, f, N: float, *, bins: int = 64, clamp: bool = False,
                    quad_n: int = 64) -> RigidityReport:
    f = KernelFunction.parse(f)
    value = m_f(space, f, clamp=clamp)
    star = m_f_star(N, f, quad_n)
    gap = star - value if f.increasing else value - star
    pots = cos_potentials(space)
    worst = int(np.argmin(pots))
    hist = distance_histogram(space, bins, upper=np.pi)
    discrepancy = float(np.abs(hist.density() - model_histogram(N, hist.edges)).sum())
    tag = f.tag
    return RigidityReport(m_f=value, m_f_star=star, gap=gap, worst_cos_potential=float(pots[worst]),
                          worst_point=worst, discrepancy=discrepancy, f=tag, N=float(N), bins=bins,
                          provenance={"space": space.name, "space_meta": space.meta, "f": tag,
                                      "quad_n": quad_n, "quad_epsrel": 1e-12})
