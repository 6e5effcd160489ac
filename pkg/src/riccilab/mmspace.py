"""Finite metric measure spaces, probability measures and model-space generators."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.sparse.csgraph import shortest_path

logger = logging.getLogger(__name__)

# Relative slack for float drift when checking metric axioms.
METRIC_RTOL = 1e-9
EXHAUSTIVE_TRIANGLE_MAX = 512
TRIANGLE_SAMPLES = 100_000
PRODUCT_SIZE_CAP = 4096


class SpaceValidationError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FiniteMMSpace:
    """n weighted points with a symmetric distance table.

    Only ``dist`` and ``mass`` enter any computation; ``coords`` is
    documentation for generated models.
    """

    dist: np.ndarray
    mass: np.ndarray
    labels: Optional[tuple] = None
    coords: Optional[np.ndarray] = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        dist = np.asarray(self.dist, dtype=float)
        mass = np.asarray(self.mass, dtype=float)
        if mass.ndim != 1 or mass.size == 0:
            raise ValueError("mass must be a non-empty vector")
        n = mass.size
        if dist.shape != (n, n):
            raise ValueError(f"dist must have shape ({n}, {n}), got {dist.shape}")
        if not np.all(np.isfinite(dist)) or not np.all(np.isfinite(mass)):
            raise ValueError("dist and mass must be finite")
        if np.any(dist < 0):
            raise ValueError("negative distance entry")
        if np.any(mass < 0):
            raise ValueError("negative mass entry")
        if mass.sum() <= 0:
            raise ValueError("total mass must be positive")
        if self.labels is not None and len(self.labels) != n:
            raise ValueError("labels length does not match point count")
        object.__setattr__(self, "dist", _frozen(dist))
        object.__setattr__(self, "mass", _frozen(mass))
        if self.coords is not None:
            object.__setattr__(self, "coords", _frozen(self.coords))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n(self) -> int:
        return self.mass.size

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    @property
    def diameter(self) -> float:
        return float(self.dist.max())

    @property
    def probability(self) -> np.ndarray:
        """The normalized reference measure m / m(X)."""
        return self.mass / self.mass.sum()

    def normalized(self) -> "FiniteMMSpace":
        return FiniteMMSpace(self.dist, self.probability, self.labels, self.coords,
                             self.name, dict(self.meta))

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"FiniteMMSpace(name={self.name!r}, n={self.n}, diameter={self.diameter:.6g})"


@dataclass(frozen=True, eq=False)
class ProbMeasure:
    """Probability weights over the points of a space."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def from_weights(cls, w, clip: bool = False) -> "ProbMeasure":
        """Normalize an arbitrary nonnegative vector (optionally clipping round-off negatives)."""
        w = np.asarray(w, dtype=float)
        if clip:
            w = np.clip(w, 0.0, None)
        return cls(w / w.sum())

    @classmethod
    def dirac(cls, n: int, i: int) -> "ProbMeasure":
        w = np.zeros(n)
        w[i] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, n: int) -> "ProbMeasure":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def from_space(cls, space: FiniteMMSpace) -> "ProbMeasure":
        return cls.from_weights(space.mass)

    @property
    def n(self) -> int:
        return self.weights.size

    def __len__(self):
        return self.n

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist()}


@dataclass(frozen=True)
class DistanceHistogram:
    edges: np.ndarray
    masses: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def density(self) -> np.ndarray:
        """Masses normalized to a probability histogram."""
        return self.masses / self.masses.sum()


@dataclass(frozen=True)
class Violation:
    kind: str
    magnitude: float
    where: tuple

    def __str__(self):
        return f"{self.kind}: magnitude {self.magnitude:.3g} at {self.where}"


@dataclass
class ValidationReport:
    n: int
    violations: list = field(default_factory=list)
    triangle_mode: str = "exhaustive"

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.valid

    def summary(self) -> str:
        if self.valid:
            return f"valid ({self.n} points, triangle check {self.triangle_mode})"
        return "; ".join(str(v) for v in self.violations)


def _worst_triangle_exhaustive(D: np.ndarray) -> tuple[float, tuple]:
    # excess[i, k] = D[i, k] - min_j (D[i, j] + D[j, k]), one pivot row at a time
    n = D.shape[0]
    best = -np.inf
    where = (0, 0, 0)
    for j in range(n):
        excess = D - (D[:, j][:, None] + D[j, :][None, :])
        flat = int(np.argmax(excess))
        if excess.flat[flat] > best:
            best = float(excess.flat[flat])
            i, k = divmod(flat, n)
            where = (i, j, k)
    return best, where


def _worst_triangle_sampled(D: np.ndarray, samples: int, seed: int) -> tuple[float, tuple]:
    rng = np.random.default_rng(seed)
    n = D.shape[0]
    i, j, k = rng.integers(0, n, size=(3, samples))
    excess = D[i, k] - D[i, j] - D[j, k]
    a = int(np.argmax(excess))
    return float(excess[a]), (int(i[a]), int(j[a]), int(k[a]))


def validate_space(space: FiniteMMSpace, strict: bool = False, *,
                   samples: int = TRIANGLE_SAMPLES, seed: int = 0) -> ValidationReport:
    """Check the metric and measure axioms of ``space``.

    Every violated invariant is listed with its worst offender. With
    ``strict=True`` the first violation raises :class:`SpaceValidationError`.
    Triangle inequalities are checked over all triples for n <= 512 and
    over ``samples`` random triples above that.
    """
    D = space.dist
    n = space.n
    tol = METRIC_RTOL * max(1.0, float(D.max()))
    mode = "exhaustive" if n <= EXHAUSTIVE_TRIANGLE_MAX else f"sampled({samples})"
    report = ValidationReport(n=n, triangle_mode=mode)

    def flag(kind, magnitude, where):
        v = Violation(kind, float(magnitude), tuple(int(w) for w in where))
        if strict:
            raise SpaceValidationError(str(v))
        report.violations.append(v)

    diag = np.abs(np.diag(D))
    if diag.max() > tol:
        i = int(np.argmax(diag))
        flag("nonzero diagonal", diag[i], (i, i))
    asym = np.abs(D - D.T)
    if asym.max() > tol:
        i, j = np.unravel_index(int(np.argmax(asym)), asym.shape)
        flag("asymmetry", asym[i, j], (i, j))
    if D.min() < 0:
        i, j = np.unravel_index(int(np.argmin(D)), D.shape)
        flag("negative distance", -D[i, j], (i, j))
    if space.mass.min() < 0:
        i = int(np.argmin(space.mass))
        flag("negative mass", -space.mass[i], (i,))
    if space.mass.sum() <= 0:
        flag("zero total mass", 0.0, ())
    if n >= 3:
        if n <= EXHAUSTIVE_TRIANGLE_MAX:
            excess, where = _worst_triangle_exhaustive(D)
        else:
            excess, where = _worst_triangle_sampled(D, samples, seed)
        if excess > tol:
            flag("triangle inequality", excess, where)
    return report


# --- generators -------------------------------------------------------------

def circle(circumference: float, n: int) -> FiniteMMSpace:
    """``n`` equispaced points on a circle with arc-length distance and uniform mass."""
    if circumference <= 0:
        raise ValueError("circumference must be positive")
    if n < 3:
        raise ValueError("circle needs n >= 3")
    k = np.arange(n)
    steps = np.abs(k[:, None] - k[None, :])
    steps = np.minimum(steps, n - steps)
    dist = steps * (circumference / n)
    angle = 2 * np.pi * k / n
    radius = circumference / (2 * np.pi)
    coords = radius * np.c_[np.cos(angle), np.sin(angle)]
    return FiniteMMSpace(dist, np.full(n, 1.0 / n), coords=coords,
                         name=f"circle({circumference:.6g},{n})",
                         meta={"generator": "circle",
                               "params": {"circumference": circumference, "n": n}})


def interval_model(N: float, n: int) -> FiniteMMSpace:
    """The one-dimensional model ([0, pi], |.|, sin^(N-1)(r) dr) on ``n`` cell midpoints.

    Cell masses are integrated exactly (adaptive quadrature) rather than
    sampled at the nodes, which keeps the endpoint cells accurate.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if n < 2:
        raise ValueError("interval_model needs n >= 2")
    edges = np.linspace(0.0, np.pi, n + 1)
    r = 0.5 * (edges[1:] + edges[:-1])
    if N == 1:
        mass = np.full(n, 1.0 / n)
        total = np.pi
    else:
        cell = np.array([integrate.quad(lambda s: np.sin(s) ** (N - 1), a, b,
                                        epsabs=0, epsrel=1e-13)[0]
                         for a, b in zip(edges[:-1], edges[1:])])
        cell = 0.5 * (cell + cell[::-1])  # exact symmetry about pi/2
        total = float(cell.sum())
        mass = cell / total
    dist = np.abs(r[:, None] - r[None, :])
    return FiniteMMSpace(dist, mass, coords=r[:, None], name=f"interval_model({N:g},{n})",
                         meta={"generator": "interval_model", "params": {"N": N, "n": n},
                               "unnormalized_mass": total})


def fibonacci_points(n: int) -> np.ndarray:
    """Unit vectors of the golden-angle spiral lattice on S^2."""
    k = np.arange(n)
    z = 1.0 - (2.0 * k + 1.0) / n
    phi = k * np.pi * (3.0 - np.sqrt(5.0))
    rad = np.sqrt(1.0 - z * z)
    return np.c_[rad * np.cos(phi), rad * np.sin(phi), z]


def great_circle_distances(P: np.ndarray) -> np.ndarray:
    """Angles between unit vectors, via atan2 for accuracy at both ends."""
    cross = np.linalg.norm(np.cross(P[:, None, :], P[None, :, :]), axis=-1)
    dot = P @ P.T
    D = np.arctan2(cross, dot)
    np.fill_diagonal(D, 0.0)
    return D


def sphere_fibonacci(N: int, radius: float, n: int) -> FiniteMMSpace:
    """Near-uniform sample of the round N-sphere (N in {1, 2}) with uniform mass."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if N == 1:
        space = circle(2 * np.pi * radius, n)
        return FiniteMMSpace(space.dist, space.mass, coords=space.coords,
                             name=f"sphere_fibonacci(1,{radius:.6g},{n})",
                             meta={"generator": "sphere_fibonacci",
                                   "params": {"N": 1, "radius": radius, "n": n}})
    if N != 2:
        raise ValueError("sphere_fibonacci supports N in {1, 2}; use suspension for higher spheres")
    if n < 12:
        raise ValueError("sphere_fibonacci(2, ...) needs n >= 12")
    P = fibonacci_points(n)
    dist = radius * great_circle_distances(P)
    return FiniteMMSpace(dist, np.full(n, 1.0 / n), coords=radius * P,
                         name=f"sphere_fibonacci(2,{radius:.6g},{n})",
                         meta={"generator": "sphere_fibonacci",
                               "params": {"N": 2, "radius": radius, "n": n}})


def product_space(X: FiniteMMSpace, Y: FiniteMMSpace, max_points: int = PRODUCT_SIZE_CAP) -> FiniteMMSpace:
    """Riemannian product: distance sqrt(dX^2 + dY^2), normalized product measure.

    Point (i, j) gets index ``i * len(Y) + j``.
    """
    n = X.n * Y.n
    if n > max_points:
        raise ValueError(f"product has {n} points, above the cap of {max_points}")
    dX2 = X.dist ** 2
    dY2 = Y.dist ** 2
    dist = np.sqrt(dX2[:, None, :, None] + dY2[None, :, None, :]).reshape(n, n)
    mass = np.outer(X.probability, Y.probability).ravel()
    labels = tuple(f"{i},{j}" for i in range(X.n) for j in range(Y.n))
    return FiniteMMSpace(dist, mass, labels=labels, name=f"{X.name}x{Y.name}",
                         meta={"generator": "product_space",
                               "params": {"X": X.name, "Y": Y.name}})


def perturb_metric(space: FiniteMMSpace, eta: float, seed: int = 0) -> FiniteMMSpace:
    """Multiply each distance by 1 + eta * U(-1, 1), then repair to a metric by shortest paths.

    The noise is symmetric, so the result is a metric again once every
    pair is replaced by its shortest path length. The measure is kept.
    """
    if not 0 <= eta < 1:
        raise ValueError("eta must lie in [0, 1)")
    if eta == 0:
        return space
    rng = np.random.default_rng(seed)
    noise = np.triu(rng.uniform(-1.0, 1.0, size=(space.n, space.n)), 1)
    D = space.dist * (1.0 + eta * (noise + noise.T))
    D = shortest_path(D, method="D", directed=False)
    D = 0.5 * (D + D.T)
    meta = dict(space.meta)
    meta["perturbation"] = {"eta": float(eta), "seed": int(seed), "repair": "shortest_path"}
    return FiniteMMSpace(D, space.mass, labels=space.labels, coords=space.coords,
                         name=f"{space.name}~{eta:g}", meta=meta)


def distance_histogram(space: FiniteMMSpace, bins: int, upper: Optional[float] = None) -> DistanceHistogram:
    """m x m weighted histogram of pairwise distances, diagonal included.

    Bins cover [0, diameter] unless ``upper`` is given.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    top = space.diameter if upper is None else float(upper)
    if top <= 0:
        top = 1.0
    edges = np.linspace(0.0, top, bins + 1)
    W = np.outer(space.mass, space.mass)
    D = np.minimum(space.dist, top)
    masses, _ = np.histogram(D.ravel(), bins=edges, weights=W.ravel())
    return DistanceHistogram(edges, masses)


# --- serialization ----------------------------------------------------------

def space_to_json(space: FiniteMMSpace) -> dict:
    doc: dict[str, Any] = {
        "name": space.name,
        "n": space.n,
        "dist": space.dist.ravel().tolist(),
        "mass": space.mass.tolist(),
        "meta": {"generator": space.meta.get("generator", "unknown"),
                 "params": space.meta.get("params", {})},
    }
    for key, value in space.meta.items():
        if key not in ("generator", "params"):
            doc["meta"][key] = value
    if space.labels is not None:
        doc["labels"] = list(space.labels)
    if space.coords is not None:
        doc["coords"] = space.coords.tolist()
    return doc


def space_from_json(doc: dict, validate: bool = True) -> FiniteMMSpace:
    n = int(doc["n"])
    dist = np.asarray(doc["dist"], dtype=float)
    if dist.size != n * n:
        raise ValueError(f"dist has {dist.size} entries, expected {n * n}")
    space = FiniteMMSpace(dist.reshape(n, n), np.asarray(doc["mass"], dtype=float),
                          labels=doc.get("labels"),
                          coords=None if doc.get("coords") is None else np.asarray(doc["coords"]),
                          name=doc.get("name", ""), meta=dict(doc.get("meta", {})))
    if validate:
        validate_space(space, strict=True)
    return space


def save_space(space: FiniteMMSpace, path) -> None:
    Path(path).write_text(json.dumps(space_to_json(space)))


def load_space(path, validate: bool = True) -> FiniteMMSpace:
    return space_from_json(json.loads(Path(path).read_text()), validate=validate)


def load_measure(path, n: Optional[int] = None) -> ProbMeasure:
    doc = json.loads(Path(path).read_text())
    mu = ProbMeasure(np.asarray(doc["weights"], dtype=float))
    if n is not None and mu.n != n:
        raise ValueError(f"measure has {mu.n} weights, space has {n} points")
    return mu


def save_measure(mu: ProbMeasure, path) -> None:
    Path(path).write_text(json.dumps(mu.to_json()))


def as_weights(mu, n: Optional[int] = None) -> np.ndarray:
    w = mu.weights if isinstance(mu, ProbMeasure) else np.asarray(mu, dtype=float)
    if n is not None and w.size != n:
        raise ValueError(f"measure has {w.size} weights, expected {n}")
    return w


def point_index(space: FiniteMMSpace, point) -> int:
    """Resolve an integer index or a label to a point index."""
    if isinstance(point, (int, np.integer)):
        if not 0 <= point < space.n:
            raise IndexError(f"point {point} out of range for {space.n} points")
        return int(point)
    if space.labels is not None and point in space.labels:
        return space.labels.index(point)
    raise KeyError(f"unknown point {point!r}")


def nearest_point(space: FiniteMMSpace, x: int, target_distance: float,
                  candidates: Optional[Sequence[int]] = None) -> int:
    """Index of the point whose distance from ``x`` is closest to ``target_distance``."""
    row = space.dist[x]
    idx = np.arange(space.n) if candidates is None else np.asarray(candidates)
    return int(idx[np.argmin(np.abs(row[idx] - target_distance))])
