"""Independent reference solvers used only by the tests."""

import itertools
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def _bases(m: int, n: int):
    """Transportation constraint matrix (last row dropped) and all column subsets of basis size."""
    A = np.zeros((m + n, m * n))
    for i in range(m):
        A[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A[m + j, j::n] = 1.0
    A = A[:-1]
    k = m + n - 1
    subsets = np.array(list(itertools.combinations(range(m * n), k)), dtype=int)
    return A, subsets


def lp_vertex_enumeration(a, b, C) -> float:
    """Exact discrete OT by enumerating every basic solution of the transportation polytope.

    The constraint matrix is totally unimodular, so each basis has determinant
    0 or +-1; nonsingular bases are solved in one batch and the cheapest
    feasible vertex is the optimum.
    """
    a, b, C = np.asarray(a, float), np.asarray(b, float), np.asarray(C, float)
    m, n = a.size, b.size
    if m == 1 or n == 1:
        return float(np.sum(np.outer(a, b) * C))
    A, subsets = _bases(m, n)
    rhs = np.r_[a, b][:-1]
    B = A[:, subsets].transpose(1, 0, 2)  # (s, k, k)
    det = np.linalg.det(B)
    ok = np.abs(det) > 0.5
    x = np.linalg.solve(B[ok], np.broadcast_to(rhs, (ok.sum(), rhs.size))[..., None])[..., 0]
    feasible = np.all(x >= -1e-12, axis=1)
    costs = np.sum(x[feasible] * C.ravel()[subsets[ok][feasible]], axis=1)
    return float(costs.min())


def brute_product_cost(cone, wp, wo) -> float:
    D = cone.space.dist
    return float(wp @ (D * D) @ wo)
