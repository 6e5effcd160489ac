import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riccilab.functionals import m_f, suspension_cos_factor
from riccilab.geometry import (bishop_gromov_check, build_cone, c_kappa, cone_distance, cone_from_doc,
                               homothety_pushforward, load_cone, parse_grid, s_kappa, sigma, suspension,
                               tau, dump_cone)
from riccilab.mmspace import (FiniteMMSpace, circle, great_circle_distances, interval_model, sphere_fibonacci,
                              validate_space)


def test_s_and_c_kappa():
    assert s_kappa(0, 0.7) == pytest.approx(0.7)
    assert c_kappa(0, 0.7) == 1.0
    assert s_kappa(1, np.pi / 2) == pytest.approx(1.0)
    assert s_kappa(-1, 1) == pytest.approx(1.1752011936438014, abs=1e-12)


def test_sigma_examples():
    assert sigma(0.3, 0, 2.0) == 0.3
    assert sigma(0.5, 1, np.pi / 2) == pytest.approx(np.sqrt(0.5), abs=1e-12)
    assert sigma(0.3, 4, np.pi) == np.inf


def test_tau_examples():
    assert tau(0.4, 0, 3, 1.0) == pytest.approx(0.4)
    assert tau(1.0, 2, 3, 1.0) == pytest.approx(1.0)
    assert tau(0.5, 1, 2, np.pi / 2) == pytest.approx(0.59460, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(-3, 3), st.floats(0, 1.5))
def test_sigma_is_between_endpoints(t, kappa, theta):
    s = sigma(t, kappa, theta)
    if np.isfinite(s):
        assert -1e-12 <= s <= 1 + 1e-12


def test_parse_grid():
    g = parse_grid("geo:4:0.01:1+lin:3:2:4")
    assert g.size == 7 and g[0] == pytest.approx(0.01) and g[-1] == 4
    with pytest.raises(ValueError):
        parse_grid("geo:4:0.5:0.1:9")
    with pytest.raises(ValueError):
        parse_grid("lin:3:1:2+lin:3:1.5:3")


def test_cone_distance_flat():
    assert cone_distance(1.0, 1.0, np.pi / 2, 0) == pytest.approx(np.sqrt(2))
    assert cone_distance(0.0, 0.7, 1.0, 0) == pytest.approx(0.7)
    assert cone_distance(0.4, 1.1, 0.0, 0) == pytest.approx(0.7)


def test_flat_cone_over_unit_circle_is_the_plane():
    c = build_cone(circle(2 * np.pi, 24), 0, 1, "lin:10:0.2:2")
    ang = 2 * np.pi * np.maximum(c.base_index, 0) / 24
    P = c.radius[:, None] * np.c_[np.cos(ang), np.sin(ang)]
    E = np.linalg.norm(P[:, None] - P[None], axis=-1)
    assert np.max(np.abs(E - c.space.dist)) <= 1e-12
    assert validate_space(c.space).valid


def test_cone_invariants():
    base = circle(4 * np.pi / 3, 12)
    c = build_cone(base, 0, 2, "lin:8:0.25:2")
    assert np.allclose(c.space.dist[0], c.radius)
    i0, i1 = c.index(1, 3), c.index(5, 3)
    assert c.space.dist[i0, i1] == pytest.approx(abs(c.grid[5] - c.grid[1]))
    assert c.space.mass.sum() == pytest.approx(1.0)
    # cell mass is the integral of r^N over the cell times the base mass
    e = c.edges
    i = 4
    expected = (e[i + 2] ** 3 - e[i + 1] ** 3) / 3 / (e[-1] ** 3 / 3) / 12
    assert c.space.mass[c.index(i, 0)] == pytest.approx(expected, rel=1e-10)


def test_spherical_cone_equator_is_isometric():
    base = circle(2 * np.pi, 16)
    c = build_cone(base, 1, 3, np.array([0.5, np.pi / 2, 2.5]))
    eq = [c.index(1, x) for x in range(16)]
    assert np.allclose(c.space.dist[np.ix_(eq, eq)], base.dist, atol=1e-12)
    assert np.allclose(c.space.dist[0], c.radius)


def test_suspension_of_circle_is_the_round_sphere():
    s = suspension(circle(2 * np.pi, 20), 1, 15)
    lat = np.pi / 2 - s.radius
    lon = 2 * np.pi * np.maximum(s.base_index, 0) / 20
    P = np.c_[np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)]
    assert np.max(np.abs(great_circle_distances(P) - s.space.dist)) <= 1e-9
    assert s.space.dist[0, s.far_pole] == pytest.approx(np.pi)


@pytest.mark.parametrize("N", [1, 2])
def test_suspension_preserves_vanishing_m_cos(N):
    for base in (circle(2 * np.pi, 128), sphere_fibonacci(2, 1.0, 60)):
        s = suspension(base, N, 31)
        assert abs(m_f(s.space, "cos") - m_f(base, "cos")) <= 1e-2


@pytest.mark.parametrize("N", [1, 2, 3])
def test_suspension_factorization(N):
    base = circle(np.pi, 64)
    s = suspension(base, N, 95)
    assert m_f(s.space, "cos") == pytest.approx(suspension_cos_factor(N) * m_f(base, "cos"), abs=5e-3)


def test_cone_serialization(tmp_path):
    c = build_cone(circle(2 * np.pi, 8), 0, 2, "geo:6:0.05:2")
    dump_cone(c, tmp_path / "c.json")
    d = load_cone(tmp_path / "c.json")
    assert np.array_equal(c.space.dist, d.space.dist)
    assert d.K == 0 and d.N == 2
    with pytest.raises(ValueError):
        cone_from_doc({"meta": {"cone": {"K": 0}}})


def test_homothety_identity_and_dirac():
    c = build_cone(circle(2 * np.pi, 16), 0, 1, "lin:60:0.05:3")
    rng = np.random.default_rng(0)
    w = rng.random(c.n)
    w /= w.sum()
    assert np.allclose(homothety_pushforward(c, w, 1.0).weights, w, atol=1e-14)
    d = np.zeros(c.n)
    d[c.nearest_index(1.0, 3)] = 1.0
    p = homothety_pushforward(c, d, 2.0).weights
    assert np.sum(p * c.radius) == pytest.approx(2.0, abs=c.grid[1] - c.grid[0])
    assert set(c.base_index[p > 0]) == {3}


def test_homothety_overflow_is_reported():
    c = build_cone(circle(2 * np.pi, 8), 0, 1, "lin:10:0.1:1")
    d = np.zeros(c.n)
    d[c.nearest_index(0.9, 0)] = 1.0
    with pytest.warns(UserWarning):
        res = homothety_pushforward(c, d, 3.0, full=True)
    assert res.overflow == pytest.approx(1.0)


def test_bishop_gromov_sphere(sphere2000):
    prof = bishop_gromov_check(sphere2000, 0, 1, 2, np.linspace(0.1, 3.0, 30))
    assert prof.min_margin >= -1e-2 and prof.max_abs_margin <= 1e-2
    assert prof.margins[-1] == 0.0


@pytest.mark.parametrize("N", [2, 3])
def test_bishop_gromov_interval(N):
    X = interval_model(N, 512)
    prof = bishop_gromov_check(X, 0, N - 1, N, np.linspace(0.05, 3.1, 40))
    assert prof.min_margin >= -1e-2 and prof.max_abs_margin <= 1e-2


def test_bishop_gromov_rejects_bad_grid():
    X = interval_model(2, 64)
    with pytest.raises(ValueError):
        bishop_gromov_check(X, 0, 1, 2, [0.5, 0.2])
    with pytest.raises(ValueError):
        bishop_gromov_check(X, 0, 1, 2, [1.0, 4.0])
