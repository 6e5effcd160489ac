import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riccilab.mmspace import (FiniteMMSpace, ProbMeasure, SpaceValidationError, circle, distance_histogram,
                              interval_model, load_space, nearest_point, perturb_metric, product_space,
                              save_space, space_from_json, space_to_json, sphere_fibonacci, validate_space)


def two_points(d=1.0, mass=(1.0, 1.0)):
    return FiniteMMSpace(np.array([[0.0, d], [d, 0.0]]), np.array(mass))


def test_two_point_space_is_valid():
    assert validate_space(two_points()).valid


def test_asymmetry_is_reported():
    space = FiniteMMSpace(np.array([[0.0, 1.0], [2.0, 0.0]]), np.ones(2))
    rep = validate_space(space)
    assert not rep.valid
    assert any(v.kind == "asymmetry" for v in rep.violations)


def test_triangle_violation_magnitude():
    D = np.array([[0, 1, 5], [1, 0, 1], [5, 1, 0]], dtype=float)
    rep = validate_space(FiniteMMSpace(D, np.ones(3)))
    tri = [v for v in rep.violations if v.kind == "triangle inequality"]
    assert tri and tri[0].magnitude == pytest.approx(3.0)
    with pytest.raises(SpaceValidationError):
        validate_space(FiniteMMSpace(D, np.ones(3)), strict=True)


def test_constructor_rejects_bad_input():
    with pytest.raises(ValueError):
        FiniteMMSpace(np.zeros((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        FiniteMMSpace(np.zeros((2, 2)), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        FiniteMMSpace(np.zeros((2, 2)), np.zeros(2))


def test_circle_quarter_points():
    c = circle(2 * np.pi, 4)
    assert set(np.round(np.unique(c.dist), 12)) == {0.0, round(np.pi / 2, 12), round(np.pi, 12)}
    assert c.diameter == pytest.approx(np.pi)


def test_short_circle_diameter():
    assert circle(4 * np.pi / 3, 1000).diameter == pytest.approx(2 * np.pi / 3)


def test_interval_model_masses():
    assert np.allclose(interval_model(1, 64).mass, interval_model(1, 64).mass[0])
    assert interval_model(2, 512).meta["unnormalized_mass"] == pytest.approx(2.0, rel=1e-10)
    m = interval_model(3, 101).mass
    assert np.max(np.abs(m - m[::-1])) <= 1e-12


def test_sphere_lattice(sphere2000):
    D = sphere2000.dist.copy()
    np.fill_diagonal(D, np.inf)
    assert D.min(axis=1).max() <= 0.1
    assert sphere2000.diameter == pytest.approx(np.pi, abs=0.05)
    assert sphere_fibonacci(2, 1 / np.sqrt(3), 300).diameter <= np.pi / np.sqrt(3) + 1e-12
    assert validate_space(sphere_fibonacci(2, 1.0, 400)).valid


def test_product_space():
    X = two_points()
    assert product_space(X, X).diameter == pytest.approx(np.sqrt(2))
    P = product_space(two_points(mass=(0.5, 0.5)), two_points(mass=(1 / 3, 2 / 3)))
    assert np.allclose(P.probability, [1 / 6, 1 / 3, 1 / 6, 1 / 3])
    S = sphere_fibonacci(2, 1 / np.sqrt(3), 60)
    assert product_space(S, S).diameter <= np.pi * np.sqrt(2 / 3) + 1e-12


def test_distance_histogram_examples():
    h = distance_histogram(two_points(mass=(0.5, 0.5)), 2)
    assert np.allclose(h.masses, [0.5, 0.5])
    S = sphere_fibonacci(2, 1.0, 200)
    assert distance_histogram(S, 1).masses.sum() == pytest.approx(S.total_mass ** 2)
    dens = distance_histogram(circle(2 * np.pi, 1000), 10, upper=np.pi).density()
    assert np.allclose(dens, 0.1, atol=2e-3)


def test_prob_measure():
    mu = ProbMeasure.from_weights([1.0, 3.0])
    assert np.allclose(mu.weights, [0.25, 0.75])
    with pytest.raises(ValueError):
        ProbMeasure(np.array([0.5, 0.6]))
    assert ProbMeasure.dirac(3, 1).weights[1] == 1.0


def test_json_round_trip(tmp_path):
    S = sphere_fibonacci(2, 1.0, 50)
    save_space(S, tmp_path / "s.json")
    T = load_space(tmp_path / "s.json")
    assert np.array_equal(S.dist, T.dist) and np.array_equal(S.mass, T.mass)
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["meta"]["generator"] == "sphere_fibonacci"


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 31 - 1))
def test_random_metric_round_trip(n, seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(n, 3))
    D = np.linalg.norm(P[:, None] - P[None], axis=-1)
    S = FiniteMMSpace(D, rng.uniform(0.1, 1.0, n))
    T = space_from_json(json.loads(json.dumps(space_to_json(S))))
    assert np.array_equal(S.dist, T.dist) and np.array_equal(S.mass, T.mass)


def test_perturbation_is_repaired_metric():
    S = sphere_fibonacci(2, 1.0, 150)
    P = perturb_metric(S, 0.2, seed=3)
    assert validate_space(P).valid
    assert perturb_metric(S, 0.0) is S
    assert np.all(P.dist <= S.dist * 1.2 + 1e-12)


def test_nearest_point():
    c = circle(2 * np.pi, 8)
    assert c.dist[0, nearest_point(c, 0, np.pi / 2)] == pytest.approx(np.pi / 2)
