import numpy as np
import pytest

from riccilab.curvature import (DIVERGENT, FINITE, INCONCLUSIVE, classify_theta, cone_dichotomy,
                                contraction_check, fit_power_plus_linear, half_resolution_cone,
                                local_bandwidth, parse_tgrid, theta_plus_estimate, theta_star_estimate)
from riccilab.geometry import build_cone
from riccilab.heat import ConeHeatModel, build_generator_graph
from riccilab.mmspace import circle, nearest_point, product_space, sphere_fibonacci

CONE_GRID = "geo:16:0.002:0.25+lin:20:0.35:2.05"
SHORT_T = np.geomspace(1e-3, 1e-2, 6)


def test_parse_tgrid():
    assert np.allclose(parse_tgrid("log:1e-3:1e-1:3"), [1e-3, 1e-2, 1e-1])
    assert np.allclose(parse_tgrid("lin:0:1:3"), [0, 0.5, 1])
    with pytest.raises(ValueError):
        parse_tgrid("exp:1:2:3")


def test_classify_synthetic_curves():
    t = np.geomspace(1e-3, 1e-1, 8)
    d = 1.0
    w = d * np.exp(-(1.0 + 0.5 * t) * t)
    v = -np.log(w / d) / t
    theta, slope, res, growth, defect, label = classify_theta(t, v, d, w)
    assert label == FINITE and theta == pytest.approx(1.0, abs=1e-6)
    ts = np.geomspace(1e-3, 1e-2, 8)
    w = np.sqrt(d * d - 1.5 * np.sqrt(ts) + 2 * ts)
    v = -np.log(w / d) / ts
    assert classify_theta(ts, v, d, w)[-1] == DIVERGENT
    w = np.sqrt(d * d - 1.5 * np.sqrt(t) + 2 * t)
    v = -np.log(w / d) / t
    assert classify_theta(t, v, d, w)[-1] != FINITE
    w = d * np.exp(-np.sin(1 / t) * t)
    assert classify_theta(t, -np.log(w / d) / t, d, w)[-1] == INCONCLUSIVE


def test_fit_power_plus_linear():
    t = np.geomspace(1e-3, 1e-2, 8)
    alpha, A, B, res = fit_power_plus_linear(t, 1.3 * np.sqrt(t) - 4 * t)
    assert alpha == pytest.approx(0.5, abs=1e-4) and A == pytest.approx(1.3, rel=1e-3)


@pytest.fixture(scope="module")
def flat_circle_model():
    return build_generator_graph(circle(2 * np.pi, 1000), 1e-3)


def test_theta_on_the_flat_circle(flat_circle_model):
    est = theta_plus_estimate(flat_circle_model, 0, 250, SHORT_T)
    assert est.classification == FINITE
    assert abs(est.theta) <= 0.05
    assert abs(theta_star_estimate(flat_circle_model, 0, 0.3, SHORT_T, max_pairs=2)) <= 0.05


def test_theta_rejects_equal_points(flat_circle_model):
    with pytest.raises(ValueError):
        theta_plus_estimate(flat_circle_model, 3, 3, SHORT_T)


def test_contraction_on_the_flat_circle(flat_circle_model):
    rep = contraction_check(flat_circle_model, 0.0, [(0, 250), (0, 100)], [0.0, 1e-3, 1e-2])
    assert rep.worst_ratio <= 1 + 1e-3
    assert [r["ratio"] for r in rep.rows if r["t"] == 0] == [1.0, 1.0]


def test_contraction_on_the_sphere(sphere_model):
    y = nearest_point(sphere_model.space, 0, 0.5)
    rep = contraction_check(sphere_model, 1.0, [(0, y)], [0.05])
    assert rep.worst_ratio <= 1 + 2e-2


def test_theta_star_on_the_sphere(sphere_model):
    val = theta_star_estimate(sphere_model, 0, 0.3, parse_tgrid("log:0.05:0.2:6"), max_pairs=2)
    assert val == pytest.approx(1.0, abs=0.15)


@pytest.fixture(scope="module")
def short_cone():
    return build_cone(circle(2 * np.pi * 2 / 3, 32), 0, 1, CONE_GRID)


def test_theta_at_the_tip_diverges(short_cone):
    p0 = short_cone.nearest_index(1.0, 0)
    model = ConeHeatModel(short_cone, local_bandwidth(short_cone.space, p0))
    est = theta_plus_estimate(model, 0, p0, SHORT_T)
    assert est.classification == DIVERGENT
    assert est.defect_exponent == pytest.approx(0.5, abs=0.1)
    assert theta_star_estimate(model, 0, 1.0, SHORT_T, max_pairs=1) == np.inf


def test_half_resolution_cone_keeps_the_anchor(short_cone):
    coarse, x0 = half_resolution_cone(short_cone, 3, 1.0)
    assert coarse.nb == 16 and x0 == 1
    assert np.isclose(coarse.grid, short_cone.grid[np.argmin(np.abs(short_cone.grid - 1.0))]).any()
    assert coarse.grid[-1] == short_cone.grid[-1]


@pytest.mark.parametrize("rho,label", [(1.0, "(i)"), (2 / 3, "(ii)")])
def test_dichotomy_on_circle_cones(rho, label):
    cone = build_cone(circle(2 * np.pi * rho, 32), 0, 1, CONE_GRID)
    rep = cone_dichotomy(cone, 0, 1.0, np.geomspace(1e-3, 1e-2, 8))
    assert rep.classification == label
    assert rep.half_classification == label
    assert rep.a == pytest.approx(np.sin(np.pi * rho) / (np.pi * rho), abs=2e-3)
    if label == "(ii)":
        assert rep.alpha == pytest.approx(0.5, abs=0.05)
    assert rep.sandwich_ok()
    js = rep.to_json()
    assert js["classification"] == label and len(js["t"]) == 8


def test_dichotomy_rejects_curved_cones():
    with pytest.raises(ValueError):
        cone_dichotomy(build_cone(circle(2 * np.pi, 8), 1, 1, "lin:5:0.5:2.5"), 0, 1.0, SHORT_T)


def test_dichotomy_requires_room_for_the_heat_flow():
    cone = build_cone(circle(2 * np.pi, 8), 0, 1, "lin:8:0.2:1.6")
    with pytest.raises(ValueError):
        cone_dichotomy(cone, 0, 1.0, [0.01, 0.05, 0.1, 0.2])
