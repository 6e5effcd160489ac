"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed in the terminal summary (and inline with ``-s``).
"""
import numpy as np
import pytest

from riccilab.curvature import (DIVERGENT, FINITE, contraction_check, cone_dichotomy, parse_tgrid,
                                theta_plus_estimate)
from riccilab.functionals import cos_potentials, entropy, m_f, m_f_star
from riccilab.geometry import bishop_gromov_check, build_cone, homothety_pushforward, suspension
from riccilab.heat import (bessel_radial_law, build_generator_graph, build_generator_sturm, simulate_bessel,
                           variance_bound_check)
from riccilab.mmspace import circle, interval_model, nearest_point, product_space, sphere_fibonacci
from riccilab.transport import sinkhorn, solve_ot_exact

from oracles import lp_vertex_enumeration

VERDICTS = []
CONE_GRID = "geo:16:0.002:0.25+lin:20:0.35:2.05"
SHORT_T = np.geomspace(1e-3, 1e-2, 8)


def verdict(k, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def test_criterion_01_model_values():
    cos = max(abs(m_f_star(N, "cos")) for N in (1, 2, 3, 4))
    ident = max(abs(m_f_star(N, "identity") - np.pi / 2) for N in (1, 2, 3, 4))
    verdict(1, cos <= 1e-10 and ident <= 1e-10,
            f"max |M*_cos| = {cos:.1e}, max |M*_id - pi/2| = {ident:.1e} (tol 1e-10)")


def test_criterion_02_sharp_inequality(sphere2000):
    spaces = {"sphere": (sphere2000, True), "interval N=2": (interval_model(2, 512), False),
              "interval N=3": (interval_model(3, 512), False),
              "suspended circle": (suspension(circle(2 * np.pi, 128), 1, 31).space, True)}
    ok, parts = True, []
    for name, (X, equality) in spaces.items():
        v = m_f(X, "identity")
        ok &= v <= np.pi / 2 + 5e-3
        if equality:
            ok &= abs(v - np.pi / 2) <= 5e-3
        parts.append(f"{name} {v:.4f}")
    verdict(2, ok, "M_id: " + ", ".join(parts) + " (<= pi/2 + 5e-3, equality on sphere/circle)")


def test_criterion_03_cos_functional(sphere2000):
    mc = m_f(sphere2000, "cos")
    models = [sphere2000, interval_model(2, 512), interval_model(3, 512), circle(2 * np.pi, 1000)]
    worst = min(cos_potentials(X).min() for X in models)
    verdict(3, abs(mc) <= 5e-3 and worst >= -5e-3,
            f"|M_cos(S^2)| = {abs(mc):.1e}, worst cos-potential on models = {worst:.1e} (tol 5e-3)")


def test_criterion_04_suspension_invariance():
    diffs = []
    for base in (circle(2 * np.pi, 128), sphere_fibonacci(2, 1.0, 60)):
        s = suspension(base, 1, 31)
        diffs.append(abs(m_f(s.space, "cos") - m_f(base, "cos")))
    verdict(4, max(diffs) <= 1e-2, f"|M_cos(susp X) - M_cos(X)| = {diffs[0]:.1e}, {diffs[1]:.1e} (tol 1e-2)")


def test_criterion_05_bessel_law():
    t = np.geomspace(1e-3, 1e-1, 7)
    slopes = []
    for N in (1, 2, 3):
        m1 = [bessel_radial_law(N, 0.0, ti).moment(1) for ti in t]
        slopes.append(np.polyfit(np.log(t), np.log(m1), 1)[0])
    exp_err = max(abs(s - 0.5) for s in slopes)
    tm = np.array([0.02, 0.05, 0.1])
    mc_err = 0.0
    for N in (1, 2):
        mc = simulate_bessel(N, 0.0, tm, n_paths=100_000, dt=2e-4, seed=N)
        mc_slope = np.polyfit(tm, (mc ** 2).mean(axis=1), 1)[0]
        fv_slope = np.polyfit(tm, [bessel_radial_law(N, 0.0, ti).moment(2) for ti in tm], 1)[0]
        mc_err = max(mc_err, abs(fv_slope / mc_slope - 1))
    one = bessel_radial_law(2, 0.0, 1.0)
    scale = 0.0
    for ts in (1e-3, 1e-2, 1e-1):
        lt = bessel_radial_law(2, 0.0, ts)
        C = (lt.grid[:, None] - np.sqrt(ts) * one.grid[None, :]) ** 2
        scale = max(scale, np.sqrt(solve_ot_exact(lt.weights, one.weights, C).cost))
    verdict(5, exp_err <= 0.01 and mc_err <= 0.02 and scale <= 1e-2,
            f"exponent error {exp_err:.1e} (tol 1e-2), MC slope rel. error {mc_err:.1e} (tol 2e-2), "
            f"scaling W2 {scale:.1e} (tol 1e-2)")


def test_criterion_06_variance_bound(circle_model):
    t = np.geomspace(1e-3, 1e-1, 5)
    rc = variance_bound_check(circle_model, 1, [0, 500], t)
    half = build_generator_sturm(1, "halfline", 1024, R_max=4.0)
    start = int(np.argmin(np.abs(half.space.coords[:, 0] - 1.0)))
    rh = variance_bound_check(half, 2, [start], t)
    first = [r["ratio"] for r in rc.rows if r["t"] == t[0]]
    near = max(abs(r - 1) for r in first)
    verdict(6, rc.passed and rh.passed and near <= 0.05,
            f"worst ratio circle {rc.worst_ratio:.3f}, half-line {rh.worst_ratio:.3f} (<= 1.05); "
            f"circle ratio at t=1e-3 off by {near:.1e} (tol 5e-2)")


def test_criterion_07_contraction(circle_model, sphere_model):
    flat = contraction_check(circle_model, 0.0, [(0, 250), (0, 100)], [1e-3, 1e-2])
    y = nearest_point(sphere_model.space, 0, 0.5)
    round_ = contraction_check(sphere_model, 1.0, [(0, y)], [0.05])
    verdict(7, flat.passed and round_.passed,
            f"worst ratio K=0 {flat.worst_ratio:.4f}, K=1 {round_.worst_ratio:.4f} (<= 1.02)")


def test_criterion_08_theta_on_the_sphere(sphere_model):
    tg = parse_tgrid("log:0.05:0.2:8")
    vals = []
    for model in (sphere_model, build_generator_graph(sphere_fibonacci(2, 1.0, 1000))):
        y = nearest_point(model.space, 0, 0.5)
        est = theta_plus_estimate(model, 0, y, tg)
        vals.append((est.classification, est.theta))
    ok = all(c == FINITE and 0.85 <= v <= 1.13 for c, v in vals) and abs(vals[0][1] - vals[1][1]) <= 0.15
    verdict(8, ok, f"theta n=2000 {vals[0][1]:.3f}, n=1000 {vals[1][1]:.3f} "
                   f"(bracket [0.85, 1.13], half-resolution gap <= 0.15)")


def test_criterion_09_cone_dichotomy():
    parts, ok = [], True
    flat = cone_dichotomy(build_cone(circle(2 * np.pi, 32), 0, 1, CONE_GRID), 0, 1.0, SHORT_T)
    ok &= flat.classification == "(i)"
    parts.append(f"circle(2pi) {flat.classification} (g residual {flat.g_residual:.1e})")
    short = cone_dichotomy(build_cone(circle(2 * np.pi * 2 / 3, 32), 0, 1, CONE_GRID), 0, 1.0, SHORT_T)
    ok &= (short.classification == "(ii)" and abs(short.alpha - 0.5) <= 0.05
           and abs(short.a - 0.41350) <= 2e-3)
    parts.append(f"circle(4pi/3) {short.classification} alpha {short.alpha:.3f} a {short.a:.5f}")
    S = sphere_fibonacci(2, 1 / np.sqrt(3), 12)
    pcone = build_cone(product_space(S, S), 0, 4, "geo:16:0.002:0.25+lin:8:0.4:2.5")
    for x0 in (0, 77):
        rep = cone_dichotomy(pcone, x0, 1.0, SHORT_T)
        ok &= rep.a > 0 and rep.classification == "(ii)"
        parts.append(f"product x0={x0} {rep.classification} a {rep.a:.3f}")
    small = [cone_dichotomy(build_cone(circle(2 * np.pi * rho, 16), 0, 1, "geo:8:0.004:0.25+lin:10:0.4:2.05"),
                            0, 1.0, SHORT_T, half_resolution=False) for rho in (1.0, 2 / 3)]
    sandwich = all(r.w2 is not None and r.sandwich_ok() for r in small)
    ok &= sandwich
    parts.append(f"sandwich {'holds' if sandwich else 'violated'} on the small instances")
    verdict(9, ok, "; ".join(parts))


def test_criterion_10_homothety_entropy():
    worst = 0.0
    for N in (1, 2):
        c = build_cone(circle(2 * np.pi, 16), 0, N, "lin:600:0.005:6")
        theta = 2 * np.pi * np.maximum(c.base_index, 0) / 16
        rho = np.exp(-(c.radius - 1.5) ** 2 / (2 * 0.25 ** 2)) * (1 + 0.3 * np.cos(theta))
        w = rho * c.space.mass
        w /= w.sum()
        for lam in (0.5, 2.0):
            shift = entropy(homothety_pushforward(c, w, lam), c.space) - entropy(w, c.space)
            worst = max(worst, abs(shift + (N + 1) * np.log(lam)))
    verdict(10, worst <= 3e-2, f"max |dEnt + (N+1) log lam| = {worst:.1e} (tol 3e-2)")


def test_criterion_11_transport_oracles():
    rng = np.random.default_rng(2024)
    sizes = [(1, 3), (2, 2), (2, 3), (2, 5), (3, 3), (3, 4), (2, 6), (4, 4), (3, 5)]
    worst = 0.0
    for trial in range(200):
        m, n = sizes[trial % len(sizes)]
        a, b = rng.random(m) + 0.05, rng.random(n) + 0.05
        a, b, C = a / a.sum(), b / b.sum(), rng.random((m, n))
        worst = max(worst, abs(solve_ot_exact(a, b, C).cost - lp_vertex_enumeration(a, b, C)))
    below = 0
    for _ in range(50):
        a, b = rng.random(20) + 0.05, rng.random(20) + 0.05
        a, b, C = a / a.sum(), b / b.sum(), rng.random((20, 20))
        below += sinkhorn(a, b, C, 0.05).rounded_cost < solve_ot_exact(a, b, C).cost - 1e-12
    verdict(11, worst <= 1e-10 and below == 0,
            f"max |exact - enumeration| = {worst:.1e} over 200 trials (tol 1e-10); "
            f"Sinkhorn below exact in {below}/50 trials")


def test_criterion_12_bishop_gromov(sphere2000):
    prof = bishop_gromov_check(sphere2000, 0, 1, 2, np.linspace(0.1, 3.0, 30))
    verdict(12, prof.min_margin >= -1e-2 and prof.max_abs_margin <= 1e-2,
            f"min margin {prof.min_margin:.1e}, max |margin| {prof.max_abs_margin:.1e} (tol 1e-2)")
