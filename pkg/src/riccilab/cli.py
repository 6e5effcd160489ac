"""Experiment configs, run manifests and the ``riccilab`` command line."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr
from threadpoolctl import threadpool_limits

from . import __version__
from .curvature import (DIVERGENT, FINITE, cone_dichotomy, contraction_check,
                        parse_tgrid, theta_plus_estimate)
from .functionals import m_f, model_histogram, rigidity_report, suspension_cos_factor
from .geometry import bishop_gromov_check, build_cone, cone_from_doc, dump_cone, parse_grid, suspension
from .heat import ConeHeatModel, build_generator_graph, build_generator_sturm, heat_measure, variance_bound_check
from .mmspace import (circle, distance_histogram, interval_model, load_measure, perturb_metric,
                      product_space, save_measure, save_space, space_from_json, sphere_fibonacci,
                      validate_space)
from .transport import sinkhorn, solve_ot_exact

logger = logging.getLogger("riccilab")

SCHEMA_VERSION = "1"
KINDS = ("mf", "bg", "heat", "theta", "dichotomy", "suspension-invariance", "almost-rigidity-sweep")

# Tolerances per assertion; "desk" matches the acceptance targets, "strict" is tighter.
TOL_PROFILES = {
    "desk": {"mf_gap": 5e-3, "bg_margin": 1e-2, "variance": 0.05, "contraction": 2e-2,
             "theta_bracket": 0.15, "suspension": 1e-2, "a_value": 2e-3, "spearman": 0.9,
             "discrepancy": 2e-2},
    "strict": {"mf_gap": 1e-3, "bg_margin": 5e-3, "variance": 0.02, "contraction": 1e-2,
               "theta_bracket": 0.1, "suspension": 5e-3, "a_value": 1e-3, "spearman": 0.95,
               "discrepancy": 1e-2},
}

CSV_SCHEMA = {
    "mf": {"center": "distance bin center", "density": "observed pair-distance probability per bin",
           "model": "model probability per bin (sin^(N-1) law on [0, pi])"},
    "bg": {"r": "ball radius", "v": "measure of the ball", "model_v": "model ball volume",
           "margin": "v/v(R) - V/V(R); comparison requires >= 0"},
    "heat": {"x": "source point", "t": "time", "w2sq": "W_2(P^_t delta_x, delta_x)^2",
             "bound": "2 N t", "ratio": "w2sq / bound"},
    "theta": {"t": "time", "w2": "exact W_2 between the two heat measures",
              "v": "-(1/t) log(W_2 / d)"},
    "dichotomy": {"t": "time", "w2": "exact W_2 (empty if not computed)",
                  "d_up": "r0^2 - product coupling cost", "product_cost": "product coupling cost",
                  "g": "Kantorovich dual lower bound"},
    "suspension-invariance": {"space": "which space", "m_cos": "M_cos of that space"},
    "almost-rigidity-sweep": {"eta": "perturbation size", "gap": "M_f gap",
                              "discrepancy": "L1 histogram discrepancy"},
}

PLOTS = {
    "mf": ("center", ["density", "model"], False),
    "bg": ("r", ["margin"], False),
    "heat": ("t", ["w2sq", "bound"], True),
    "theta": ("t", ["v"], True),
    "dichotomy": ("t", ["d_up"], True),
    "suspension-invariance": None,
    "almost-rigidity-sweep": ("eta", ["gap", "discrepancy"], False),
}

SPACE_GENERATORS = {
    "circle": (circle, ("circumference", "n")),
    "interval_model": (interval_model, ("N", "n")),
    "sphere_fibonacci": (sphere_fibonacci, ("N", "radius", "n")),
}

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


# --- config -----------------------------------------------------------------

def _canonical(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=True)


def _check_space_spec(spec: Any, where: str, base_dir: Path) -> None:
    if not isinstance(spec, dict):
        raise ConfigError(f"{where}: expected an object")
    if "path" in spec:
        if not (base_dir / spec["path"]).exists():
            raise ConfigError(f"{where}: file {spec['path']!r} does not exist")
        return
    gen = spec.get("generator")
    if gen == "product":
        factors = spec.get("factors")
        if not isinstance(factors, list) or len(factors) != 2:
            raise ConfigError(f"{where}: product needs two factors")
        for k, f in enumerate(factors):
            _check_space_spec(f, f"{where}.factors[{k}]", base_dir)
    elif gen in SPACE_GENERATORS:
        params = spec.get("params", {})
        missing = [p for p in SPACE_GENERATORS[gen][1] if p not in params]
        if missing:
            raise ConfigError(f"{where}: {gen} is missing {missing}")
    else:
        raise ConfigError(f"{where}: unknown generator {gen!r}")
    eta = spec.get("perturb", {}).get("eta", 0.0)
    if not 0 <= eta < 1:
        raise ConfigError(f"{where}: perturbation eta must lie in [0, 1)")


def _check_cone_spec(spec: Any, base_dir: Path) -> None:
    if not isinstance(spec, dict):
        raise ConfigError("cone: expected an object")
    if "path" in spec:
        _check_space_spec(spec, "cone", base_dir)
        return
    _check_space_spec(spec.get("base"), "cone.base", base_dir)
    for key in ("K", "N"):
        if not isinstance(spec.get(key), (int, float)):
            raise ConfigError(f"cone: {key} must be a number")
    if spec["N"] < 1:
        raise ConfigError("cone: N must be >= 1")
    try:
        parse_grid(spec.get("grid", "geo:64:0.01:4.0"))
    except ValueError as exc:
        raise ConfigError(f"cone: {exc}") from None


def _positive(params: dict, key: str, kind: str) -> None:
    if key in params and not (isinstance(params[key], (int, float)) and params[key] > 0):
        raise ConfigError(f"{kind}: {key} must be a positive number")


@dataclass
class ExperimentConfig:
    kind: str
    space: Optional[dict] = None
    cone: Optional[dict] = None
    params: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: str = "."
    name: str = "run"
    tol_profile: str = "desk"
    base_dir: str = field(default=".", repr=False)

    def validate(self) -> "ExperimentConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if self.tol_profile not in TOL_PROFILES:
            raise ConfigError(f"unknown tolerance profile {self.tol_profile!r}")
        if not isinstance(self.params, dict):
            raise ConfigError("params must be an object")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        base = Path(self.base_dir)
        p = self.params
        needs_cone = self.kind == "dichotomy"
        needs_space = self.kind in ("mf", "bg", "suspension-invariance", "almost-rigidity-sweep")
        if needs_cone and self.cone is None:
            raise ConfigError(f"{self.kind}: a cone is required")
        if needs_space and self.space is None:
            raise ConfigError(f"{self.kind}: a space is required")
        if self.kind == "theta" and (self.space is None) == (self.cone is None):
            raise ConfigError("theta: give exactly one of space or cone")
        if self.kind == "heat" and self.space is None and not str(p.get("method", "")).startswith("sturm"):
            raise ConfigError("heat: a space is required unless method is sturm")
        if self.space is not None:
            _check_space_spec(self.space, "space", base)
        if self.cone is not None:
            _check_cone_spec(self.cone, base)
        for key in ("N", "bins", "eps", "r0", "radius"):
            if key in p and p[key] != "auto":
                _positive(p, key, self.kind)
        for key in ("tgrid",):
            if key in p:
                try:
                    t = parse_tgrid(p[key])
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"{self.kind}: bad {key}: {exc}") from None
                if t.size < 2 or np.any(t <= 0):
                    raise ConfigError(f"{self.kind}: {key} needs at least two positive times")
        if self.kind == "theta" and not (isinstance(p.get("pair"), list) and len(p["pair"]) == 2):
            raise ConfigError("theta: pair must be a list of two point indices")
        if self.kind == "dichotomy" and "r0" not in p:
            raise ConfigError("dichotomy: r0 is required")
        if self.kind == "almost-rigidity-sweep":
            etas = p.get("etas")
            if not isinstance(etas, list) or len(etas) < 3 or any(not 0 <= e < 1 for e in etas):
                raise ConfigError("almost-rigidity-sweep: etas must list at least three values in [0, 1)")
        return self

    def to_json(self) -> dict:
        return {"kind": self.kind, "space": self.space, "cone": self.cone, "params": self.params,
                "seed": self.seed, "out_dir": self.out_dir, "name": self.name,
                "tol_profile": self.tol_profile}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    @property
    def hash(self) -> str:
        return hashlib.sha256(_canonical(self.to_json()).encode()).hexdigest()

    @classmethod
    def from_json(cls, doc: Any, base_dir: str = ".") -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {"kind", "space", "cone", "params", "seed", "out_dir", "name", "tol_profile"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "kind" not in doc:
            raise ConfigError("config needs a kind")
        cfg = cls(**{k: doc[k] for k in allowed if k in doc}, base_dir=base_dir)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {str(path)!r} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_json(doc, base_dir=str(path.parent))


# --- manifest ---------------------------------------------------------------

@dataclass
class Assertion:
    name: str
    passed: bool
    value: Any
    tol: Any
    detail: str = ""

    def to_json(self) -> dict:
        return {"name": self.name, "passed": self.passed, "value": self.value, "tol": self.tol,
                "detail": self.detail}


@dataclass
class RunManifest:
    config_hash: str
    version: str = __version__
    name: str = "run"
    kind: str = ""
    started: float = field(default_factory=time.time)
    wall_clock: float = 0.0
    assertions: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)

    def check(self, name: str, passed: bool, value: Any, tol: Any, detail: str = "") -> bool:
        if any(a.name == name for a in self.assertions):
            raise ValueError(f"assertion {name!r} recorded twice")
        self.assertions.append(Assertion(name, bool(passed), _jsonable(value), _jsonable(tol), detail))
        return bool(passed)

    @property
    def passed(self) -> bool:
        return not self.errors and all(a.passed for a in self.assertions)

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.passed else EXIT_FAIL

    def to_json(self) -> dict:
        return {"config_hash": self.config_hash, "version": self.version, "name": self.name,
                "kind": self.kind, "started": self.started, "wall_clock": self.wall_clock,
                "passed": self.passed, "assertions": [a.to_json() for a in self.assertions],
                "errors": self.errors, "outputs": self.outputs}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    return x


# --- building blocks --------------------------------------------------------

def build_space(spec: dict, base_dir: str = "."):
    if "path" in spec:
        doc = json.loads((Path(base_dir) / spec["path"]).read_text())
        space = space_from_json(doc)
    elif spec["generator"] == "product":
        X, Y = (build_space(f, base_dir) for f in spec["factors"])
        space = product_space(X, Y)
    else:
        fn, names = SPACE_GENERATORS[spec["generator"]]
        params = spec["params"]
        space = fn(*(params[k] for k in names))
    perturb = spec.get("perturb")
    if perturb:
        space = perturb_metric(space, perturb.get("eta", 0.0), perturb.get("seed", 0))
    return space


def build_cone_spec(spec: dict, base_dir: str = "."):
    if "path" in spec:
        return cone_from_doc(json.loads((Path(base_dir) / spec["path"]).read_text()))
    base = build_space(spec["base"], base_dir)
    return build_cone(base, spec["K"], spec["N"], spec.get("grid", "geo:64:0.01:4.0"))


def parse_method(spec: str) -> tuple[str, dict]:
    """``graph:eps=auto`` / ``graph:eps=0.01`` / ``sturm:N=1:domain=halfline:n=512:R_max=3``."""
    head, *rest = str(spec).split(":")
    opts: dict[str, Any] = {}
    for item in rest:
        if "=" not in item:
            raise ConfigError(f"bad method option {item!r} in {spec!r}")
        k, v = item.split("=", 1)
        if v == "auto":
            opts[k] = None
        else:
            try:
                opts[k] = float(v) if k != "domain" else v
            except ValueError:
                raise ConfigError(f"bad method option {item!r} in {spec!r}") from None
    if head not in ("graph", "sturm"):
        raise ConfigError(f"unknown heat method {head!r}")
    return head, opts


def build_model(method: str, space=None, cone=None):
    head, opts = parse_method(method)
    if head == "sturm":
        n = int(opts.get("n", 512))
        return build_generator_sturm(opts.get("N", 1.0), opts.get("domain", "halfline"), n,
                                     R_max=opts.get("R_max"))
    if cone is not None:
        return ConeHeatModel(cone, opts.get("eps"))
    return build_generator_graph(space, opts.get("eps"))


# --- experiments ------------------------------------------------------------

def _exp_mf(cfg, man, tol):
    p = cfg.params
    space = build_space(cfg.space, cfg.base_dir)
    f = p.get("f", "identity")
    rep = rigidity_report(space, f, p.get("N", 2), bins=p.get("bins", 64), clamp=p.get("clamp", False))
    man.check("mf_inequality", rep.gap >= -tol["mf_gap"], rep.gap, tol["mf_gap"], "gap >= -tol")
    if p.get("expect_equality", False):
        man.check("mf_equality", abs(rep.gap) <= tol["mf_gap"], rep.gap, tol["mf_gap"], "|gap| <= tol")
    if f == "cos":
        man.check("cos_potential_sign", rep.worst_cos_potential >= -tol["mf_gap"],
                  rep.worst_cos_potential, tol["mf_gap"])
    hist = distance_histogram(space, rep.bins, upper=np.pi)
    model = model_histogram(rep.N, hist.edges)
    rows = [{"center": c, "density": d, "model": m} for c, d, m in zip(hist.centers, hist.density(), model)]
    return rep.to_json(), rows


def _exp_bg(cfg, man, tol):
    p = cfg.params
    space = build_space(cfg.space, cfg.base_dir)
    r = parse_grid(p.get("rgrid", "lin:32:0.05:3.0"))
    prof = bishop_gromov_check(space, int(p.get("x0", 0)), p.get("K", 0.0), p.get("N", 2), r)
    man.check("bg_margin", prof.min_margin >= -tol["bg_margin"], prof.min_margin, tol["bg_margin"])
    if p.get("expect_equality", False):
        man.check("bg_equality", prof.max_abs_margin <= tol["bg_margin"], prof.max_abs_margin,
                  tol["bg_margin"])
    rows = [{"r": a, "v": b, "model_v": c, "margin": d}
            for a, b, c, d in zip(prof.r, prof.v, prof.model_v, prof.margins)]
    return prof.to_json(), rows


def _exp_heat(cfg, man, tol):
    p = cfg.params
    method = p.get("method", "graph:eps=auto")
    space = build_space(cfg.space, cfg.base_dir) if cfg.space is not None else None
    model = build_model(method, space)
    N = p.get("N", model.params.get("N", 1))
    t = parse_tgrid(p.get("tgrid", "log:1e-3:1e-1:6"))
    rep = variance_bound_check(model, N, p.get("points", [0]), t, rel_tol=tol["variance"])
    man.check("variance_bound", rep.passed, rep.worst_ratio, 1 + tol["variance"], "W2^2 <= 2Nt(1+tol)")
    report = rep.to_json()
    report["generator"] = {"kind": model.kind, "eps": model.params.get("eps")}
    # vertex second moment E[s^2] = slope * t; both normalizations are reported
    report["second_moment_constants"] = {"slope_declared": 2.0 * (N + 1), "ceil_N": float(np.ceil(N))}
    return report, rep.rows


def _exp_theta(cfg, man, tol):
    p = cfg.params
    method = p.get("method", "graph:eps=auto")
    if cfg.cone is not None:
        cone = build_cone_spec(cfg.cone, cfg.base_dir)
        model = build_model(method, cone=cone)
    else:
        model = build_model(method, build_space(cfg.space, cfg.base_dir))
    x, y = (int(v) for v in p["pair"])
    t = parse_tgrid(p.get("tgrid", "log:1e-3:1e-1:8"))
    est = theta_plus_estimate(model, x, y, t, fit_tol=p.get("fit_tol", 0.05))
    report = est.to_json()
    expect = p.get("expect")
    if expect == DIVERGENT:
        man.check("theta_divergent", est.classification == DIVERGENT, est.classification, DIVERGENT)
    elif isinstance(expect, list):
        lo, hi = expect
        ok = est.classification == FINITE and lo <= est.theta <= hi
        man.check("theta_bracket", ok, est.theta, [lo, hi], est.classification)
    if "contraction_K" in p:
        rep = contraction_check(model, p["contraction_K"], [(x, y)], t, tol=tol["contraction"])
        man.check("contraction", rep.passed, rep.worst_ratio, 1 + tol["contraction"])
        report["contraction"] = rep.to_json()
    return report, est.rows()


def _exp_dichotomy(cfg, man, tol):
    p = cfg.params
    cone = build_cone_spec(cfg.cone, cfg.base_dir)
    eps = p.get("eps")
    rep = cone_dichotomy(cone, int(p.get("x0", 0)), float(p["r0"]),
                         parse_tgrid(p.get("tgrid", "log:1e-3:1e-2:8")),
                         eps=None if eps == "auto" else eps,
                         half_resolution=p.get("half_resolution", True))
    if "expect" in p:
        man.check("classification", rep.classification == p["expect"], rep.classification, p["expect"])
    if "expect_a" in p:
        man.check("a_value", abs(rep.a - p["expect_a"]) <= tol["a_value"], rep.a, tol["a_value"])
    ok = rep.sandwich_ok()
    if ok is not None:
        man.check("sandwich", ok, ok, True, "g <= W2 <= sqrt(product cost)")
    return rep.to_json(), rep.rows()


def _exp_suspension(cfg, man, tol):
    p = cfg.params
    space = build_space(cfg.space, cfg.base_dir)
    susp = suspension(space, p.get("N", 2), p.get("grid", 63))
    a, b = m_f(space, "cos"), m_f(susp.space, "cos")
    factor = suspension_cos_factor(susp.N)
    err = abs(b - factor * a)
    man.check("suspension_invariance", err <= tol["suspension"], err, tol["suspension"],
              "|M_cos(susp X) - factor * M_cos(X)|")
    return {"m_cos_base": a, "m_cos_suspension": b, "factor": factor, "difference": b - factor * a}, [
        {"space": "base", "m_cos": a}, {"space": "suspension", "m_cos": b}]


def _exp_sweep(cfg, man, tol):
    p = cfg.params
    rows = []
    for eta in p["etas"]:
        spec = dict(cfg.space, perturb={"eta": eta, "seed": cfg.seed})
        rep = rigidity_report(build_space(spec, cfg.base_dir), p.get("f", "identity"), p.get("N", 2),
                              bins=p.get("bins", 16))
        rows.append({"eta": eta, "gap": rep.gap, "discrepancy": rep.discrepancy})
    report = {"rows": rows}
    report.update(_comove(rows, man, tol))
    return report, rows


def _comove(rows, man, tol):
    eta = [r["eta"] for r in rows]
    out = {}
    base = [r for r in rows if r["eta"] == 0]
    if base:
        man.check("baseline_gap", abs(base[0]["gap"]) <= tol["mf_gap"], base[0]["gap"], tol["mf_gap"])
        man.check("baseline_discrepancy", base[0]["discrepancy"] <= tol["discrepancy"],
                  base[0]["discrepancy"], tol["discrepancy"])
    for key in ("gap", "discrepancy"):
        rho = float(spearmanr(eta, [abs(r[key]) for r in rows]).statistic)
        out[f"spearman_{key}"] = rho
        man.check(f"comove_{key}", rho >= tol["spearman"], rho, tol["spearman"])
    return out


EXPERIMENTS = {"mf": _exp_mf, "bg": _exp_bg, "heat": _exp_heat, "theta": _exp_theta,
               "dichotomy": _exp_dichotomy, "suspension-invariance": _exp_suspension,
               "almost-rigidity-sweep": _exp_sweep}


# --- outputs ----------------------------------------------------------------

def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if row.get(c) is None else (repr(float(row[c])) if isinstance(row.get(c), (float, np.floating))
                                                  else row[c]) for c in columns])
    return buf.getvalue()


def gnuplot_script(kind: str, csv_name: str) -> Optional[str]:
    spec = PLOTS.get(kind)
    if spec is None:
        return None
    x, ys, logx = spec
    cols = list(CSV_SCHEMA[kind])
    lines = ["set datafile separator ','", "set key autotitle columnhead", f"set xlabel '{x}'"]
    if logx:
        lines.append("set logscale x")
    plots = [f"'{csv_name}' using {cols.index(x) + 1}:{cols.index(y) + 1} with linespoints title '{y}'"
             for y in ys]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def run(config: ExperimentConfig, *, report_path: Optional[str] = None) -> RunManifest:
    """Run one experiment; write report JSON, curves CSV, gnuplot script and manifest."""
    config.validate()
    tol = TOL_PROFILES[config.tol_profile]
    man = RunManifest(config_hash=config.hash, name=config.name, kind=config.kind)
    out = Path(config.out_dir)
    t0 = time.perf_counter()
    np.random.seed(config.seed)
    report: dict = {}
    rows: list = []
    try:
        report, rows = EXPERIMENTS[config.kind](config, man, tol)
    except Exception as exc:  # captured into the manifest, partial results still written
        man.errors.append({"error": type(exc).__name__, "message": str(exc),
                           "context": f"{config.kind} experiment {config.name!r}",
                           "traceback": traceback.format_exc(limit=3)})
    man.wall_clock = time.perf_counter() - t0
    doc = {"schema_version": SCHEMA_VERSION, "kind": config.kind, "config": config.to_json(),
           "config_hash": config.hash, "result": _jsonable(report),
           "assertions": [a.to_json() for a in man.assertions]}
    rpath = Path(report_path) if report_path else out / f"{config.name}.report.json"
    _write(rpath, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    man.outputs["report"] = str(rpath)
    if rows:
        cpath = out / f"{config.name}.curves.csv"
        _write(cpath, rows_to_csv(rows, list(CSV_SCHEMA[config.kind])))
        man.outputs["csv"] = str(cpath)
        script = gnuplot_script(config.kind, cpath.name)
        if script:
            gpath = out / f"{config.name}.gp"
            _write(gpath, script)
            man.outputs["gnuplot"] = str(gpath)
    mpath = out / f"{config.name}.manifest.json"
    _write(mpath, json.dumps(man.to_json(), sort_keys=True, indent=2) + "\n")
    man.outputs["manifest"] = str(mpath)
    return man


def _run_one(cfg: ExperimentConfig) -> RunManifest:
    return run(cfg)


def sweep(configs: Sequence[ExperimentConfig], parallelism: int = 1, *,
          name: str = "sweep", out_dir: Optional[str] = None) -> RunManifest:
    """Run a homogeneous family of configs and aggregate their manifests.

    mf families with perturbed spaces additionally get the co-movement
    assertion (rank correlation of gap and discrepancy against eta).
    """
    if not configs:
        raise ConfigError("sweep needs at least one config")
    kinds = {c.kind for c in configs}
    if len(kinds) != 1:
        raise ConfigError(f"sweep needs a single experiment kind, got {sorted(kinds)}")
    for c in configs:
        c.validate()
    if parallelism > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(parallelism) as pool:
            results = list(pool.map(_run_one, configs))
    else:
        results = [run(c) for c in configs]
    agg_hash = hashlib.sha256("".join(c.hash for c in configs).encode()).hexdigest()
    agg = RunManifest(config_hash=agg_hash, name=name, kind=kinds.pop())
    agg.wall_clock = sum(r.wall_clock for r in results)
    table = []
    for cfg, res in zip(configs, results):
        for a in res.assertions:
            agg.check(f"{cfg.name}/{a.name}", a.passed, a.value, a.tol, a.detail)
        for e in res.errors:
            agg.errors.append(dict(e, run=cfg.name))
        if agg.kind == "mf" and cfg.space and "perturb" in cfg.space and not res.errors:
            doc = json.loads(Path(res.outputs["report"]).read_text())["result"]
            table.append({"eta": cfg.space["perturb"].get("eta", 0.0), "gap": doc["gap"],
                          "discrepancy": doc["discrepancy"]})
    out = Path(out_dir or configs[0].out_dir)
    if len(table) >= 3:
        tol = TOL_PROFILES[configs[0].tol_profile]
        stats = _comove(table, agg, tol)
        cpath = out / f"{name}.curves.csv"
        _write(cpath, rows_to_csv(table, list(CSV_SCHEMA["almost-rigidity-sweep"])))
        agg.outputs["csv"] = str(cpath)
        agg.outputs["spearman"] = stats
    mpath = out / f"{name}.manifest.json"
    _write(mpath, json.dumps(agg.to_json(), sort_keys=True, indent=2) + "\n")
    agg.outputs["manifest"] = str(mpath)
    return agg


def almost_rigidity_family(etas=(0.0, 0.02, 0.05, 0.1, 0.15, 0.2), *, n: int = 400, f: str = "identity",
                           out_dir: str = ".", seed: int = 0, tol_profile: str = "desk"):
    base = {"generator": "sphere_fibonacci", "params": {"N": 2, "radius": 1.0, "n": n}}
    return [ExperimentConfig(kind="mf", space=dict(base, perturb={"eta": e, "seed": seed}),
                             params={"f": f, "N": 2, "bins": 16, "expect_equality": e == 0},
                             seed=seed, out_dir=out_dir, name=f"eta-{e:g}", tol_profile=tol_profile)
            for e in etas]


def short_circle_family(rhos=(0.5, 2 / 3, 0.9), *, nb: int = 64, out_dir: str = ".", seed: int = 0,
                        tol_profile: str = "desk", grid: str = "geo:16:0.002:0.25+lin:20:0.35:2.05"):
    out = []
    for rho in rhos:
        cone = {"base": {"generator": "circle", "params": {"circumference": 2 * np.pi * rho, "n": nb}},
                "K": 0, "N": 1, "grid": grid}
        out.append(ExperimentConfig(kind="dichotomy", cone=cone,
                                    params={"x0": 0, "r0": 1.0, "tgrid": "log:1e-3:1e-2:6",
                                            "expect_a": float(np.sin(np.pi * rho) / (np.pi * rho)),
                                            "half_resolution": False},
                                    seed=seed, out_dir=out_dir, name=f"rho-{rho:.4g}",
                                    tol_profile=tol_profile))
    return out


# --- command line -----------------------------------------------------------

def _params(items: Sequence[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _path_spec(path: str) -> dict:
    p = Path(path).resolve()
    return {"path": str(p)}


def _config_from_args(args, kind: str, params: dict, *, space=None, cone=None) -> ExperimentConfig:
    params = {k: v for k, v in params.items() if v is not None}
    return ExperimentConfig(kind=kind, space=space, cone=cone, params=params, seed=args.seed,
                            out_dir=args.out_dir, name=args.name or kind,
                            tol_profile=args.tol_profile).validate()


def _finish(man: RunManifest) -> int:
    for a in man.assertions:
        print(f"{'PASS' if a.passed else 'FAIL'} {a.name}: value={a.value} tol={a.tol}")
    for e in man.errors:
        print(f"ERROR {e['error']}: {e['message']}", file=sys.stderr)
    print(f"manifest: {man.outputs.get('manifest')}")
    return man.exit_code


def cmd_space(args) -> int:
    spec = {"generator": args.gen, "params": _params(args.param)}
    if args.perturb:
        spec["perturb"] = {"eta": args.perturb, "seed": args.seed}
    _check_space_spec(spec, "space", Path("."))
    space = build_space(spec)
    rep = validate_space(space)
    print(rep.summary())
    out = Path(args.out or Path(args.out_dir) / f"{args.gen}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_space(space, out)
    print(f"wrote {out}")
    return EXIT_OK if rep.valid else EXIT_FAIL


def cmd_cone(args) -> int:
    spec = {"base": _path_spec(args.base), "K": args.K, "N": args.N, "grid": args.grid}
    _check_cone_spec(spec, Path("."))
    cone = build_cone_spec(spec)
    out = Path(args.out or Path(args.out_dir) / "cone.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_cone(cone, out)
    print(f"{cone!r} -> {out}")
    return EXIT_OK


def cmd_mf(args) -> int:
    cfg = _config_from_args(args, "mf", {"f": args.f, "N": args.N, "bins": args.bins,
                                         "expect_equality": args.expect_equality},
                            space=_path_spec(args.space))
    return _finish(run(cfg, report_path=args.report))


def cmd_bg(args) -> int:
    cfg = _config_from_args(args, "bg", {"x0": args.x0, "K": args.K, "N": args.N, "rgrid": args.rgrid,
                                         "expect_equality": args.expect_equality},
                            space=_path_spec(args.space))
    return _finish(run(cfg, report_path=args.report))


def cmd_heat(args) -> int:
    space = _path_spec(args.space) if args.space else None
    if args.tgrid is None:
        cfg_space = build_space(space) if space else None
        model = build_model(args.method, cfg_space)
        mu = heat_measure(model, args.from_, args.t)
        out = Path(args.out or Path(args.out_dir) / "heat.json")
        out.parent.mkdir(parents=True, exist_ok=True)
        save_measure(mu, out)
        print(f"wrote {out}")
        return EXIT_OK
    points = [int(v) for v in args.points.split(",")] if args.points else [args.from_]
    cfg = _config_from_args(args, "heat", {"method": args.method, "tgrid": args.tgrid, "N": args.N,
                                           "points": points}, space=space)
    return _finish(run(cfg, report_path=args.report))


def cmd_ot(args) -> int:
    space = build_space(_path_spec(args.space))
    mu = load_measure(args.mu, space.n)
    nu = load_measure(args.nu, space.n)
    C = space.dist ** args.p
    if args.sinkhorn is not None:
        res = sinkhorn(mu, nu, C, args.sinkhorn)
        value = res.rounded_cost ** (1.0 / args.p)
    else:
        res = solve_ot_exact(mu, nu, C, p=args.p)
        value = res.value
    doc = {"method": res.method, "p": args.p, "cost": res.cost, "value": value,
           "iterations": res.iterations, "duality_gap": res.duality_gap,
           "marginal_violation": res.marginal_violation, "converged": res.converged}
    text = json.dumps(_jsonable(doc), sort_keys=True, indent=2)
    if args.report:
        _write(Path(args.report), text + "\n")
    print(text)
    return EXIT_OK


def cmd_theta(args) -> int:
    params = {"method": args.method, "pair": [int(v) for v in args.pair.split(",")], "tgrid": args.tgrid}
    if args.expect:
        params["expect"] = args.expect if args.expect == DIVERGENT else [float(v) for v in args.expect.split(",")]
    if args.contraction_K is not None:
        params["contraction_K"] = args.contraction_K
    if (args.space is None) == (args.cone is None):
        raise ConfigError("theta: give exactly one of --space or --cone")
    cfg = _config_from_args(args, "theta", params,
                            space=_path_spec(args.space) if args.space else None,
                            cone=_path_spec(args.cone) if args.cone else None)
    return _finish(run(cfg, report_path=args.report))


def cmd_dichotomy(args) -> int:
    params = {"x0": args.x0, "r0": args.r0, "tgrid": args.tgrid, "eps": args.eps,
              "half_resolution": not args.no_half}
    if args.expect:
        params["expect"] = args.expect
    cfg = _config_from_args(args, "dichotomy", params, cone=_path_spec(args.cone))
    return _finish(run(cfg, report_path=args.report))


def cmd_sweep(args) -> int:
    if args.config:
        configs = [ExperimentConfig.load(p) for p in args.config]
    elif args.family == "almost-rigidity":
        configs = almost_rigidity_family(out_dir=args.out_dir, seed=args.seed, tol_profile=args.tol_profile)
    elif args.family == "short-circle":
        configs = short_circle_family(out_dir=args.out_dir, seed=args.seed, tol_profile=args.tol_profile)
    else:
        raise ConfigError("sweep needs --config files or --family")
    return _finish(sweep(configs, args.parallelism, name=args.name or "sweep", out_dir=args.out_dir))


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.out_dir != ".":
        cfg.out_dir = args.out_dir
    return _finish(run(cfg, report_path=args.report))


def cmd_schema(args) -> int:
    doc = {"schema_version": SCHEMA_VERSION, "csv_columns": CSV_SCHEMA, "kinds": list(KINDS),
           "tolerance_profiles": TOL_PROFILES,
           "config_keys": ["kind", "space", "cone", "params", "seed", "out_dir", "name", "tol_profile"]}
    print(json.dumps(doc, sort_keys=True, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riccilab", description="Curvature experiments on finite mm-spaces.",
                                 allow_abbrev=False)
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default=".")
    ap.add_argument("--tol-profile", choices=sorted(TOL_PROFILES), default="desk")
    ap.add_argument("--name", default=None, help="run name used for output files")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("space", help="generate a model space")
    p.add_argument("--gen", required=True, choices=sorted(SPACE_GENERATORS))
    p.add_argument("--param", action="append", help="generator parameter key=value")
    p.add_argument("--perturb", type=float, default=None, help="metric perturbation size eta")
    p.add_argument("--out")
    p.set_defaults(func=cmd_space)

    p = sub.add_parser("cone", help="build a (K,N)-cone over a base space")
    p.add_argument("--base", required=True)
    p.add_argument("--K", type=float, default=0.0)
    p.add_argument("--N", type=float, required=True)
    p.add_argument("--grid", default="geo:64:0.01:4.0")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cone)

    p = sub.add_parser("mf", help="mean-distance functional against its model value")
    p.add_argument("--space", required=True)
    p.add_argument("--f", default="identity")
    p.add_argument("--N", type=float, default=2.0)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--expect-equality", action="store_true")
    p.add_argument("--report")
    p.set_defaults(func=cmd_mf)

    p = sub.add_parser("bg", help="Bishop-Gromov volume-ratio comparison")
    p.add_argument("--space", required=True)
    p.add_argument("--x0", type=int, default=0)
    p.add_argument("--K", type=float, default=0.0)
    p.add_argument("--N", type=float, required=True)
    p.add_argument("--rgrid", default="lin:32:0.05:3.0")
    p.add_argument("--expect-equality", action="store_true")
    p.add_argument("--report")
    p.set_defaults(func=cmd_bg)

    p = sub.add_parser("heat", help="heat flow of a Dirac mass, or the variance bound over a t-grid")
    p.add_argument("--space")
    p.add_argument("--method", default="graph:eps=auto")
    p.add_argument("--from", dest="from_", type=int, default=0)
    p.add_argument("--t", type=float, default=0.01)
    p.add_argument("--tgrid", default=None)
    p.add_argument("--points", default=None)
    p.add_argument("--N", type=float, default=None)
    p.add_argument("--out")
    p.add_argument("--report")
    p.set_defaults(func=cmd_heat)

    p = sub.add_parser("ot", help="transport distance between two measures")
    p.add_argument("--space", required=True)
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--p", type=int, default=2)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--exact", action="store_true")
    g.add_argument("--sinkhorn", type=float, default=None, metavar="EPS")
    p.add_argument("--report")
    p.set_defaults(func=cmd_ot)

    p = sub.add_parser("theta", help="short-time contraction rate between two points")
    p.add_argument("--space")
    p.add_argument("--cone")
    p.add_argument("--method", default="graph:eps=auto")
    p.add_argument("--pair", required=True)
    p.add_argument("--tgrid", default="log:1e-3:1e-1:8")
    p.add_argument("--expect", default=None, help="'divergent' or 'lo,hi'")
    p.add_argument("--contraction-K", type=float, default=None)
    p.add_argument("--report")
    p.set_defaults(func=cmd_theta)

    p = sub.add_parser("dichotomy", help="vertex dichotomy on a flat cone")
    p.add_argument("--cone", required=True)
    p.add_argument("--x0", type=int, default=0)
    p.add_argument("--r0", type=float, required=True)
    p.add_argument("--tgrid", default="log:1e-3:1e-2:8")
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--expect", default=None)
    p.add_argument("--no-half", action="store_true", help="skip the half-resolution rerun")
    p.add_argument("--report")
    p.set_defaults(func=cmd_dichotomy)

    p = sub.add_parser("sweep", help="run a family of experiments")
    p.add_argument("--config", nargs="*")
    p.add_argument("--family", choices=["almost-rigidity", "short-circle"])
    p.add_argument("--parallelism", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("run", help="run one experiment config file")
    p.add_argument("--config", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("schema", help="print config and CSV column schema")
    p.set_defaults(func=cmd_schema)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limit = threadpool_limits(args.threads) if args.threads else None
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError, IndexError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        if limit is not None:
            limit.unregister()


if __name__ == "__main__":
    sys.exit(main())
