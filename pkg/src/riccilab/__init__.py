"""Numerical laboratory for synthetic Ricci curvature on finite metric measure spaces."""

__version__ = "0.1.0"

from .mmspace import (FiniteMMSpace, ProbMeasure, circle, interval_model, load_space, perturb_metric,
                      product_space, save_space, sphere_fibonacci, validate_space)
from .geometry import ConeSpace, bishop_gromov_check, build_cone, homothety_pushforward, suspension
from .functionals import cos_potential, entropy, m_f, m_f_star, rigidity_report
from .transport import sinkhorn, solve_ot_exact, w1, w2, wasserstein
from .heat import (ConeHeatModel, HeatModel, bessel_radial_law, build_generator_graph,
                   build_generator_sturm, heat_measure, vertex_heat_measure)
from .curvature import cone_dichotomy, contraction_check, theta_plus_estimate, theta_star_estimate

__all__ = [
    "FiniteMMSpace", "ProbMeasure", "circle", "interval_model", "load_space", "perturb_metric",
    "product_space", "save_space", "sphere_fibonacci", "validate_space",
    "ConeSpace", "bishop_gromov_check", "build_cone", "homothety_pushforward", "suspension",
    "cos_potential", "entropy", "m_f", "m_f_star", "rigidity_report",
    "sinkhorn", "solve_ot_exact", "w1", "w2", "wasserstein",
    "ConeHeatModel", "HeatModel", "bessel_radial_law", "build_generator_graph",
    "build_generator_sturm", "heat_measure", "vertex_heat_measure",
    "cone_dichotomy", "contraction_check", "theta_plus_estimate", "theta_star_estimate",
]
