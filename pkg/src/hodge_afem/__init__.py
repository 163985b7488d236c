"""Adaptive mixed finite elements for the Hodge Laplacian of top forms on closed surfaces.

The discrete problem lives on a flat polyhedral surface ``M_A``; inner products
of the true surface ``M`` enter through the closest-point projection.
"""

from .adapt import (AmfemConfig, AmfemHistory, AmfemIteration, amfem_run, approx_data,
                    contraction_report, dorfler_mark, rate_fit, verify_lemmas)
from .errors import HodgeAfemError
from .estimator import IndicatorField, element_indicators, oscillation
from .feec import (FormVector, MeshGeometry, exterior_derivative_matrix, l2_projection_top,
                   mass_matrix)
from .geometry import get_surface, normal_projection, quadrature_rule
from .mesh import SurfaceMesh, bisect, build_initial, is_refinement_of, uniform_refine
from .solver import assemble_mixed, manufactured_solution, reference_error, solve_mixed

__version__ = "0.1.0"

__all__ = [
    "AmfemConfig", "AmfemHistory", "AmfemIteration", "FormVector", "HodgeAfemError",
    "IndicatorField", "MeshGeometry", "SurfaceMesh", "amfem_run", "approx_data",
    "assemble_mixed", "bisect", "build_initial", "contraction_report", "dorfler_mark",
    "element_indicators", "exterior_derivative_matrix", "get_surface", "is_refinement_of",
    "l2_projection_top", "manufactured_solution", "mass_matrix", "normal_projection",
    "oscillation", "quadrature_rule", "rate_fit", "reference_error", "solve_mixed",
    "uniform_refine", "verify_lemmas",
]
