"""Periodic homogenization with localized defects for semilinear elliptic problems.

The package computes correctors and homogenized tensors, solves the
oscillating and homogenized problems with P1 finite elements, builds
corrector-expansion approximate solutions and runs the frozen-Jacobian
fixed-point iteration together with convergence-rate studies.
"""

from .assembly import Problem, assemble_jacobian, assemble_semilinear_residual, assemble_stiffness, \
    dual_norm_surrogate, solve_spd
from .cell import CorrectorSet, FluxCorrectorSet, HomogenizedTensor, flux_correctors, homogenized_tensor, \
    periodic_average_bound_check, solve_cell_problems
from .coeffs import DefectCoefficient, NonCoerciveError, Nonlinearity, PeriodicCoefficient, \
    coercivity_constant, combined_coercivity, make_coefficient, make_defect, make_nonlinearity
from .corrector import ApproximateSolution, CutoffFamily, Mollifier, build_approximate_solution, build_cutoff, \
    steklov_smooth
from .mesh import DomainMesh, UnitCellGrid, boundary_strip_indicator, build_domain_mesh, build_unit_cell_grid
from .solver import FrozenNewtonReport, NonContractiveError, SolverConfig, frozen_newton_solve, \
    local_uniqueness_probe, newton_homogenized
from .study import ProblemSpec, RateStudyResult, defect_decay_study, fit_loglog, rate_study, residual_decay_study

__version__ = "0.1.0"

__all__ = [
    "ApproximateSolution", "CorrectorSet", "CutoffFamily", "DefectCoefficient", "DomainMesh", "FluxCorrectorSet",
    "FrozenNewtonReport", "HomogenizedTensor", "Mollifier", "NonCoerciveError", "NonContractiveError",
    "Nonlinearity", "PeriodicCoefficient", "Problem", "ProblemSpec", "RateStudyResult", "SolverConfig",
    "UnitCellGrid", "assemble_jacobian", "assemble_semilinear_residual", "assemble_stiffness",
    "boundary_strip_indicator", "build_approximate_solution", "build_cutoff", "build_domain_mesh",
    "build_unit_cell_grid", "coercivity_constant", "combined_coercivity", "defect_decay_study",
    "dual_norm_surrogate", "fit_loglog", "flux_correctors", "frozen_newton_solve", "homogenized_tensor",
    "local_uniqueness_probe", "make_coefficient", "make_defect", "make_nonlinearity", "newton_homogenized",
    "periodic_average_bound_check", "rate_study", "residual_decay_study", "solve_cell_problems",
    "solve_spd", "steklov_smooth",
]
