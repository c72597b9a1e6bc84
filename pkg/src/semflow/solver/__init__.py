from .chebyshev import ChebyshevSmoother, ConfigurationError, chebyshev_smooth, estimate_lambda_max
from .coarse import CoarseProblem, coarse_solve
from .krylov import SolveResult, SolverError, jacobi, pcg
from .operators import HelmholtzOp, OperatorError
from .pmg import PMGHierarchy, default_schedule, pmg_vcycle, reduced_precision_precondition
from .projection import ProjectionSpace, project_guess

__all__ = [
    "ChebyshevSmoother", "ConfigurationError", "chebyshev_smooth", "estimate_lambda_max",
    "CoarseProblem", "coarse_solve", "SolveResult", "SolverError", "jacobi", "pcg",
    "HelmholtzOp", "OperatorError", "PMGHierarchy", "default_schedule", "pmg_vcycle",
    "reduced_precision_precondition", "ProjectionSpace", "project_guess",
]
