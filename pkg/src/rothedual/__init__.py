"""Rothe schemes for cross-diffusion systems and discrete duality estimates."""

__version__ = "0.1.0"

from .dual import (DualMap, DualProblem, DualSolution, RegularityEstimate, bar_D, estimate_K,
                   regularity_ratio, solve_dual, verify_interpolation, verify_perturbation)
from .estimates import (condition_check, find_admissible_p, growth_vs_estimate,
                        verify_discrete_duality)
from .exceptions import (AdmissibilityError, DomainError, InvalidParameterError,
                         ShapeMismatchError, SolverError)
from .grid import (Grid, apply_laplacian, build_grid, integrate, laplacian_eigenmode, lp_norm,
                   solve_dual_helmholtz, solve_primal_helmholtz)
from .models import (BUILTIN_MODELS, ModelSpec, builtin_model, check_reaction_growth,
                     check_structure, eval_model_at)
from .reports import EstimateReport, VerificationReport
from .rothe import (RotheTrajectory, StepOptions, monitor_check, refinement_study, rothe_step,
                    run)

__all__ = [name for name in dir() if not name.startswith("_")]
