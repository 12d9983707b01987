"""monofem: P1 finite elements for the monodomain reaction-diffusion system
with residual-based a posteriori error indicators.

Subpackages: `mesh` (structured nested triangulations), `assembly` (P1
matrices and quadrature), `ionic` (Aliev-Panfilov kinetics), `solver`
(implicit Euler + Newton-Galerkin), `estimators` (space/time/linearization
indicators and the cumulative bound), `verify` (reference solutions, X/Y
error norms and the three studies), `cli` (experiment commands).
"""

from .mesh import (TriMesh, unit_square_mesh, refine_uniform, mesh_chain,
                   element_geometry, prolongation, write_vtk)
from .assembly import (QuadratureRule, ConductivityTensor, quadrature_rule,
                       mass_matrix, stiffness_matrix, weighted_mass_matrix,
                       l2_project, evaluate_p1, DiscreteOperators)
from .ionic import AlievPanfilovParams, ReactionEval, react, initial_data
from .solver import (StateField, NewtonConfig, TrajectorySolution,
                     sparse_solve, newton_step, newton_solve, time_march,
                     SolverError, NewtonError)
from .estimators import (space_indicator, time_indicator,
                         linearization_indicator, simplified_indicators,
                         cumulative_bound, estimate_trajectory,
                         EstimatorReport, TrajectoryEstimate)
from .verify import (ErrorNorms, StudyResult, build_reference, xy_error,
                     error_curve, upper_bound_study, convergence_study,
                     newton_study)

__version__ = "0.1.0"
