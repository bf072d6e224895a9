"""Monte-Carlo solver and certifier for constrained optimal control of
Galerkin-truncated stochastic evolution equations with jumps."""

__version__ = "0.1.0"

from .adjoint import (AdjointTriple, DualityReport, Multipliers, RegressionSpec,  # noqa: E402
                      duality_check, solve_adjoint)
from .config import Setup, build, load_config  # noqa: E402
from .errors import (ConfigurationError, DivergenceError, NumericalError,  # noqa: E402
                     PreconditionError, StallError)
from .forward import CostReport, StatePath, apriori_check, evaluate_cost, simulate_forward  # noqa: E402
from .gelfand import (CoercivityCertificate, GalerkinSpace, OperatorPair,  # noqa: E402
                      check_coercivity, heat_space, make_heat_pair)
from .hamiltonian import hamiltonian, hamiltonian_partials  # noqa: E402
from .noise import MarkSpace, NoiseBundle, TimeGrid, compensated_sum, sample_noise  # noqa: E402
from .optimizer import (OptimizationTrace, OptimizerConfig, PenaltyState,  # noqa: E402
                        ekeland_optimize, gateaux_derivative, mp_residual, penalized_cost)
from .problem import (ControlProcess, ControlSet, ProblemSpec, control_distance,  # noqa: E402
                      convex_perturbation, make_bilinear_problem, make_lq_problem,
                      project_control)
