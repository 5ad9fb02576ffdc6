"""Chance-constrained stochastic MPC via polynomial chaos propagation.

The package splits into layers that mirror how a problem is posed:

* :mod:`pcmpc.distributions`, :mod:`pcmpc.basis` -- parameter marginals and
  the orthogonal polynomial basis with its quadrature and triple products.
* :mod:`pcmpc.galerkin` -- projection of an uncertain linear plant onto the
  basis, producing deterministic lifted coefficient dynamics.
* :mod:`pcmpc.moments` -- exact mean/covariance propagation of the lifted
  state under affine feedback.
* :mod:`pcmpc.controller` -- the receding-horizon solver: quadratic cost in
  the coefficients, distributionally robust chance constraints, fixed-gain
  and joint gain/offset modes.
* :mod:`pcmpc.stability` -- Lyapunov certificates and sampled audits of the
  drift and value-function bounds.
* :mod:`pcmpc.sim` -- closed-loop plants, a certainty-equivalence baseline,
  and matched-seed Monte Carlo.
* :mod:`pcmpc.config`, :mod:`pcmpc.cli` -- TOML experiment descriptions and
  the command-line runner.
"""

from .basis import (
    PolyBasis,
    TripleProductTensor,
    basis_norms,
    build_basis,
    expansion_moments,
    multi_indices,
    project_function,
    triple_products,
)
from .config import (
    Experiment,
    ExperimentConfig,
    assemble_experiment,
    build_system,
    config_from_dict,
    config_to_dict,
    load_config,
)
from .controller import (
    ChanceConstraint,
    CostWeights,
    Policy,
    SmpcProblem,
    SmpcSolution,
    build_problem,
    chance_constraint_value,
    cost,
    kappa,
    moment_trajectory,
    mpc_step,
    solve_fixed_gain,
    solve_joint,
    solve_smpc,
)
from .distributions import MarginalDistribution
from .errors import (
    CertificateError,
    ConditioningError,
    ConfigError,
    DegreeOverflowError,
    EvaluationError,
    ParameterError,
    PcmpcError,
    QpInfeasibleError,
    SmpcInfeasibleError,
)
from .galerkin import (
    GpcDynamics,
    LiftedPolicy,
    PolynomialMatrix,
    UncertainLinearSystem,
    lift_policy,
    lift_state,
    project_system,
)
from .moments import (
    MomentState,
    MomentTrajectory,
    propagate,
    state_mean,
    state_second_moment,
    state_variance,
)
from .qp import QpSolution, solve_qp
from .sim import (
    ControllerStats,
    HistogramSet,
    MonteCarloSetup,
    MonteCarloSummary,
    NominalMpcController,
    RunRecord,
    SmpcController,
    StepResult,
    TruePlant,
    ZeroController,
    monte_carlo,
    nominal_mpc_controller,
    sample_plant,
    simulate_closed_loop,
)
from .stability import (
    BoundednessReport,
    DriftReport,
    ResidualReport,
    StabilityCertificate,
    ValueBoundReport,
    boundedness_trace,
    build_certificate,
    drift_check,
    residual_check,
    solve_lyapunov,
    terminal_gain,
    value_bound_check,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # basis
    "PolyBasis",
    "TripleProductTensor",
    "basis_norms",
    "build_basis",
    "expansion_moments",
    "multi_indices",
    "project_function",
    "triple_products",
    # config
    "Experiment",
    "ExperimentConfig",
    "assemble_experiment",
    "build_system",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    # controller
    "ChanceConstraint",
    "CostWeights",
    "Policy",
    "SmpcProblem",
    "SmpcSolution",
    "build_problem",
    "chance_constraint_value",
    "cost",
    "kappa",
    "moment_trajectory",
    "mpc_step",
    "solve_fixed_gain",
    "solve_joint",
    "solve_smpc",
    # distributions
    "MarginalDistribution",
    # errors
    "CertificateError",
    "ConditioningError",
    "ConfigError",
    "DegreeOverflowError",
    "EvaluationError",
    "ParameterError",
    "PcmpcError",
    "QpInfeasibleError",
    "SmpcInfeasibleError",
    # galerkin
    "GpcDynamics",
    "LiftedPolicy",
    "PolynomialMatrix",
    "UncertainLinearSystem",
    "lift_policy",
    "lift_state",
    "project_system",
    # moments
    "MomentState",
    "MomentTrajectory",
    "propagate",
    "state_mean",
    "state_second_moment",
    "state_variance",
    # qp
    "QpSolution",
    "solve_qp",
    # sim
    "ControllerStats",
    "HistogramSet",
    "MonteCarloSetup",
    "MonteCarloSummary",
    "NominalMpcController",
    "RunRecord",
    "SmpcController",
    "StepResult",
    "TruePlant",
    "ZeroController",
    "monte_carlo",
    "nominal_mpc_controller",
    "sample_plant",
    "simulate_closed_loop",
    # stability
    "BoundednessReport",
    "DriftReport",
    "ResidualReport",
    "StabilityCertificate",
    "ValueBoundReport",
    "boundedness_trace",
    "build_certificate",
    "drift_check",
    "residual_check",
    "solve_lyapunov",
    "terminal_gain",
    "value_bound_check",
]
