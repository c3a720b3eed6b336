"""Smoluchowski coagulation dynamics with parametric kernel sensitivity.

The library solves the coagulation equation on an integer mass grid and
computes the parameter derivative of the solution by three mutually
cross-validating routes: the coupled sensitivity ODE, a backward-propagator
representation formula, and a coupled stochastic particle estimator.
"""
from .measures import (
    BoundFunction,
    DimensionError,
    GridMeasure,
    TestFunction,
    coag_apply,
    curly,
    norm_p,
    pair,
    read_measure_csv,
    sign_density,
    write_measure_csv,
)
from .kernels import (
    HypothesisError,
    KernelSpecError,
    ParametricKernel,
    TruncatedKernel,
    grad_check,
    make_kernel,
    truncate,
)
from .forward import (
    BlowUpError,
    MomentsTable,
    NegativityError,
    SolveOptions,
    Trajectory,
    integrate_ode,
    moments_report,
    rhs,
    solve_forward,
)
from .sensitivity import SensitivityBlock, SensitivityPath, sensitivity_rhs, solve_coupled
from .propagator import (
    DualPath,
    SeriesDivergenceError,
    SolverFault,
    SplitOperators,
    growth_bound_check,
    lambda_apply,
    lambda_partial_apply,
    propagator_cocycle_check,
    propagator_norm_constants,
    representation_sensitivity,
    solve_backward,
    solve_backward_duhamel,
)
from .stochastic import (
    CoupledFDResult,
    EmpiricalTrajectory,
    ParticleSystem,
    coupled_fd_sensitivity,
    ml_run,
)
from .validation import (
    ConvergenceTable,
    Finding,
    HypothesisReport,
    analytic_constant_kernel,
    analytic_sensitivity_constant,
    fd_oracle,
    hypothesis_check,
    kolokoltsov_tv_check,
    number_identity_residual,
    truncation_sweep,
)

__version__ = "0.1.0"
