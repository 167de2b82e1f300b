"""Solver and experiment harness for backward SDEs with quadratic-growth
drivers: non-uniform time nets, projected least-squares Monte Carlo, and
closed-form reference oracles."""

from .analysis import (
    AssumptionReport,
    RegularityStat,
    ViolationReport,
    check_hx1,
    check_hx1_doubleprime,
    check_time_dependent_bound,
    estimate_bmo_norm,
    path_regularity_statistic,
)
from .condexp import (
    LsmcEngine,
    QuadratureChain,
    QuadratureEngine,
    RegressionBasis,
    RegressionError,
    build_quadrature_chain,
    fit_conditional_expectation,
)
from .oracles import (
    ReferenceSolution,
    bounded_z_2d,
    builtin_names,
    builtin_problem,
    cole_hopf_reference,
    linear_reference,
    reference_for,
    zhang_gradient,
)
from .problem import (
    MollifiedTerminal,
    ProblemSpec,
    QuadraticDriver,
    SchemeRates,
    SdeModel,
    TerminalCondition,
    TruncatedDriver,
    ZBoundParams,
    check_declared_constants,
    load_problem,
    mollify_terminal,
    project_z,
    projection_radius,
    select_scheme_parameters,
    truncate_driver,
    uniform_z_bound,
)
from .scheme import (
    DiscreteSolution,
    EngineSpec,
    ErrorReport,
    PathEnsemble,
    SchemeConfig,
    SimulationError,
    SweepError,
    backward_sweep,
    calibrate_projection,
    discretization_error,
    simulate_euler,
    solve,
)
from .timegrid import (
    GridError,
    TimeGrid,
    build_grid,
    build_reduced_grid,
    dump_times,
    lemma_product_singular,
    lemma_product_uniform,
    max_step,
    uniform_grid,
)

__version__ = "0.1.0"
