"""Emergency load shedding and redispatch in the current-voltage formulation.

Typical use::

    from gridrelief import RunConfig, bundled_case, run_scenario

    cfg = RunConfig(str(bundled_case()), "linear-robust", load_scale=1.15, contingency_bus=24)
    report = run_scenario(cfg)
"""

from .case_io import (
    FORMULATIONS,
    CaseFormatError,
    CaseParseError,
    CaseReferenceError,
    ConfigError,
    Costs,
    RunConfig,
    bundled_case,
    load_case,
    load_run_config,
    load_run_configs,
    parse_matpower_case,
    write_matpower_case,
)
from .evaluation import (
    ComparisonTable,
    ControlMetrics,
    EvaluationReport,
    ScenarioError,
    Violation,
    ViolationReport,
    check_exact_feasibility,
    compare_formulations,
    compute_metrics,
    objective_ordering_holds,
    prepare_scenario,
    run_scenario,
    solve_scenario,
)
from .formulation import KINDS, Sides, build_formulation, extract_solution
from .network import (
    Branch,
    Bus,
    Demand,
    Machine,
    Network,
    NetworkError,
    SystemState,
    apply_branch_contingency,
    apply_bus_contingency,
    build_branch_admittance,
    build_bus_admittance,
    connected_components,
    deenergize_islands,
    emergency_limits,
    energized_mask,
    scale_demands,
)
from .powerflow import (
    ConvergenceError,
    PowerFlowOptions,
    ReferencePoint,
    balance_dispatch,
    compute_reference,
    injection_residual,
    newton_power_flow,
    power_from_iv,
    solve_power_flow,
)
from .program import ConicProgram, SolverOptions, SolverResult, solve_program

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
