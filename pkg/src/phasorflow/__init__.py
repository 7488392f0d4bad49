"""Unbalanced three-phase feeder modeling, exact and linearized power flow,
phasor-tracking DER dispatch, and switch-closure studies."""

from .model import (
    DerSpec,
    LineConfig,
    LineSpec,
    LoadSpec,
    Network,
    NetworkError,
    NodeSpec,
    VvcSpec,
)
from .feeders import (
    apply_modifications,
    dump_feeder,
    load_feeder,
    merge_with_switch,
    network_from_dict,
    network_to_dict,
    relabel_nodes,
    scale_loads,
)
from .exact import (
    NonConvergenceError,
    PhasorSolution,
    kcl_residual,
    solve_exact,
    switch_flow_estimate,
)
from .linear import (
    LinearSolution,
    MnPair,
    angle_residual,
    assemble,
    build_mn,
    exact_mn,
    solve_linear,
)
from .opf import (
    Dispatch,
    DispatchConvergenceError,
    InfeasibleError,
    KktReport,
    OpfProblem,
    build_opf,
    kkt_check,
    solve_opf,
)
from .experiments import (
    CaseResult,
    ErrorRecord,
    ScenarioReport,
    build_scenario_network,
    error_metrics,
    load_scenario,
    monte_carlo,
    report_to_dict,
    run_sequential_switching,
    run_switch_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "DerSpec",
    "LineConfig",
    "LineSpec",
    "LoadSpec",
    "Network",
    "NetworkError",
    "NodeSpec",
    "VvcSpec",
    "apply_modifications",
    "dump_feeder",
    "load_feeder",
    "merge_with_switch",
    "network_from_dict",
    "network_to_dict",
    "relabel_nodes",
    "scale_loads",
    "NonConvergenceError",
    "PhasorSolution",
    "kcl_residual",
    "solve_exact",
    "switch_flow_estimate",
    "LinearSolution",
    "MnPair",
    "angle_residual",
    "assemble",
    "build_mn",
    "exact_mn",
    "solve_linear",
    "Dispatch",
    "DispatchConvergenceError",
    "InfeasibleError",
    "KktReport",
    "OpfProblem",
    "build_opf",
    "kkt_check",
    "solve_opf",
    "CaseResult",
    "ErrorRecord",
    "ScenarioReport",
    "build_scenario_network",
    "error_metrics",
    "load_scenario",
    "monte_carlo",
    "report_to_dict",
    "run_sequential_switching",
    "run_switch_scenario",
    "__version__",
]
