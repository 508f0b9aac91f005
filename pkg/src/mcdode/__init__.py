"""Multi-class dynamic OD demand estimation on a sparse computational graph."""

from .estimate import (
    EstimationResult,
    ForwardState,
    Scenario,
    SolverConfig,
    backward,
    check_convergence,
    forward,
    grad_prior,
    parallel_gradients,
    run_estimation,
    step,
)
from .estimator import DemandEstimator
from .net import Network, TimeGrid, build_network, builtin_scenario, load_scenario
from .obs import BaselineProtocol, DataSample, ObservationMap, observe_flow, observe_tt, synthesize_truth

__version__ = "0.1.0"

__all__ = [
    "BaselineProtocol",
    "DataSample",
    "DemandEstimator",
    "EstimationResult",
    "ForwardState",
    "Network",
    "ObservationMap",
    "Scenario",
    "SolverConfig",
    "TimeGrid",
    "backward",
    "build_network",
    "builtin_scenario",
    "check_convergence",
    "forward",
    "grad_prior",
    "load_scenario",
    "observe_flow",
    "observe_tt",
    "parallel_gradients",
    "run_estimation",
    "step",
    "synthesize_truth",
]
