"""Probe-and-release coordination of CAV platoons at a bottleneck with capacity drop."""
from ._backend import BACKEND
from .config import Plant, Scenario, apply_schedule_patch, load_scenario
from .controller import (
    Phase,
    PriorKnowledge,
    ProbeReleaseController,
    Schedule,
    clamp_control,
    compute_schedule,
    predict_queue,
    release_control,
    steer_control,
)
from .distributions import BoundedDist
from .estimator import (
    EstimatorConfig,
    Estimates,
    ErrorVector,
    critical_value,
    estimated_flow,
    normalized_errors,
    reset_max_estimates,
    theta_alpha,
    update_round,
)
from .harness import run_monte_carlo, run_scenario
from .model import (
    ControlDecomposition,
    DemandModel,
    FlowParams,
    NoiseModel,
    TrafficState,
    flow_function,
    l1_norm,
    sample_demand,
    sample_outflow,
    step_dynamics,
    time_average_l1,
)

__all__ = [name for name in dir() if not name.startswith("_")]
