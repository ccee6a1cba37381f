"""Game-theoretic demand-side management: horizon-coupled prosumer games
solved as feedback policies, with day-ahead and no-DSM baselines."""

__version__ = "0.1.0"

from .model import (
    BatteryParams,
    FlexParams,
    ModelError,
    PriceRates,
    ProsumerParams,
    ProsumerState,
    aggregate_load,
    local_load,
    price,
    stage_cost,
    step_state,
)
from .game import (
    GameError,
    GameQP,
    Layout,
    ScenarioWindow,
    assemble,
    build_layout,
    condense,
    gradient_audit,
    monotonicity_modulus,
    potential_value,
    prosumer_cost,
    pseudo_gradient,
)
from .solver import (
    Solution,
    SolverError,
    SteadyState,
    kkt_residual,
    nash_check,
    solve_steady_state,
    solve_vgne_direct,
    solve_vgne_iterative,
)
from .sim import (
    DisturbanceSpec,
    MetricsReport,
    Scenario,
    SimulationError,
    SolverSettings,
    Trace,
    metrics,
    rhg_policy,
    run_day_ahead,
    run_no_dsm,
    run_receding_horizon,
    run_mode,
)

__all__ = [name for name in dir() if not name.startswith("_")]
