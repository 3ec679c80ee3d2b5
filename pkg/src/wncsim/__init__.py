"""Event-triggered control loops sharing a lossy contention-based channel."""

__version__ = "0.1.0"

from .dynamics import PlantState, SubsystemModel, control_input, measure, step_plant
from .engine import (
    MonteCarloResult,
    Scenario,
    StabilityReport,
    Telemetry,
    compile_gains,
    run_batch,
    run_monte_carlo,
    run_slot,
    run_trial,
    stability_diagnostic,
    theoretic_step_cost,
    trial_streams,
)
from .errors import (
    ConfigError,
    ModelInvalidError,
    NumericError,
    ScenarioValidationError,
    SolverFailureError,
)
from .estimation import (
    RemoteEstimatorState,
    SmartSensorState,
    conventional_estimator_step,
    innovation_discrepancy,
    smart_remote_step,
    smart_sensor_filter_step,
)
from .network import (
    ContentionFrame,
    IdentifierLayout,
    arbitrate,
    arbitrate_multichannel,
    build_identifier,
    resolve_contention,
    transmit,
)
from .numerics import (
    OfflineGains,
    compute_offline_gains,
    control_weight,
    feedback_gain,
    riccati_correct,
    riccati_predict,
    sample_gaussian,
    solve_dare,
    spectral_radius,
    steady_state_covariance,
)
from .policy import (
    PolicyConfig,
    TriggerDecision,
    evaluate_coil,
    evaluate_coil_bar,
    evaluate_sod,
    evaluate_voi,
    vbt_sleep_horizon,
)
from .scenario import build_preset, config_hash, load_config, parse_scenario
