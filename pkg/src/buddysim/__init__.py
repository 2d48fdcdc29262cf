"""Trace-driven simulator and decision library for expert substitution in
memory-constrained mixture-of-experts inference."""

from .buddies import (
    BuddyEntry,
    BuddyTable,
    build_table,
    cft_prefix,
    load_table,
    save_table,
    table_size_report,
)
from .config import ExperimentConfig, default_config, load_config
from .errors import (
    BuddySimError,
    CalibrationError,
    ConfigurationError,
    DegeneratePivotError,
    FormatError,
    InputError,
    InternalError,
    InvariantViolation,
)
from .gating import (
    BetaController,
    GateConfig,
    GateOutcome,
    calibrate_tau,
    derive_beta,
    distribution_gate,
    evaluate_gates,
    margin,
    tae,
    token_gate,
)
from .harness import (
    SimResult,
    cmd_build,
    cmd_profile,
    cmd_report,
    cmd_simulate,
    fidelity,
    run_oracle,
    run_simulation,
)
from .memtier import (
    CostModel,
    ResidencyState,
    RunMetrics,
    SimClock,
    SimEvent,
    access,
    init_residency,
    prefetch,
    settle,
    step_metrics,
)
from .model import (
    Expert,
    Model,
    ModelSpec,
    RouterDecision,
    build_model,
    forward_batch,
    forward_layer,
    route,
    route_batch,
    token_stream,
)
from .profiler import (
    CoActivationStats,
    ConditionalRow,
    conditional_row,
    load_stats,
    merge,
    observe,
    save_stats,
)
from .substitution import (
    PlanSlot,
    PsiParams,
    ReplacementPlan,
    SubstitutionConfig,
    Topology,
    identity_plan,
    ondemand_plan,
    psi_score,
    random_plan,
    substitute_batch,
    substitute_token,
)

__version__ = "0.1.0"
