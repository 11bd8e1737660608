"""Compile and simulate time-division-multiplexed electrode voltages for ion traps."""

from .errors import (
    ConfigError,
    ConfigViolation,
    InfeasibleTiming,
    InvalidTopology,
    NegativeParameter,
    NumericalBlowup,
    ScheduleError,
    TdmError,
)
from .model import (
    CrosstalkMatrix,
    DacSpec,
    DemuxStage,
    DemuxTopology,
    DynamicRouting,
    LeakageSpec,
    SwitchSpec,
    SystemConfig,
    derive_timing,
    load_config,
    validate_config,
)
from .scheduler import (
    Frame,
    Purpose,
    Slot,
    VoltageProgram,
    check_timing,
    compile_dynamic_stream,
    compile_static_frame,
    effective_update_rate,
)
from .simulator import SimOptions, TraceSet, run

__all__ = [
    "ConfigError", "ConfigViolation", "InfeasibleTiming", "InvalidTopology", "NegativeParameter",
    "NumericalBlowup", "ScheduleError", "TdmError",
    "CrosstalkMatrix", "DacSpec", "DemuxStage", "DemuxTopology", "DynamicRouting", "LeakageSpec",
    "SwitchSpec", "SystemConfig", "derive_timing", "load_config", "validate_config",
    "Frame", "Purpose", "Slot", "VoltageProgram", "check_timing", "compile_dynamic_stream",
    "compile_static_frame", "effective_update_rate",
    "SimOptions", "TraceSet", "run",
]
