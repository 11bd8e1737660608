"""Exception hierarchy shared by every tdmvolt module."""

from __future__ import annotations


class TdmError(Exception):
    """Base class for all tdmvolt errors."""


# -- configuration ---------------------------------------------------------


class ConfigViolation(TdmError, ValueError):
    """A single violated configuration invariant."""

    kind = "ConfigViolation"

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.message = message
        self.field = field

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.message!r})"

    def __eq__(self, other: object) -> bool:
        return (
            type(self) is type(other)
            and self.message == other.message  # type: ignore[attr-defined]
            and self.field == other.field  # type: ignore[attr-defined]
        )

    def __hash__(self) -> int:
        return hash((type(self).__name__, self.message, self.field))


class InvalidTopology(ConfigViolation):
    kind = "InvalidTopology"


class InfeasibleTiming(ConfigViolation):
    kind = "InfeasibleTiming"


class NegativeParameter(ConfigViolation):
    kind = "NegativeParameter"


class ConfigError(TdmError, ValueError):
    """Raised by ``validate_config``; carries every violation found."""

    def __init__(self, violations: list[ConfigViolation]):
        self.violations = list(violations)
        lines = "\n".join(f"  {v.kind}: {v.message}" for v in self.violations)
        super().__init__(f"{len(self.violations)} configuration violation(s):\n{lines}")


# -- scheduling ------------------------------------------------------------


class ScheduleError(TdmError, ValueError):
    pass


class MixedProgramKinds(ScheduleError):
    pass


class ChannelCountMismatch(ScheduleError):
    pass


class SampleRateMismatch(ScheduleError):
    pass


class ProgramRangeError(ScheduleError):
    """A programmed voltage lies outside the DAC full scale."""


class TopologyEncodingUnsupported(ScheduleError):
    pass


class InvalidOneHot(ScheduleError):
    pass


class ZoneOutOfRange(ScheduleError):
    pass


# -- waveforms / simulation / metrics --------------------------------------


class AmplitudeExceedsFullScale(TdmError, ValueError):
    pass


class NumericalBlowup(TdmError, RuntimeError):
    pass


class ZeroDrive(TdmError, ValueError):
    pass
