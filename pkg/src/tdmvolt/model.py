"""Hardware description of a TDM electrode-voltage chain.

Every physical quantity carries its SI unit in the field name.  All types are
frozen dataclasses so a validated config can be shared freely between
compilations and simulation runs.

Timing is kept exact: the DAC period is a :class:`fractions.Fraction` of a
second, and downstream code counts integer ticks of that clock.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    ConfigError,
    ConfigViolation,
    InfeasibleTiming,
    InvalidTopology,
    NegativeParameter,
)

DEFAULT_K_SETTLE = 5.0
DEFAULT_SHARE_REFRESH_BUDGET = 8


def exact(value: float | int | Fraction) -> Fraction:
    """Exact rational for a frequency or duration given as a float."""
    if isinstance(value, Fraction):
        return value
    return Fraction(value)


# ============================================================================
# Component specs
# ============================================================================


@dataclass(frozen=True)
class DacSpec:
    update_rate_hz: float
    resolution_bits: int
    full_scale_v: float  # symmetric range, +/- full_scale_v after amplification
    settle_time_constant_s: float = 0.0  # first-order lag of DAC + amplifier

    @property
    def max_code(self) -> int:
        # symmetric signed codes; -2**(bits-1) is left unused so that 0 V and
        # both rails are exactly representable
        return 2 ** (self.resolution_bits - 1) - 1

    @property
    def lsb_v(self) -> float:
        return self.full_scale_v / self.max_code

    def quantize(self, volts: float) -> int:
        code = int(round(volts / self.lsb_v))
        return max(-self.max_code, min(self.max_code, code))

    def dequantize(self, code: int) -> float:
        return code * self.lsb_v


@dataclass(frozen=True)
class SwitchSpec:
    r_on_ohm: float  # no default on purpose: must come from the user
    c_on_f: float = 0.0  # lumped at the mux common node
    injected_charge_c: float = 0.0  # per OFF->ON transition, signed
    off_leak_resistance_ohm: float | None = None


@dataclass(frozen=True)
class DemuxStage:
    fanout: int
    outputs_used: int
    switch: SwitchSpec
    hold_capacitance_f: float
    has_decoder: bool = True

    @property
    def address_bits(self) -> int:
        return math.ceil(math.log2(max(self.fanout, 1)))


@dataclass(frozen=True)
class DemuxTopology:
    stages: tuple[DemuxStage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def total_channels(self) -> int:
        return math.prod(s.outputs_used for s in self.stages)

    @property
    def two_stage(self) -> bool:
        return len(self.stages) == 2


@dataclass(frozen=True)
class DynamicRouting:
    """1:M switch network behind each of the K demux outputs."""

    k_demux_outputs: int
    m_switch_fanout: int
    active_group: int = 0

    @property
    def electrode_count(self) -> int:
        return self.k_demux_outputs * self.m_switch_fanout


@dataclass(frozen=True)
class LeakageSpec:
    """Linear droop, proportional to the held voltage."""

    droop_rate_v_per_s: float = 0.0
    reference_voltage_v: float = 10.0


@dataclass(frozen=True)
class CrosstalkMatrix:
    """Victim-row / aggressor-column coupling of committed voltage steps."""

    coupling: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        rows = tuple(tuple(float(c) for c in row) for row in self.coupling)
        object.__setattr__(self, "coupling", rows)

    @classmethod
    def zeros(cls, n: int) -> CrosstalkMatrix:
        return cls(tuple((0.0,) * n for _ in range(n)))

    @classmethod
    def from_array(cls, arr) -> CrosstalkMatrix:
        return cls(tuple(tuple(row) for row in np.asarray(arr, dtype=float)))

    @classmethod
    def from_pairs(cls, n: int, pairs: dict[tuple[int, int], float]) -> CrosstalkMatrix:
        arr = np.zeros((n, n))
        for (victim, aggressor), c in pairs.items():
            arr[victim, aggressor] = c
        return cls.from_array(arr)

    @property
    def size(self) -> int:
        return len(self.coupling)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.coupling, dtype=float).reshape(self.size, self.size)

    @property
    def is_zero(self) -> bool:
        return not any(c for row in self.coupling for c in row)


@dataclass(frozen=True)
class SystemConfig:
    dac: DacSpec
    topology: DemuxTopology
    per_channel_rate_hz: float
    leakage: LeakageSpec = field(default_factory=LeakageSpec)
    crosstalk: CrosstalkMatrix | None = None  # None means no coupling
    routing: DynamicRouting | None = None
    electrode_count: int | None = None  # derived from topology when omitted
    k_settle: float = DEFAULT_K_SETTLE
    two_step_charging: bool = True
    share_refresh_budget: int = DEFAULT_SHARE_REFRESH_BUDGET
    clock_subdivision: int = 16  # ticks per DAC period in exported schedules
    name: str = ""

    def __post_init__(self):
        if self.electrode_count is None:
            object.__setattr__(self, "electrode_count", expected_electrode_count(self))

    @property
    def slot_duration_s(self) -> Fraction:
        return 1 / exact(self.dac.update_rate_hz)

    @property
    def coupling(self) -> np.ndarray:
        if self.crosstalk is None:
            return np.zeros((self.electrode_count, self.electrode_count))
        return self.crosstalk.array

    def with_(self, **changes) -> SystemConfig:
        """``dataclasses.replace`` that re-derives ``electrode_count``."""
        if "electrode_count" not in changes and ("topology" in changes or "routing" in changes):
            changes["electrode_count"] = None
        return replace(self, **changes)


def expected_electrode_count(cfg: SystemConfig) -> int:
    if cfg.routing is not None:
        return cfg.routing.electrode_count
    return cfg.topology.total_channels


# ============================================================================
# Derived structure
# ============================================================================


def slots_per_refresh(cfg: SystemConfig, two_step: bool | None = None) -> int:
    """DAC slots needed to refresh every actively driven channel once."""
    topo = cfg.topology
    if cfg.routing is not None:
        return cfg.routing.k_demux_outputs
    if topo.two_stage:
        s1, s2 = topo.stages[0].outputs_used, topo.stages[1].outputs_used
        use_two_step = cfg.two_step_charging if two_step is None else two_step
        return (s1 + 1) * s2 if use_two_step else s1 * s2
    return topo.total_channels


def select_line_count(topology: DemuxTopology) -> int:
    """Digital select lines; decoder trees add one enable line."""
    if all(s.has_decoder for s in topology.stages):
        return sum(s.address_bits for s in topology.stages) + 1
    if len(topology.stages) == 1:
        return topology.stages[0].outputs_used
    raise InvalidTopology("decoderless multi-stage trees have no select encoding")


def routing_line_count(routing: DynamicRouting | None) -> int:
    if routing is None or routing.m_switch_fanout <= 1:
        return 0
    return math.ceil(math.log2(routing.m_switch_fanout))


def intermediate_capacitance_f(cfg: SystemConfig) -> float:
    """Stage-1 output node: C1 plus the stage-2 mux on-capacitance."""
    s1, s2 = cfg.topology.stages
    return s1.hold_capacitance_f + s2.switch.c_on_f


def electrode_capacitance_f(cfg: SystemConfig) -> float:
    return cfg.topology.stages[-1].hold_capacitance_f


def share_ratio(cfg: SystemConfig) -> float:
    """Fraction of a pending error left on C2 after one stage-2 delivery."""
    ca = intermediate_capacitance_f(cfg)
    cb = electrode_capacitance_f(cfg)
    return cb / (ca + cb) if ca + cb > 0 else 1.0


@dataclass(frozen=True)
class TimingBudget:
    slot_duration: Fraction  # seconds, exact
    t_charge_s: float  # slot minus the DAC settle reservation
    per_node_tau: dict[str, float]  # charging step -> RC time constant
    available_s: dict[str, float]  # charging step -> time usable for RC charging
    settle_fraction: dict[str, float]  # residual exp(-t/tau) left at slot end


def derive_timing(cfg: SystemConfig) -> TimingBudget:
    """Slot duration, RC constants and end-of-slot residual per charging step.

    Steps are ``direct`` (DAC straight onto an output), ``stage1_charge``
    (DAC onto a first-stage node) and ``stage2_deliver`` (first-stage node
    sharing onto the electrode; the DAC is not involved so the whole slot is
    available).  ``direct`` on a two-stage tree is the RC ladder through both
    switches, characterised by its Elmore delay.
    """
    slot = cfg.slot_duration_s
    t_charge = float(slot) - cfg.k_settle * cfg.dac.settle_time_constant_s
    if t_charge <= 0:
        raise InfeasibleTiming(
            f"slot {float(slot):.4g} s leaves no charging time after "
            f"{cfg.k_settle:g} DAC settle constants",
            field="dac.settle_time_constant_s",
        )
    stages = cfg.topology.stages
    tau: dict[str, float] = {}
    avail: dict[str, float] = {}
    if len(stages) == 1:
        tau["direct"] = stages[0].switch.r_on_ohm * stages[0].hold_capacitance_f
        avail["direct"] = t_charge
    else:
        r1, r2 = stages[0].switch.r_on_ohm, stages[1].switch.r_on_ohm
        ca, cb = intermediate_capacitance_f(cfg), electrode_capacitance_f(cfg)
        tau["stage1_charge"] = r1 * ca
        tau["stage2_deliver"] = r2 * (ca * cb / (ca + cb)) if ca + cb > 0 else 0.0
        tau["direct"] = r1 * (ca + cb) + r2 * cb
        avail["stage1_charge"] = t_charge
        avail["stage2_deliver"] = float(slot)
        avail["direct"] = t_charge
    residual = {k: (math.exp(-avail[k] / t) if t > 0 else 0.0) for k, t in tau.items()}
    return TimingBudget(slot, t_charge, tau, avail, residual)


# ============================================================================
# Validation
# ============================================================================


def _check_nonneg(out: list, value, name: str, strict: bool = False):
    if value is None:
        return
    if value < 0 or (strict and value == 0):
        rel = ">" if strict else ">="
        out.append(NegativeParameter(f"{name} must be {rel} 0 (got {value!r})", field=name))


def config_violations(cfg: SystemConfig) -> list[ConfigViolation]:
    """Every violated invariant of ``cfg``, in a stable order."""
    out: list[ConfigViolation] = []
    dac = cfg.dac
    _check_nonneg(out, dac.update_rate_hz, "dac.update_rate_hz", strict=True)
    _check_nonneg(out, dac.full_scale_v, "dac.full_scale_v", strict=True)
    _check_nonneg(out, dac.settle_time_constant_s, "dac.settle_time_constant_s")
    if not 8 <= dac.resolution_bits <= 20:
        out.append(InvalidTopology(
            f"dac.resolution_bits must lie in [8, 20] (got {dac.resolution_bits})",
            field="dac.resolution_bits"))
    _check_nonneg(out, cfg.per_channel_rate_hz, "per_channel_rate_hz", strict=True)
    _check_nonneg(out, cfg.k_settle, "k_settle")

    stages = cfg.topology.stages
    if len(stages) not in (1, 2):
        out.append(InvalidTopology(f"1 or 2 demux stages supported (got {len(stages)})",
                                   field="topology.stages"))
    for n, st in enumerate(stages):
        p = f"topology.stages.{n}"
        if st.fanout < 1 or not 1 <= st.outputs_used <= st.fanout:
            out.append(InvalidTopology(
                f"{p}: need 1 <= outputs_used <= fanout (got {st.outputs_used}/{st.fanout})",
                field=f"{p}.outputs_used"))
        _check_nonneg(out, st.switch.r_on_ohm, f"{p}.switch.r_on_ohm", strict=True)
        _check_nonneg(out, st.switch.c_on_f, f"{p}.switch.c_on_f")
        _check_nonneg(out, st.switch.off_leak_resistance_ohm,
                      f"{p}.switch.off_leak_resistance_ohm", strict=True)
        _check_nonneg(out, st.hold_capacitance_f, f"{p}.hold_capacitance_f")
    if stages and stages[-1].hold_capacitance_f <= 0:
        out.append(InvalidTopology("the final stage needs a holding capacitor",
                                   field=f"topology.stages.{len(stages) - 1}.hold_capacitance_f"))
    if len(stages) == 2:
        if intermediate_capacitance_f(cfg) <= 0:
            out.append(InvalidTopology(
                "first-stage node has zero capacitance (no C1 and no on-capacitance)",
                field="topology.stages.0.hold_capacitance_f"))
        if not all(s.has_decoder for s in stages):
            out.append(InvalidTopology("two-stage trees must be decoder-addressed",
                                       field="topology.stages"))
        elif cfg.two_step_charging and stages[0].outputs_used >= stages[0].fanout:
            out.append(InvalidTopology(
                "two-step charging parks stage 1 on an unused output; stage 1 has none free",
                field="topology.stages.0.outputs_used"))

    if cfg.routing is not None:
        r = cfg.routing
        if r.k_demux_outputs < 1 or r.m_switch_fanout < 1:
            out.append(InvalidTopology("routing needs K >= 1 and M >= 1", field="routing"))
        elif not 0 <= r.active_group < r.m_switch_fanout:
            out.append(InvalidTopology(
                f"routing.active_group {r.active_group} outside [0, {r.m_switch_fanout})",
                field="routing.active_group"))
        if len(stages) != 1 or (stages and r.k_demux_outputs != stages[0].outputs_used):
            out.append(InvalidTopology("routing requires a single stage with K outputs",
                                       field="routing.k_demux_outputs"))

    expected = expected_electrode_count(cfg) if stages else 0
    if cfg.electrode_count != expected:
        out.append(InvalidTopology(
            f"electrode_count {cfg.electrode_count} != topology channels {expected}",
            field="electrode_count"))

    leak = cfg.leakage
    if leak.droop_rate_v_per_s != 0 and leak.reference_voltage_v == 0:
        out.append(InvalidTopology("leakage.reference_voltage_v must be nonzero",
                                   field="leakage.reference_voltage_v"))
    if leak.droop_rate_v_per_s != 0 and any(
            s.switch.off_leak_resistance_ohm is not None for s in stages):
        out.append(InvalidTopology(
            "droop_rate and off_leak_resistance are mutually exclusive",
            field="leakage.droop_rate_v_per_s"))

    if cfg.crosstalk is not None:
        xt = cfg.crosstalk
        rows = xt.coupling
        if any(len(row) != len(rows) for row in rows) or len(rows) != cfg.electrode_count:
            out.append(InvalidTopology(
                f"crosstalk must be {cfg.electrode_count}x{cfg.electrode_count}",
                field="crosstalk"))
        else:
            arr = xt.array
            if np.any(np.diag(arr) != 0):
                out.append(InvalidTopology("crosstalk diagonal must be zero", field="crosstalk"))
            if np.any(np.abs(arr) >= 1):
                out.append(InvalidTopology("crosstalk coefficients must satisfy |c| < 1",
                                           field="crosstalk"))

    if cfg.clock_subdivision < 1:
        out.append(InvalidTopology("clock_subdivision must be >= 1", field="clock_subdivision"))
    if cfg.share_refresh_budget < 1:
        out.append(InvalidTopology("share_refresh_budget must be >= 1",
                                   field="share_refresh_budget"))

    if out:
        return out  # timing is meaningless on a malformed config

    slots = slots_per_refresh(cfg)
    # exact comparison, forgiving the last-bit rounding of rates typed as DAC/slots
    if exact(cfg.per_channel_rate_hz) * slots > exact(dac.update_rate_hz) * (1 + Fraction(1, 10**12)):
        out.append(InfeasibleTiming(
            f"{slots} slots at {cfg.per_channel_rate_hz:g} Hz per channel need "
            f"{cfg.per_channel_rate_hz * slots:g} Hz > DAC {dac.update_rate_hz:g} Hz",
            field="per_channel_rate_hz"))
    try:
        derive_timing(cfg)
    except InfeasibleTiming as exc:
        out.append(exc)
    return out


def validate_config(cfg: SystemConfig) -> SystemConfig:
    """Return ``cfg`` unchanged, or raise :class:`ConfigError` listing all violations."""
    violations = config_violations(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


# ============================================================================
# Serialization
# ============================================================================


def config_to_dict(cfg: SystemConfig) -> dict[str, Any]:
    d = asdict(cfg)
    d["topology"] = {"stages": [asdict(s) for s in cfg.topology.stages]}
    d["crosstalk"] = None if cfg.crosstalk is None else [list(r) for r in cfg.crosstalk.coupling]
    return d


def config_from_dict(d: dict[str, Any]) -> SystemConfig:
    d = dict(d)
    d.pop("notes", None)
    d.pop("programs", None)
    stages = tuple(
        DemuxStage(**{**s, "switch": SwitchSpec(**s["switch"])})
        for s in d["topology"]["stages"]
    )
    d["topology"] = DemuxTopology(stages)
    d["dac"] = DacSpec(**d["dac"])
    if "leakage" in d:
        d["leakage"] = LeakageSpec(**(d["leakage"] or {}))
    xt = d.get("crosstalk")
    if isinstance(xt, dict):  # sparse form {"n": 4, "pairs": [[victim, aggressor, c], ...]}
        n = xt.get("n") or d.get("electrode_count")
        d["crosstalk"] = CrosstalkMatrix.from_pairs(
            n, {(int(v), int(a)): c for v, a, c in xt["pairs"]})
    elif xt is not None:
        d["crosstalk"] = CrosstalkMatrix(xt)
    if d.get("routing") is not None:
        d["routing"] = DynamicRouting(**d["routing"])
    return SystemConfig(**d)


def load_config(path: str | Path) -> SystemConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def dump_config(cfg: SystemConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
