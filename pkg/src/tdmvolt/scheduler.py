"""Compile voltage programs into TDM frames and check their timing.

Channel numbering on a two-stage tree is group-major: channel
``j * S1 + i`` sits behind first-stage output ``i`` and second-stage output
``j``.  A delivery group is one second-stage address, i.e. ``S1`` consecutive
channel ids.  With dynamic routing electrode ``zone * K + k`` hangs off demux
output ``k``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ChannelCountMismatch,
    InfeasibleTiming,
    InvalidOneHot,
    MixedProgramKinds,
    ProgramRangeError,
    SampleRateMismatch,
    ScheduleError,
    TopologyEncodingUnsupported,
    ZoneOutOfRange,
)
from .model import SystemConfig, derive_timing, exact, share_ratio, validate_config


class Purpose(str, Enum):
    STAGE1_CHARGE = "Stage1Charge"
    STAGE2_DELIVER = "Stage2Deliver"
    DIRECT_DELIVER = "DirectDeliver"
    IDLE = "Idle"


PURPOSE_CODES = {p: n for n, p in enumerate(Purpose)}


# ============================================================================
# Programs, slots, frames
# ============================================================================


@dataclass(frozen=True, eq=False)
class VoltageProgram:
    """Target for one electrode: a DC level or a waveform sampled at ``rate_hz``."""

    channel_id: int
    rate_hz: float
    value: float | None = None
    samples: np.ndarray | None = None

    def __post_init__(self):
        if (self.value is None) == (self.samples is None):
            raise ValueError("a program is either DC (value) or a waveform (samples)")
        if self.samples is not None:
            arr = np.asarray(self.samples, dtype=float).copy()
            arr.setflags(write=False)
            object.__setattr__(self, "samples", arr)

    @classmethod
    def dc(cls, channel_id: int, value: float, rate_hz: float) -> VoltageProgram:
        return cls(channel_id, rate_hz, value=float(value))

    @classmethod
    def waveform(cls, channel_id: int, samples, rate_hz: float) -> VoltageProgram:
        return cls(channel_id, rate_hz, samples=samples)

    @property
    def is_dc(self) -> bool:
        return self.value is not None

    def __len__(self) -> int:
        return 1 if self.is_dc else len(self.samples)

    def at(self, r: int) -> float:
        """Sample ``r``; DC programs are constant and waveforms hold their last sample."""
        if self.is_dc:
            return self.value
        return float(self.samples[min(r, len(self.samples) - 1)])

    def __eq__(self, other):
        if not isinstance(other, VoltageProgram):
            return NotImplemented
        same_samples = (
            self.samples is None and other.samples is None
        ) or (
            self.samples is not None and other.samples is not None
            and np.array_equal(self.samples, other.samples)
        )
        return (self.channel_id, self.rate_hz, self.value) == (
            other.channel_id, other.rate_hz, other.value) and same_samples


@dataclass(frozen=True)
class Slot:
    index: int  # position within its frame
    purpose: Purpose
    dac_code: int
    dac_target: float
    stage_states: tuple[int | None, ...]  # ON output per stage, None when disengaged
    select_word: tuple[int, ...]  # select lines, line 0 first
    delivers: tuple[int, ...] = ()  # electrodes connected to their source this slot
    channel: int | None = None  # whose value the DAC presents
    zone: int | None = None  # active routing group, dynamic routing only


@dataclass(frozen=True)
class Frame:
    slots: tuple[Slot, ...]
    channels_covered: frozenset[int]
    sample_index: int = 0  # which sample of each program this frame delivers

    @property
    def slots_per_refresh(self) -> int:
        return len(self.slots)

    @property
    def efficiency(self) -> Fraction:
        return Fraction(len(self.channels_covered), len(self.slots))


# ============================================================================
# Select-line encoding
# ============================================================================


def _park_address(cfg: SystemConfig) -> int:
    st = cfg.topology.stages[0]
    if st.outputs_used >= st.fanout:
        raise TopologyEncodingUnsupported(
            "stage 1 has no unused output to park on while stage 2 delivers")
    return st.fanout - 1


def _bits(value: int, width: int) -> list[int]:
    return [(value >> b) & 1 for b in range(width)]


def _unbits(bits: Sequence[int]) -> int:
    return sum(int(b) << n for n, b in enumerate(bits))


def select_width(cfg: SystemConfig) -> int:
    stages = cfg.topology.stages
    if all(s.has_decoder for s in stages):
        return sum(s.address_bits for s in stages) + 1
    if len(stages) == 1:
        return stages[0].outputs_used
    raise TopologyEncodingUnsupported("decoderless multi-stage trees cannot be encoded")


def encode_states(cfg: SystemConfig, states: Sequence[int | None]) -> tuple[int, ...]:
    stages = cfg.topology.stages
    if len(states) != len(stages):
        raise TopologyEncodingUnsupported(f"{len(states)} states for {len(stages)} stages")
    for st, s in zip(stages, states):
        if s is not None and not 0 <= s < st.outputs_used:
            raise TopologyEncodingUnsupported(f"output {s} not in use on this stage")

    if not all(s.has_decoder for s in stages):
        if len(stages) != 1:
            raise TopologyEncodingUnsupported("decoderless multi-stage trees cannot be encoded")
        word = [0] * stages[0].outputs_used
        if states[0] is not None:
            word[states[0]] = 1
        return tuple(word)

    if len(stages) == 1:
        (s,) = states
        st = stages[0]
        return tuple(_bits(0 if s is None else s, st.address_bits) + [int(s is not None)])

    # stage-1 address | stage-2 address | enable (gates stage 2)
    s1, s2 = states
    a1 = _park_address(cfg) if s1 is None else s1
    word = _bits(a1, stages[0].address_bits) + _bits(0 if s2 is None else s2, stages[1].address_bits)
    return tuple(word + [int(s2 is not None)])


def encode_select(cfg: SystemConfig, slot: Slot) -> tuple[int, ...]:
    """Select-line word for ``slot``; line 0 first."""
    return encode_states(cfg, slot.stage_states)


def decode_select(cfg: SystemConfig, word: Sequence[int]) -> tuple[int | None, ...]:
    """Inverse of :func:`encode_select`: per-stage ON output (None when off)."""
    stages = cfg.topology.stages
    width = select_width(cfg)
    if len(word) != width:
        raise TopologyEncodingUnsupported(f"word has {len(word)} lines, topology uses {width}")
    if any(b not in (0, 1) for b in word):
        raise ValueError("select words are made of 0/1 lines")

    if not all(s.has_decoder for s in stages):
        on = [n for n, b in enumerate(word) if b]
        if len(on) > 1:
            raise InvalidOneHot(f"lines {on} are all high in a one-hot word")
        return (on[0] if on else None,)

    if len(stages) == 1:
        st = stages[0]
        addr, enable = _unbits(word[: st.address_bits]), word[st.address_bits]
        return (addr if enable and addr < st.outputs_used else None,)

    st1, st2 = stages
    n1 = st1.address_bits
    a1 = _unbits(word[:n1])
    a2 = _unbits(word[n1: n1 + st2.address_bits])
    enable = word[-1]
    s1 = a1 if a1 < st1.outputs_used else None
    s2 = a2 if enable and a2 < st2.outputs_used else None
    return (s1, s2)


def word_to_str(word: Sequence[int]) -> str:
    """Lines in order, line 0 first."""
    return "".join(str(int(b)) for b in word)


def word_to_int(word: Sequence[int]) -> int:
    return _unbits(word)


def format_select_fields(cfg: SystemConfig, word: Sequence[int]) -> str:
    """Underscore-separated fields, e.g. ``010_101_1`` for a decoder tree."""
    stages = cfg.topology.stages
    if not all(s.has_decoder for s in stages):
        return word_to_str(word)
    parts, pos = [], 0
    for st in stages:
        parts.append(word_to_str(word[pos: pos + st.address_bits]))
        pos += st.address_bits
    parts.append(word_to_str(word[pos:]))
    return "_".join(parts)


# ============================================================================
# Routing
# ============================================================================


@dataclass(frozen=True)
class RouteState:
    zone: int
    active: tuple[int, ...]  # electrode reached by each demux output
    holding: frozenset[int]  # disconnected electrodes, left to droop


def route_dynamic(cfg: SystemConfig, zone: int) -> RouteState:
    """Connect every demux output ``k`` to electrode ``zone * K + k``."""
    r = cfg.routing
    if r is None:
        raise ZoneOutOfRange("config has no dynamic routing network")
    if not 0 <= zone < r.m_switch_fanout:
        raise ZoneOutOfRange(f"zone {zone} outside [0, {r.m_switch_fanout})")
    k = r.k_demux_outputs
    active = tuple(zone * k + n for n in range(k))
    holding = frozenset(range(r.electrode_count)) - set(active)
    return RouteState(zone, active, holding)


def delivered_channels(cfg: SystemConfig, states: Sequence[int | None],
                       zone: int | None = None) -> tuple[int, ...]:
    stages = cfg.topology.stages
    if len(stages) == 1:
        (s,) = states
        if s is None:
            return ()
        if cfg.routing is not None:
            return (route_dynamic(cfg, cfg.routing.active_group if zone is None else zone).active[s],)
        return (s,)
    s1, s2 = states
    n1 = stages[0].outputs_used
    if s2 is None:
        return ()
    if s1 is None:
        return tuple(s2 * n1 + i for i in range(n1))
    return (s2 * n1 + s1,)


def classify(cfg: SystemConfig, states: Sequence[int | None]) -> Purpose:
    if all(s is None for s in states):
        return Purpose.IDLE
    if len(states) == 2:
        s1, s2 = states
        if s2 is None:
            return Purpose.STAGE1_CHARGE
        if s1 is None:
            return Purpose.STAGE2_DELIVER
    return Purpose.DIRECT_DELIVER


def make_slot(cfg: SystemConfig, index: int, states: Sequence[int | None], code: int,
              target: float, channel: int | None = None, zone: int | None = None) -> Slot:
    states = tuple(states)
    return Slot(
        index=index,
        purpose=classify(cfg, states),
        dac_code=code,
        dac_target=target,
        stage_states=states,
        select_word=encode_states(cfg, states),
        delivers=delivered_channels(cfg, states, zone),
        channel=channel,
        zone=zone,
    )


# ============================================================================
# Compilation
# ============================================================================


def _check_range(cfg: SystemConfig, programs: Iterable[VoltageProgram]):
    fs = cfg.dac.full_scale_v
    for p in programs:
        peak = abs(p.value) if p.is_dc else float(np.max(np.abs(p.samples), initial=0.0))
        if peak > fs * (1 + 1e-12):
            raise ProgramRangeError(
                f"channel {p.channel_id} peaks at {peak:g} V beyond +/-{fs:g} V")


def _by_channel(programs: Sequence[VoltageProgram], expected: Sequence[int]) -> dict[int, VoltageProgram]:
    ids = [p.channel_id for p in programs]
    if sorted(ids) != sorted(expected) or len(set(ids)) != len(ids):
        raise ChannelCountMismatch(
            f"need exactly one program for each of channels {list(expected)[:8]}"
            f"{'...' if len(expected) > 8 else ''} ({len(expected)} total), got {sorted(ids)[:8]}"
            f"{'...' if len(ids) > 8 else ''} ({len(ids)} total)")
    return {p.channel_id: p for p in programs}


def compile_static_frame(cfg: SystemConfig, programs: Sequence[VoltageProgram],
                         two_step: bool | None = None) -> Frame:
    """One refresh of DC targets over the whole tree.

    Two-stage trees with two-step charging: for each second-stage output
    ``j`` the first-stage nodes are charged in ascending order, then
    stage 2 engages ``j`` and every first-stage node shares onto its
    electrode.  Without two-step charging both stages engage together,
    one channel per slot.  Single-stage trees get one slot per channel.
    """
    validate_config(cfg)
    if cfg.routing is not None:
        raise ScheduleError("dynamic-routing configs are compiled with compile_dynamic_stream")
    if not all(p.is_dc for p in programs):
        raise MixedProgramKinds("static frames take DC programs only")
    progs = _by_channel(programs, range(cfg.electrode_count))
    _check_range(cfg, programs)
    dac = cfg.dac
    stages = cfg.topology.stages
    use_two_step = cfg.two_step_charging if two_step is None else two_step

    slots: list[Slot] = []

    def emit(states, ch, last_code=None):
        if ch is None:
            code, target = last_code, dac.dequantize(last_code)
        else:
            target = progs[ch].value
            code = dac.quantize(target)
        slots.append(make_slot(cfg, len(slots), states, code, target, channel=ch))
        return code

    if len(stages) == 1:
        for ch in range(cfg.electrode_count):
            emit((ch,), ch)
    else:
        n1, n2 = stages[0].outputs_used, stages[1].outputs_used
        for j in range(n2):
            if use_two_step:
                code = None
                for i in range(n1):
                    code = emit((i, None), j * n1 + i)
                emit((None, j), None, last_code=code)
            else:
                for i in range(n1):
                    emit((i, j), j * n1 + i)
    covered = frozenset(c for s in slots for c in s.delivers)
    return Frame(tuple(slots), covered)


def _sample_count(horizon_s, rate_hz) -> int:
    n = exact(horizon_s) * exact(rate_hz) if isinstance(horizon_s, Fraction) else horizon_s * rate_hz
    r = round(n)
    if r < 1 or abs(n - r) > 1e-6:
        raise SampleRateMismatch(f"horizon {float(horizon_s):g} s is not a multiple of 1/{rate_hz:g} Hz")
    return int(r)


def _rate_matches(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=1e-12)


def compile_dynamic_stream(cfg: SystemConfig, programs: Sequence[VoltageProgram],
                           horizon_s) -> list[Frame]:
    """One frame per per-channel sample period; frame ``r`` carries sample ``r``.

    Each frame holds one delivery slot per active channel (ascending id),
    padded with idle slots so a frame lasts exactly ``1 / per_channel_rate``.
    DC programs are accepted and delivered as constants.
    """
    validate_config(cfg)
    f = cfg.per_channel_rate_hz
    for p in programs:
        if not p.is_dc and not _rate_matches(p.rate_hz, f):
            raise SampleRateMismatch(
                f"channel {p.channel_id} sampled at {p.rate_hz:g} Hz, config expects {f:g} Hz")
    n_frames = _sample_count(horizon_s, f)
    ratio = exact(cfg.dac.update_rate_hz) / exact(f)
    if ratio.denominator != 1:
        raise SampleRateMismatch(f"DAC rate is not an integer multiple of {f:g} Hz")
    slots_per_frame = int(ratio)

    stages = cfg.topology.stages
    if len(stages) != 1:
        raise ScheduleError("dynamic streams need a single-stage demux")
    zone = None
    if cfg.routing is not None:
        zone = cfg.routing.active_group
        active = route_dynamic(cfg, zone).active
    else:
        active = tuple(range(cfg.electrode_count))
    progs = _by_channel(programs, active)
    for p in programs:
        if not p.is_dc and len(p.samples) < n_frames:
            raise SampleRateMismatch(
                f"channel {p.channel_id} has {len(p.samples)} samples, horizon needs {n_frames}")
    _check_range(cfg, programs)
    if len(active) > slots_per_frame:
        raise InfeasibleTiming(f"{len(active)} channels do not fit in {slots_per_frame} slots")

    dac = cfg.dac
    frames: list[Frame] = []
    code = 0
    for r in range(n_frames):
        slots: list[Slot] = []
        for k, ch in enumerate(active):
            target = progs[ch].at(r)
            code = dac.quantize(target)
            slots.append(make_slot(cfg, k, (k,), code, target, channel=ch, zone=zone))
        for k in range(len(active), slots_per_frame):
            slots.append(make_slot(cfg, k, (None,), code, dac.dequantize(code), zone=zone))
        frames.append(Frame(tuple(slots), frozenset(active), sample_index=r))
    return frames


# ============================================================================
# Timing checks and rates
# ============================================================================

STEP_FOR_PURPOSE = {
    Purpose.STAGE1_CHARGE: "stage1_charge",
    Purpose.STAGE2_DELIVER: "stage2_deliver",
    Purpose.DIRECT_DELIVER: "direct",
}


@dataclass(frozen=True)
class TimingViolation:
    slot_index: int
    purpose: Purpose
    reason: str  # dac_settle | rc_settle | charge_share
    required: float
    available: float
    message: str = field(default="", compare=False)

    def __str__(self) -> str:
        return f"slot {self.slot_index} ({self.purpose.value}): {self.reason}: {self.message}"


def settle_time_constants(cfg: SystemConfig, epsilon_v: float) -> float:
    """RC time constants needed to bring a full-swing step within ``epsilon_v``."""
    return math.log(2 * cfg.dac.full_scale_v / epsilon_v)


def check_timing(cfg: SystemConfig, frame: Frame, epsilon_v: float = 1e-3) -> list[TimingViolation]:
    """Per-slot feasibility of the charging work scheduled in ``frame``.

    A DAC-driven slot needs ``k_settle`` DAC constants plus ``n_tau`` node
    constants, with ``n_tau = ln(full swing / epsilon)``.  A stage-2
    delivery is a charge share: it must finish its RC transient in the slot,
    and the repeated refresh must pull a full-swing error below
    ``epsilon`` within ``cfg.share_refresh_budget`` refreshes.  An empty
    list means the frame is feasible.
    """
    slot_s = float(cfg.slot_duration_s)
    try:
        budget = derive_timing(cfg)
    except InfeasibleTiming as exc:
        need = cfg.k_settle * cfg.dac.settle_time_constant_s
        return [TimingViolation(s.index, s.purpose, "dac_settle", need, slot_s, str(exc))
                for s in frame.slots]

    n_tau = settle_time_constants(cfg, epsilon_v)
    out: list[TimingViolation] = []
    for s in frame.slots:
        step = STEP_FOR_PURPOSE.get(s.purpose)
        if step is None:
            continue
        tau = budget.per_node_tau[step]
        need, have = n_tau * tau, budget.available_s[step]
        if need > have:
            out.append(TimingViolation(
                s.index, s.purpose, "rc_settle", need, have,
                f"{n_tau:.2f} x tau={tau:.3g} s needs {need:.3g} s, slot leaves {have:.3g} s"))
        if s.purpose is Purpose.STAGE2_DELIVER:
            rho = share_ratio(cfg)
            refreshes = math.inf if rho >= 1 else math.ceil(n_tau / -math.log(rho)) if rho > 0 else 1
            if refreshes > cfg.share_refresh_budget:
                out.append(TimingViolation(
                    s.index, s.purpose, "charge_share", refreshes, cfg.share_refresh_budget,
                    f"voltage division leaves {rho:.3f} of each step on the output; "
                    f"{refreshes} refreshes to reach {epsilon_v:g} V exceeds budget "
                    f"{cfg.share_refresh_budget}"))
    return out


@dataclass(frozen=True)
class UpdateRates:
    effective_hz: Fraction
    nominal_hz: Fraction


def effective_update_rate(cfg: SystemConfig, frame: Frame) -> UpdateRates:
    """DAC rate over slots per refresh, next to the ideal one-slot-per-channel rate."""
    rate = exact(cfg.dac.update_rate_hz)
    n = len(frame.channels_covered) or cfg.electrode_count
    return UpdateRates(rate / frame.slots_per_refresh, rate / n)


# ============================================================================
# Export / import
# ============================================================================

STREAM_MAGIC = b"TDMS"
STREAM_VERSION = 1
STREAM_HEADER = np.dtype([
    ("magic", "S4"), ("version", "<u2"), ("n_stages", "<u2"), ("n_records", "<u4"),
    ("clock_subdivision", "<u4"), ("update_rate_hz", "<f8"),
])
STREAM_RECORD = np.dtype([
    ("tick", "<u8"), ("frame", "<u4"), ("dac_code", "<i4"), ("dac_target_v", "<f8"),
    ("select_word", "<u4"), ("purpose", "u1"), ("stage0", "i1"), ("stage1", "i1"),
    ("zone", "i1"), ("channel", "<i2"),
])


def iter_slots(frames: Frame | Sequence[Frame]):
    """(global slot number, frame number, slot) over a frame or a stream."""
    if isinstance(frames, Frame):
        frames = [frames]
    n = 0
    for fi, fr in enumerate(frames):
        for s in fr.slots:
            yield n, fi, s
            n += 1


def write_frames_csv(cfg: SystemConfig, frames, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tick", "dac_code", "dac_target_V", "select_word_binary", "purpose"])
        for n, _, s in iter_slots(frames):
            w.writerow([n * cfg.clock_subdivision, s.dac_code, repr(float(s.dac_target)),
                        word_to_str(s.select_word), s.purpose.value])


def write_frames_binary(cfg: SystemConfig, frames, path: str | Path) -> None:
    rows = list(iter_slots(frames))
    header = np.zeros(1, dtype=STREAM_HEADER)
    header[0] = (STREAM_MAGIC, STREAM_VERSION, len(cfg.topology.stages), len(rows),
                 cfg.clock_subdivision, cfg.dac.update_rate_hz)
    rec = np.zeros(len(rows), dtype=STREAM_RECORD)
    for k, (n, fi, s) in enumerate(rows):
        states = list(s.stage_states) + [None] * (2 - len(s.stage_states))
        rec[k] = (n * cfg.clock_subdivision, fi, s.dac_code, s.dac_target,
                  word_to_int(s.select_word), PURPOSE_CODES[s.purpose],
                  -1 if states[0] is None else states[0], -1 if states[1] is None else states[1],
                  -1 if s.zone is None else s.zone, -1 if s.channel is None else s.channel)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(rec.tobytes())


def read_frames_binary(cfg: SystemConfig, path: str | Path) -> list[Frame]:
    """Rebuild frames from a binary stream for replay into the simulator."""
    raw = Path(path).read_bytes()
    header = np.frombuffer(raw[: STREAM_HEADER.itemsize], dtype=STREAM_HEADER)[0]
    if header["magic"] != STREAM_MAGIC or header["version"] != STREAM_VERSION:
        raise ValueError(f"{path}: not a tdmvolt stream (v{STREAM_VERSION})")
    n_stages = int(header["n_stages"])
    if n_stages != len(cfg.topology.stages):
        raise TopologyEncodingUnsupported("stream was compiled for a different topology")
    rec = np.frombuffer(raw[STREAM_HEADER.itemsize:], dtype=STREAM_RECORD,
                        count=int(header["n_records"]))
    width = select_width(cfg)
    grouped: dict[int, list[Slot]] = {}
    for row in rec:
        states = tuple(None if row[f"stage{k}"] < 0 else int(row[f"stage{k}"]) for k in range(n_stages))
        zone = None if row["zone"] < 0 else int(row["zone"])
        channel = None if row["channel"] < 0 else int(row["channel"])
        fi = int(row["frame"])
        slot = make_slot(cfg, len(grouped.get(fi, [])), states, int(row["dac_code"]),
                         float(row["dac_target_v"]), channel=channel, zone=zone)
        if word_to_int(slot.select_word) != int(row["select_word"]) or len(slot.select_word) != width:
            raise ValueError(f"select word mismatch in record for frame {fi}")
        grouped.setdefault(fi, []).append(slot)
    frames = []
    for fi in sorted(grouped):
        slots = tuple(grouped[fi])
        frames.append(Frame(slots, frozenset(c for s in slots for c in s.delivers), sample_index=fi))
    return frames
