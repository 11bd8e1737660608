"""Switched-capacitor simulation of a compiled TDM stream.

Inside a slot the switch network is fixed, so every connected group of
capacitors is a linear RC circuit driven (possibly) by the DAC.  Each group is
advanced with the exact matrix exponential of its state matrix; the DAC output
is an extra state with a first-order lag toward the slot's code, and the code
itself rides along as a constant state so the propagator does not depend on
it and can be cached per circuit shape.

Slot boundaries apply switch transitions and charge injection.  Floating
nodes droop.  Crosstalk couples every committed electrode step into its
victims once per substep.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import NumericalBlowup
from .model import (
    LeakageSpec,
    SwitchSpec,
    SystemConfig,
    electrode_capacitance_f,
    exact,
    intermediate_capacitance_f,
    validate_config,
)
from .scheduler import Frame, TimingViolation, check_timing

GUARD_BAND_V = 1.0


# ============================================================================
# Closed-form primitives
# ============================================================================


@dataclass(frozen=True)
class NodeState:
    node_id: str
    capacitance_f: float
    voltage_v: float


def drive_charge(node: NodeState, source_v: float, r_ohm: float, dt_s: float) -> float:
    """Node charged from an ideal source through ``r_ohm`` for ``dt_s``."""
    if dt_s == 0:
        return node.voltage_v
    tau = r_ohm * node.capacitance_f
    decay = 0.0 if tau == 0 else math.exp(-dt_s / tau)
    return source_v + (node.voltage_v - source_v) * decay


def charge_share(a: NodeState, b: NodeState, r_ohm: float, dt_s: float) -> tuple[float, float]:
    """Two capacitors joined through ``r_ohm`` for ``dt_s``; charge is conserved."""
    ca, cb = a.capacitance_f, b.capacitance_f
    q = ca * a.voltage_v + cb * b.voltage_v
    v_final = q / (ca + cb)
    tau = r_ohm * ca * cb / (ca + cb)
    decay = 0.0 if tau == 0 or math.isinf(dt_s) else math.exp(-dt_s / tau)
    va = v_final + (a.voltage_v - v_final) * decay
    vb = (q - ca * va) / cb
    return va, vb


def apply_droop(node: NodeState, dt_s: float, leak: LeakageSpec,
                off_leak_resistance_ohm: float | None = None) -> float:
    """Held voltage after ``dt_s`` of leakage.

    Linear mode scales the configured droop rate by ``V / reference``;
    resistive mode (``off_leak_resistance_ohm`` given) decays with ``R * C``.
    """
    v = node.voltage_v
    if off_leak_resistance_ohm is not None:
        return v * math.exp(-dt_s / (off_leak_resistance_ohm * node.capacitance_f))
    if leak.droop_rate_v_per_s == 0:
        return v
    return v + leak.droop_rate_v_per_s * (v / leak.reference_voltage_v) * dt_s


def apply_crosstalk(voltages: np.ndarray, dv_aggressors: np.ndarray, coupling: np.ndarray) -> np.ndarray:
    """Add ``coupling[victim, aggressor] * dV[aggressor]`` to every victim."""
    return np.asarray(voltages, dtype=float) + np.asarray(coupling) @ np.asarray(dv_aggressors, dtype=float)


def apply_charge_injection(node: NodeState, sw: SwitchSpec) -> float:
    return node.voltage_v + sw.injected_charge_c / node.capacitance_f


# ============================================================================
# Trace container
# ============================================================================


@dataclass(frozen=True)
class Marker:
    tick: int
    kind: str  # "slot", "on", "off"
    detail: str


DELIVERY_DTYPE = np.dtype([("tick", "<i8"), ("channel", "<i4"), ("frame", "<i4"), ("sample", "<i4")])


@dataclass(frozen=True, eq=False)
class TraceSet:
    tick_s: Fraction  # duration of one tick
    ticks: np.ndarray  # shared time axis, integer ticks
    node_ids: tuple[str, ...]
    voltages: np.ndarray  # (len(ticks), len(node_ids))
    markers: tuple[Marker, ...]
    deliveries: np.ndarray  # DELIVERY_DTYPE, one row per electrode refresh
    ticks_per_slot: int
    timing_violations: tuple[TimingViolation, ...] = ()

    @property
    def time_s(self) -> np.ndarray:
        return self.ticks * float(self.tick_s)

    def series(self, node_id: str) -> np.ndarray:
        return self.voltages[:, self.node_ids.index(node_id)]

    def electrode(self, channel: int) -> np.ndarray:
        return self.series(electrode_id(channel))

    def final(self, node_id: str) -> float:
        return float(self.series(node_id)[-1])

    def identical_to(self, other: TraceSet) -> bool:
        return (
            self.tick_s == other.tick_s
            and self.node_ids == other.node_ids
            and np.array_equal(self.ticks, other.ticks)
            and self.voltages.tobytes() == other.voltages.tobytes()
            and self.markers == other.markers
            and self.deliveries.tobytes() == other.deliveries.tobytes()
        )


def electrode_id(channel: int) -> str:
    return f"e{channel}"


def intermediate_id(branch: int) -> str:
    return f"n1_{branch}"


def write_trace_csv(trace: TraceSet, path: str | Path) -> None:
    """Long format: one row per (tick, node)."""
    t = trace.time_s
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tick", "time_s", "node_id", "voltage_V"])
        for k, tick in enumerate(trace.ticks):
            for n, node in enumerate(trace.node_ids):
                w.writerow([int(tick), repr(float(t[k])), node, repr(float(trace.voltages[k, n]))])


def write_markers_csv(trace: TraceSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tick", "kind", "detail"])
        for m in trace.markers:
            w.writerow([m.tick, m.kind, m.detail])


def write_trace_npz(trace: TraceSet, path: str | Path) -> None:
    """Columnar layout: one array per column, see docs/formats.md."""
    np.savez(
        path,
        tick_s_num=np.int64(trace.tick_s.numerator),
        tick_s_den=np.int64(trace.tick_s.denominator),
        ticks_per_slot=np.int64(trace.ticks_per_slot),
        ticks=trace.ticks,
        node_ids=np.array(trace.node_ids),
        voltages=trace.voltages,
        deliveries=trace.deliveries,
        marker_tick=np.array([m.tick for m in trace.markers], dtype=np.int64),
        marker_kind=np.array([m.kind for m in trace.markers]),
        marker_detail=np.array([m.detail for m in trace.markers]),
    )


def read_trace_npz(path: str | Path) -> TraceSet:
    z = np.load(path, allow_pickle=False)
    markers = tuple(Marker(int(t), str(k), str(d))
                    for t, k, d in zip(z["marker_tick"], z["marker_kind"], z["marker_detail"]))
    return TraceSet(
        tick_s=Fraction(int(z["tick_s_num"]), int(z["tick_s_den"])),
        ticks=z["ticks"],
        node_ids=tuple(str(n) for n in z["node_ids"]),
        voltages=z["voltages"],
        markers=markers,
        deliveries=z["deliveries"],
        ticks_per_slot=int(z["ticks_per_slot"]),
    )


# ============================================================================
# Simulation
# ============================================================================


@dataclass(frozen=True)
class SimOptions:
    oversampling: int = 16  # substeps (ticks) per DAC slot
    probe: frozenset[str] | None = None  # node ids to record; None = all electrodes
    seed: int | None = None
    dac_noise_rms_v: float = 0.0  # per-slot Gaussian noise on the DAC level, off by default
    initial_voltages: Mapping[str, float] = field(default_factory=dict)
    isolate: frozenset[int] = frozenset()  # electrodes whose output switch is held open
    epsilon_v: float = 1e-3  # settling target used for the attached timing check

    def __post_init__(self):
        if self.oversampling < 4:
            raise ValueError("oversampling must be >= 4")
        object.__setattr__(self, "isolate", frozenset(self.isolate))
        if self.probe is not None:
            object.__setattr__(self, "probe", frozenset(self.probe))


@functools.lru_cache(maxsize=4096)
def _propagator(caps: tuple[float, ...], edges: tuple[tuple[int, int, float], ...],
                sources: tuple[tuple[int, float], ...], tau_dac: float, dt: float) -> np.ndarray:
    """exp(M dt) for state [node voltages..., dac output, dac code]."""
    n = len(caps)
    m = np.zeros((n + 2, n + 2))
    dac_col = n if tau_dac > 0 else n + 1
    for a, b, r in edges:
        g = 1.0 / r
        m[a, a] -= g / caps[a]
        m[a, b] += g / caps[a]
        m[b, b] -= g / caps[b]
        m[b, a] += g / caps[b]
    for a, r in sources:
        g = 1.0 / r
        m[a, a] -= g / caps[a]
        m[a, dac_col] += g / caps[a]
    if tau_dac > 0:
        m[n, n] = -1.0 / tau_dac
        m[n, n + 1] = 1.0 / tau_dac
    phi = expm(m * dt)
    phi.setflags(write=False)
    return phi


def _components(n_nodes: int, edges, sources) -> list[tuple[list[int], list, list]]:
    parent = list(range(n_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b, _ in edges:
        parent[find(a)] = find(b)
    groups: dict[int, list[int]] = {}
    touched = {a for a, _, _ in edges} | {b for _, b, _ in edges} | {a for a, _ in sources}
    for node in sorted(touched):
        groups.setdefault(find(node), []).append(node)
    out = []
    for nodes in groups.values():
        local = {g: k for k, g in enumerate(nodes)}
        e = [(local[a], local[b], r) for a, b, r in edges if a in local]
        s = [(local[a], r) for a, r in sources if a in local]
        out.append((nodes, e, s))
    return out


class _Chain:
    """Static node layout of a config: electrodes first, then first-stage nodes."""

    def __init__(self, cfg: SystemConfig, isolate: frozenset[int]):
        self.cfg = cfg
        self.isolate = isolate
        stages = cfg.topology.stages
        n = cfg.electrode_count
        self.n_electrodes = n
        self.n_branches = stages[0].outputs_used if len(stages) == 2 else 0
        self.node_ids = tuple(electrode_id(c) for c in range(n)) + tuple(
            intermediate_id(i) for i in range(self.n_branches))
        caps = [electrode_capacitance_f(cfg)] * n
        leak_r = [stages[-1].switch.off_leak_resistance_ohm] * n
        inject = [stages[-1].switch.injected_charge_c] * n
        if self.n_branches:
            caps += [intermediate_capacitance_f(cfg)] * self.n_branches
            leak_r += [stages[0].switch.off_leak_resistance_ohm] * self.n_branches
            inject += [stages[0].switch.injected_charge_c] * self.n_branches
        self.caps = np.array(caps, dtype=float)
        self.inject_dv = np.array(inject, dtype=float) / self.caps
        self.leak_r = leak_r

    def connections(self, slot) -> tuple[list, list, set[int]]:
        """(storage edges, DAC source edges, nodes behind a closed switch)."""
        stages = self.cfg.topology.stages
        edges, sources, on = [], [], set()
        if len(stages) == 1:
            for ch in slot.delivers:
                if ch not in self.isolate:
                    sources.append((ch, stages[0].switch.r_on_ohm))
                    on.add(ch)
            return edges, sources, on
        s1, s2 = slot.stage_states
        n1 = self.n_branches
        if s1 is not None:
            sources.append((self.n_electrodes + s1, stages[0].switch.r_on_ohm))
            on.add(self.n_electrodes + s1)
        if s2 is not None:
            for i in range(n1):
                ch = s2 * n1 + i
                if ch in self.isolate:
                    continue
                edges.append((self.n_electrodes + i, ch, stages[1].switch.r_on_ohm))
                on.add(ch)
        return edges, sources, on

    def hold_factors(self, dt: float) -> np.ndarray:
        """Per-substep multiplier applied to floating nodes."""
        leak = self.cfg.leakage
        out = np.ones(len(self.caps))
        for k, r in enumerate(self.leak_r):
            if r is not None:
                out[k] = math.exp(-dt / (r * self.caps[k]))
            elif leak.droop_rate_v_per_s:
                out[k] = 1.0 + leak.droop_rate_v_per_s * dt / leak.reference_voltage_v
        return out


def _as_frames(stream) -> list[Frame]:
    if isinstance(stream, Frame):
        return [stream]
    return list(stream)


def run(cfg: SystemConfig, stream: Frame | Sequence[Frame], opts: SimOptions | None = None) -> TraceSet:
    """Simulate ``stream`` on the analog chain of ``cfg``.

    Raises :class:`NumericalBlowup` if any node leaves the
    ``full_scale + 1 V`` guard band.
    """
    validate_config(cfg)
    opts = opts or SimOptions()
    frames = _as_frames(stream)
    chain = _Chain(cfg, opts.isolate)
    n_nodes = len(chain.node_ids)
    ne = chain.n_electrodes

    probe_ids = (chain.node_ids[:ne] if opts.probe is None
                 else tuple(n for n in chain.node_ids + ("dac",) if n in opts.probe))
    unknown = (opts.probe or frozenset()) - set(chain.node_ids) - {"dac"}
    if unknown:
        raise ValueError(f"unknown probe nodes: {sorted(unknown)}")
    probe_idx = [chain.node_ids.index(p) if p != "dac" else -1 for p in probe_ids]

    slot_s = cfg.slot_duration_s
    tick_s = slot_s / opts.oversampling
    dt = float(tick_s)
    tau_dac = cfg.dac.settle_time_constant_s
    dac_decay = math.exp(-dt / tau_dac) if tau_dac > 0 else 0.0
    hold = chain.hold_factors(dt)
    coupling = cfg.coupling
    crosstalk_on = bool(np.any(coupling))
    guard = cfg.dac.full_scale_v + GUARD_BAND_V
    rng = np.random.default_rng(opts.seed) if opts.dac_noise_rms_v > 0 else None

    v = np.zeros(n_nodes)
    for node, value in opts.initial_voltages.items():
        if node == "dac":
            continue
        v[chain.node_ids.index(node)] = value
    v_dac = float(opts.initial_voltages.get("dac", 0.0))

    total_slots = sum(len(f.slots) for f in frames)
    n_ticks = total_slots * opts.oversampling
    rec = np.empty((n_ticks + 1, len(probe_ids)))

    def record(k):
        for col, idx in enumerate(probe_idx):
            rec[k, col] = v_dac if idx < 0 else v[idx]

    record(0)
    markers: list[Marker] = []
    deliveries: list[tuple[int, int, int, int]] = []
    prev_on: set[int] = set()
    tick = 0
    violations: list[TimingViolation] = []
    seen_shapes: set = set()

    for fi, frame in enumerate(frames):
        shape = tuple(s.purpose for s in frame.slots)
        if shape not in seen_shapes:
            seen_shapes.add(shape)
            violations.extend(check_timing(cfg, frame, opts.epsilon_v))
        for slot in frame.slots:
            u = cfg.dac.dequantize(slot.dac_code)
            if rng is not None:
                u += rng.normal(0.0, opts.dac_noise_rms_v)
            edges, sources, on = chain.connections(slot)
            markers.append(Marker(tick, "slot", slot.purpose.value))
            for node in sorted(prev_on - on):
                markers.append(Marker(tick, "off", chain.node_ids[node]))
            start = v[:ne].copy() if crosstalk_on else None
            for node in sorted(on - prev_on):
                markers.append(Marker(tick, "on", chain.node_ids[node]))
                v[node] += chain.inject_dv[node]
            prev_on = on

            comps = []
            connected = np.zeros(n_nodes, dtype=bool)
            for nodes, e, s in _components(n_nodes, edges, sources):
                caps = tuple(float(chain.caps[k]) for k in nodes)
                phi = _propagator(caps, tuple(e), tuple(s), tau_dac, dt)
                comps.append((np.array(nodes), phi))
                connected[nodes] = True
            floating = ~connected

            for sub in range(opts.oversampling):
                if crosstalk_on and sub:
                    start = v[:ne].copy()
                for nodes, phi in comps:
                    z = np.concatenate((v[nodes], (v_dac, u)))
                    v[nodes] = (phi @ z)[: len(nodes)]
                v[floating] *= hold[floating]
                v_dac = u + (v_dac - u) * dac_decay if tau_dac > 0 else u
                if crosstalk_on:
                    # only network, droop and injection steps couple, not coupled ones
                    v[:ne] += coupling @ (v[:ne] - start)
                tick += 1
                record(tick)
                if not np.all(np.abs(v) <= guard):
                    worst = int(np.argmax(np.abs(v)))
                    raise NumericalBlowup(
                        f"node {chain.node_ids[worst]} at {v[worst]:.4g} V left the "
                        f"+/-{guard:g} V guard band at tick {tick}")
            for ch in slot.delivers:
                if ch not in opts.isolate:
                    deliveries.append((tick, ch, fi, frame.sample_index))

    rec.setflags(write=False)
    ticks = np.arange(n_ticks + 1, dtype=np.int64)
    ticks.setflags(write=False)
    dl = np.array(deliveries, dtype=DELIVERY_DTYPE)
    dl.setflags(write=False)
    return TraceSet(
        tick_s=tick_s,
        ticks=ticks,
        node_ids=tuple(probe_ids),
        voltages=rec,
        markers=tuple(markers),
        deliveries=dl,
        ticks_per_slot=opts.oversampling,
        timing_violations=tuple(violations),
    )


def refresh_period_s(cfg: SystemConfig, frame: Frame) -> Fraction:
    return len(frame.slots) / exact(cfg.dac.update_rate_hz)

