"""Figures of merit: update rates, settling error, droop, crosstalk, wiring cost."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ZeroDrive
from .model import (
    LeakageSpec,
    SystemConfig,
    exact,
    routing_line_count,
    select_line_count,
    validate_config,
)
from .scheduler import (
    Frame,
    VoltageProgram,
    compile_dynamic_stream,
    compile_static_frame,
    effective_update_rate,
)
from .simulator import SimOptions, TraceSet, electrode_id, run
from .waveforms import WaveformSpec, sample


# ============================================================================
# Crosstalk
# ============================================================================


def crosstalk_db(drive_amplitude_v: float, induced_amplitude_v: float) -> float:
    """``20 log10(induced / drive)``; ``-inf`` when nothing is induced."""
    if drive_amplitude_v <= 0:
        raise ZeroDrive("drive amplitude must be positive")
    if induced_amplitude_v < 0:
        raise ValueError("induced amplitude cannot be negative")
    if induced_amplitude_v == 0:
        return -math.inf
    return 20.0 * math.log10(induced_amplitude_v / drive_amplitude_v)


def coupling_db(coefficient: float) -> float:
    return crosstalk_db(1.0, abs(coefficient))


def half_peak_to_peak(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    return 0.5 * float(np.max(x) - np.min(x)) if len(x) else 0.0


def _crosstalk_stream(cfg: SystemConfig, aggressor: int, drive: WaveformSpec):
    """Aggressor follows ``drive``, every other active channel is programmed to 0 V."""
    if cfg.routing is None and cfg.topology.two_stage:
        # static tree: one DC frame per refresh, aggressor level resampled each refresh
        frame0 = compile_static_frame(cfg, [VoltageProgram.dc(c, 0.0, 1.0)
                                            for c in range(cfg.electrode_count)])
        rate = float(effective_update_rate(cfg, frame0).effective_hz)
        wave = sample(drive, rate, aggressor, cfg.dac.full_scale_v)
        frames = []
        for r in range(len(wave)):
            progs = [VoltageProgram.dc(c, wave.at(r) if c == aggressor else 0.0, rate)
                     for c in range(cfg.electrode_count)]
            frames.append(dataclasses.replace(compile_static_frame(cfg, progs), sample_index=r))
        active = range(cfg.electrode_count)
        return frames, active
    rate = cfg.per_channel_rate_hz
    wave = sample(drive, rate, aggressor, cfg.dac.full_scale_v)
    if cfg.routing is not None:
        active = [cfg.routing.active_group * cfg.routing.k_demux_outputs + k
                  for k in range(cfg.routing.k_demux_outputs)]
    else:
        active = list(range(cfg.electrode_count))
    progs = [wave if c == aggressor else VoltageProgram.dc(c, 0.0, rate) for c in active]
    frames = compile_dynamic_stream(cfg, progs, Fraction(len(wave)) / exact(rate))
    return frames, active


def measure_crosstalk(cfg: SystemConfig, aggressor: int, drive: WaveformSpec,
                      oversampling: int = 8) -> dict[int, float]:
    """Crosstalk in dB seen by every other active channel while ``aggressor`` is driven.

    Victims are programmed to 0 V and held (their output switches stay
    open), so each one integrates the coupled steps of the aggressor.  The
    induced and drive amplitudes are half the peak-to-peak excursion of the
    simulated electrode traces; ``drive.duration_s`` should span a whole
    number of drive periods.
    """
    validate_config(cfg)
    frames, active = _crosstalk_stream(cfg, aggressor, drive)
    if aggressor not in active:
        raise ValueError(f"aggressor {aggressor} is not an actively driven channel")
    victims = [c for c in active if c != aggressor]
    opts = SimOptions(oversampling=oversampling, isolate=frozenset(victims),
                      probe=frozenset(electrode_id(c) for c in active))
    trace = run(cfg, frames, opts)
    drive_amp = half_peak_to_peak(trace.electrode(aggressor))
    return {v: crosstalk_db(drive_amp, half_peak_to_peak(trace.electrode(v))) for v in victims}


# ============================================================================
# Droop
# ============================================================================


def droop_per_refresh(leak: LeakageSpec, refresh_period_s: float, voltage_v: float | None = None) -> float:
    """Magnitude of the linear droop accumulated over one refresh period."""
    v = leak.reference_voltage_v if voltage_v is None else voltage_v
    if leak.droop_rate_v_per_s == 0 or v == 0:
        return 0.0
    return abs(leak.droop_rate_v_per_s * (v / leak.reference_voltage_v)) * refresh_period_s


def config_droop_per_refresh(cfg: SystemConfig, frame: Frame) -> float:
    period = 1 / effective_update_rate(cfg, frame).effective_hz
    return droop_per_refresh(cfg.leakage, float(period))


def measured_droop(trace: TraceSet, node_id: str, start_tick: int = 0, end_tick: int | None = None) -> float:
    """Peak-to-trough excursion of ``node_id`` over a hold window."""
    x = trace.series(node_id)[start_tick:end_tick]
    return float(np.max(x) - np.min(x)) if len(x) else 0.0


# ============================================================================
# Wiring resources
# ============================================================================


@dataclass(frozen=True)
class Resources:
    feedthroughs_tdm: int
    feedthroughs_conventional: int
    dac_channels_tdm: int
    dac_channels_conventional: int

    @property
    def feedthrough_reduction(self) -> Fraction:
        return Fraction(self.feedthroughs_conventional, self.feedthroughs_tdm)


def resource_comparison(cfg: SystemConfig) -> Resources:
    """One analog line plus select (and routing) lines vs one line and DAC per electrode."""
    lines = 1 + select_line_count(cfg.topology) + routing_line_count(cfg.routing)
    n = cfg.electrode_count
    return Resources(lines, n, 1, n)


# ============================================================================
# Settling
# ============================================================================


@dataclass(frozen=True)
class SettleError:
    channels: tuple[int, ...]
    errors_v: np.ndarray  # (refresh, channel position), NaN where not delivered

    @property
    def final_v(self) -> np.ndarray:
        """Error at each channel's last delivery."""
        out = np.full(len(self.channels), np.nan)
        for k in range(len(self.channels)):
            col = self.errors_v[:, k]
            ok = ~np.isnan(col)
            if ok.any():
                out[k] = col[ok][-1]
        return out

    @property
    def per_channel_max_v(self) -> np.ndarray:
        return np.nanmax(self.errors_v, axis=0)

    @property
    def per_channel_mean_v(self) -> np.ndarray:
        return np.nanmean(self.errors_v, axis=0)

    @property
    def max_final_v(self) -> float:
        return float(np.nanmax(self.final_v))

    @property
    def mean_final_v(self) -> float:
        return float(np.nanmean(self.final_v))


def settle_error(trace: TraceSet, programs: Sequence[VoltageProgram]) -> SettleError:
    """|end-of-delivery-slot voltage - target| for every channel and refresh."""
    progs = {p.channel_id: p for p in programs}
    channels = tuple(sorted(c for c in progs if electrode_id(c) in trace.node_ids))
    pos = {c: k for k, c in enumerate(channels)}
    d = trace.deliveries
    n_ref = int(d["frame"].max()) + 1 if len(d) else 0
    errs = np.full((n_ref, len(channels)), np.nan)
    cols = {c: trace.node_ids.index(electrode_id(c)) for c in channels}
    for row in d:
        ch = int(row["channel"])
        if ch not in pos:
            continue
        v = trace.voltages[int(row["tick"]), cols[ch]]
        errs[int(row["frame"]), pos[ch]] = abs(v - progs[ch].at(int(row["sample"])))
    return SettleError(channels, errs)


# ============================================================================
# Report
# ============================================================================


@dataclass(frozen=True)
class MetricsReport:
    effective_rate_hz: float
    nominal_rate_hz: float
    per_channel_settle_error_v: tuple[float, ...] | None
    droop_per_refresh_v: float
    crosstalk_db_matrix: tuple[tuple[float, ...], ...]
    resources: Resources
    timing_violations: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        # JSON has no -inf: uncoupled pairs are written as null
        d["crosstalk_db_matrix"] = [[None if math.isinf(x) else x for x in row]
                                    for row in self.crosstalk_db_matrix]
        if self.per_channel_settle_error_v is not None:
            d["per_channel_settle_error_v"] = list(self.per_channel_settle_error_v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_row(self) -> dict[str, float | int | str]:
        finite = [x for row in self.crosstalk_db_matrix for x in row if not math.isinf(x)]
        settle = self.per_channel_settle_error_v
        return {
            "effective_rate_hz": self.effective_rate_hz,
            "nominal_rate_hz": self.nominal_rate_hz,
            "settle_error_max_v": "" if settle is None else max(settle),
            "settle_error_mean_v": "" if settle is None else float(np.mean(settle)),
            "droop_per_refresh_v": self.droop_per_refresh_v,
            "worst_crosstalk_db": max(finite) if finite else "",
            "feedthroughs_tdm": self.resources.feedthroughs_tdm,
            "feedthroughs_conventional": self.resources.feedthroughs_conventional,
            "dac_channels_tdm": self.resources.dac_channels_tdm,
            "dac_channels_conventional": self.resources.dac_channels_conventional,
            "timing_violations": self.timing_violations,
        }


CSV_FIELDS = list(MetricsReport(0, 0, None, 0, (), Resources(0, 0, 0, 0)).csv_row())


def build_report(cfg: SystemConfig, frame: Frame, trace: TraceSet | None = None,
                 programs: Sequence[VoltageProgram] | None = None,
                 timing_violations: int = 0) -> MetricsReport:
    rates = effective_update_rate(cfg, frame)
    settle = None
    if trace is not None and programs is not None:
        settle = tuple(float(x) for x in settle_error(trace, programs).final_v)
    xt = tuple(tuple(coupling_db(c) for c in row) for row in cfg.coupling)
    return MetricsReport(
        effective_rate_hz=float(rates.effective_hz),
        nominal_rate_hz=float(rates.nominal_hz),
        per_channel_settle_error_v=settle,
        droop_per_refresh_v=config_droop_per_refresh(cfg, frame),
        crosstalk_db_matrix=xt,
        resources=resource_comparison(cfg),
        timing_violations=timing_violations,
    )
