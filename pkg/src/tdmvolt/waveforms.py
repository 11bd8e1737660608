"""Target waveforms, their sampled programs, and zero-order-hold references."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import AmplitudeExceedsFullScale
from .scheduler import VoltageProgram


@dataclass(frozen=True)
class DC:
    value_v: float


@dataclass(frozen=True)
class Sine:
    amplitude_v: float
    frequency_hz: float
    phase_rad: float = 0.0
    offset_v: float = 0.0


@dataclass(frozen=True)
class PiecewiseLinear:
    breakpoints: tuple[tuple[float, float], ...]  # (time_s, volts), strictly increasing in time

    def __post_init__(self):
        bp = tuple((float(t), float(v)) for t, v in self.breakpoints)
        if not bp:
            raise ValueError("piecewise-linear waveform needs at least one breakpoint")
        if any(b[0] <= a[0] for a, b in zip(bp, bp[1:])):
            raise ValueError("breakpoint times must be strictly increasing")
        object.__setattr__(self, "breakpoints", bp)


Shape = Union[DC, Sine, PiecewiseLinear]


@dataclass(frozen=True)
class WaveformSpec:
    shape: Shape
    duration_s: float

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        s = self.shape
        if isinstance(s, DC):
            return np.full_like(t, s.value_v)
        if isinstance(s, Sine):
            return s.offset_v + s.amplitude_v * np.sin(2 * np.pi * s.frequency_hz * t + s.phase_rad)
        times, volts = zip(*s.breakpoints)
        return np.interp(t, times, volts)

    def peak_v(self) -> float:
        """Largest |value| the waveform can take, independent of sampling."""
        s = self.shape
        if isinstance(s, DC):
            return abs(s.value_v)
        if isinstance(s, Sine):
            return abs(s.offset_v) + abs(s.amplitude_v)
        return max(abs(v) for _, v in s.breakpoints)


def sample(spec: WaveformSpec, rate_hz: float, channel_id: int = 0,
           full_scale_v: float | None = None) -> VoltageProgram:
    """Samples at ``t = k / rate_hz`` for ``k = 0 .. duration * rate - 1``.

    DC shapes give a DC program.
    """
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    if full_scale_v is not None and spec.peak_v() > full_scale_v * (1 + 1e-12):
        raise AmplitudeExceedsFullScale(
            f"waveform reaches {spec.peak_v():g} V, full scale is +/-{full_scale_v:g} V")
    if isinstance(spec.shape, DC):
        return VoltageProgram.dc(channel_id, spec.shape.value_v, rate_hz)
    n_float = spec.duration_s * rate_hz
    n = round(n_float)
    if n < 1 or abs(n - n_float) > 1e-6:
        raise ValueError(f"duration {spec.duration_s:g} s is not a multiple of 1/{rate_hz:g} Hz")
    t = np.arange(n) / rate_hz
    return VoltageProgram.waveform(channel_id, spec.evaluate(t), rate_hz)


class ZohReference:
    """Piecewise-constant reconstruction of a program: value at ``t`` is sample ``floor(t * f)``."""

    def __init__(self, program: VoltageProgram):
        self.program = program
        self.rate_hz = program.rate_hz
        self._samples = (np.array([program.value]) if program.is_dc else np.asarray(program.samples))

    def index(self, t) -> np.ndarray:
        # the 1e-9 guard keeps exact boundaries t = k/f on sample k despite float rounding
        k = np.floor(np.asarray(t, dtype=float) * self.rate_hz + 1e-9).astype(np.int64)
        return np.clip(k, 0, len(self._samples) - 1)

    def __call__(self, t) -> np.ndarray:
        return self._samples[self.index(t)]


def zoh_reference(program: VoltageProgram) -> ZohReference:
    return ZohReference(program)


@dataclass(frozen=True)
class ReconstructionError:
    rms_boundary_v: float
    max_boundary_v: float
    rms_span_v: float
    max_span_v: float


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def reconstruction_error(times_s, values_v, ref: ZohReference, boundary=None,
                         delay_s: float = 0.0) -> ReconstructionError:
    """Trace-vs-reference error, at slot-boundary instants and over the full span.

    ``boundary`` selects the slot-boundary samples (index array or boolean
    mask); by default every sample counts as a boundary.  ``delay_s`` shifts
    the reference by the trace's delivery latency.
    """
    times_s = np.asarray(times_s, dtype=float)
    values_v = np.asarray(values_v, dtype=float)
    err = values_v - ref(times_s - delay_s)
    at = err if boundary is None else err[boundary]
    return ReconstructionError(
        rms_boundary_v=_rms(at),
        max_boundary_v=float(np.max(np.abs(at), initial=0.0)),
        rms_span_v=_rms(err),
        max_span_v=float(np.max(np.abs(err), initial=0.0)),
    )


# ============================================================================
# Structured-text / CSV I/O
# ============================================================================


def spec_from_dict(d: dict) -> WaveformSpec:
    kind = d["kind"].lower()
    duration = float(d.get("duration_s", 0.0))
    if kind == "dc":
        shape: Shape = DC(float(d["value_v"]))
    elif kind == "sine":
        shape = Sine(float(d["amplitude_v"]), float(d["frequency_hz"]),
                     float(d.get("phase_rad", 0.0)), float(d.get("offset_v", 0.0)))
    elif kind in ("pwl", "piecewise_linear", "piecewiselinear"):
        shape = PiecewiseLinear(tuple(tuple(p) for p in d["breakpoints"]))
    else:
        raise ValueError(f"unknown waveform kind {d['kind']!r}")
    return WaveformSpec(shape, duration)


def spec_to_dict(spec: WaveformSpec) -> dict:
    s = spec.shape
    if isinstance(s, DC):
        d = {"kind": "dc", "value_v": s.value_v}
    elif isinstance(s, Sine):
        d = {"kind": "sine", "amplitude_v": s.amplitude_v, "frequency_hz": s.frequency_hz,
             "phase_rad": s.phase_rad, "offset_v": s.offset_v}
    else:
        d = {"kind": "pwl", "breakpoints": [list(p) for p in s.breakpoints]}
    d["duration_s"] = spec.duration_s
    return d


def read_programs_csv(path: str | Path, rate_hz: float) -> list[VoltageProgram]:
    """Programs from CSV columns ``channel, sample_index, voltage_V``.

    A channel with a single sample becomes a DC program.
    """
    rows: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["channel"]), {})[int(row["sample_index"])] = float(row["voltage_V"])
    out = []
    for ch in sorted(rows):
        by_idx = rows[ch]
        if sorted(by_idx) != list(range(len(by_idx))):
            raise ValueError(f"channel {ch}: sample_index values must be 0..n-1")
        samples = [by_idx[k] for k in range(len(by_idx))]
        if len(samples) == 1:
            out.append(VoltageProgram.dc(ch, samples[0], rate_hz))
        else:
            out.append(VoltageProgram.waveform(ch, samples, rate_hz))
    return out


def write_programs_csv(programs: Sequence[VoltageProgram], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "sample_index", "voltage_V"])
        for p in programs:
            values = [p.value] if p.is_dc else list(p.samples)
            for k, v in enumerate(values):
                w.writerow([p.channel_id, k, repr(float(v))])


def programs_from_dict(d: dict, rate_hz: float, full_scale_v: float | None = None) -> list[VoltageProgram]:
    """Programs from the ``programs`` block of a config or program file.

    Accepted forms: ``{"dc_v": [...]}`` (one DC level per channel, in
    channel order) or ``{"channels": [{"channel": 0, "waveform": {...}}, ...]}``.
    """
    if "dc_v" in d:
        return [VoltageProgram.dc(c, float(v), rate_hz) for c, v in enumerate(d["dc_v"])]
    out = []
    for entry in d["channels"]:
        spec = spec_from_dict(entry["waveform"])
        out.append(sample(spec, rate_hz, int(entry["channel"]), full_scale_v))
    return out


def sine_bank(frequencies_hz: Sequence[float], amplitude_v: float, duration_s: float,
              rate_hz: float, channels: Sequence[int] | None = None) -> list[VoltageProgram]:
    channels = list(range(len(frequencies_hz))) if channels is None else list(channels)
    return [sample(WaveformSpec(Sine(amplitude_v, f), duration_s), rate_hz, ch)
            for ch, f in zip(channels, frequencies_hz)]

