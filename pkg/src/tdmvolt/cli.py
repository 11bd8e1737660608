"""Command-line entry point: ``tdmvolt compile|simulate|report|sweep``.

Exit codes: 0 success, 2 validation failure (bad config, bad programs or
infeasible timing), 3 simulation failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

from .errors import (
    AmplitudeExceedsFullScale,
    ConfigError,
    ConfigViolation,
    ScheduleError,
    TdmError,
)
from .metrics import CSV_FIELDS, build_report
from .model import SystemConfig, config_from_dict, exact, slots_per_refresh, validate_config
from .scheduler import (
    Frame,
    VoltageProgram,
    check_timing,
    compile_dynamic_stream,
    compile_static_frame,
    effective_update_rate,
    write_frames_binary,
    write_frames_csv,
)
from .simulator import (
    SimOptions,
    run,
    write_markers_csv,
    write_trace_csv,
    write_trace_npz,
)
from .waveforms import programs_from_dict, read_programs_csv

log = logging.getLogger("tdmvolt")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SIMULATION = 3
OUT_ENV = "TDMVOLT_OUT"
DEFAULT_REFRESHES = 8


@dataclass
class RunManifest:
    config: Path
    programs: list[Path] = field(default_factory=list)
    out: Path | None = None
    command: str = "simulate"
    sweep: dict[str, list[Any]] = field(default_factory=dict)
    options: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> RunManifest:
        path = Path(path)
        d = json.loads(path.read_text())
        base = path.parent

        def rel(p):
            return (base / p).resolve() if p is not None else None

        return cls(
            config=rel(d["config"]),
            programs=[rel(p) for p in d.get("programs", [])],
            out=rel(d.get("out")),
            command=d.get("command", "simulate"),
            sweep=dict(d.get("sweep", {})),
            options=dict(d.get("options", {})),
        )

    def check(self) -> list[str]:
        problems = []
        if not self.config.exists():
            problems.append(f"config not found: {self.config}")
        problems += [f"programs not found: {p}" for p in self.programs if not p.exists()]
        return problems


class ValidationFailure(Exception):
    """Anything that maps to exit code 2."""


# ============================================================================
# Pipeline pieces
# ============================================================================


def load_config_dict(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationFailure(f"{path}: not valid JSON ({exc})") from exc


def parse_config(d: dict, validate: bool = True) -> SystemConfig:
    try:
        cfg = config_from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ValidationFailure(f"malformed config: {type(exc).__name__}: {exc}") from exc
    return validate_config(cfg) if validate else cfg


def load_programs(cfg: SystemConfig, cfg_dict: dict, paths: Sequence[Path]) -> list[VoltageProgram]:
    """Programs from files (JSON or CSV), else from the config's own ``programs`` block."""
    rate = cfg.per_channel_rate_hz
    fs = cfg.dac.full_scale_v
    out: list[VoltageProgram] = []
    try:
        for p in paths:
            if p.suffix.lower() == ".csv":
                out += read_programs_csv(p, rate)
            else:
                out += programs_from_dict(json.loads(p.read_text()), rate, fs)
        if not paths and "programs" in cfg_dict:
            out = programs_from_dict(cfg_dict["programs"], rate, fs)
    except TdmError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationFailure(f"bad programs: {type(exc).__name__}: {exc}") from exc
    if not out:
        raise ValidationFailure("no voltage programs given (use --programs or a 'programs' block)")
    return out


def is_dynamic(cfg: SystemConfig, programs: Sequence[VoltageProgram]) -> bool:
    return cfg.routing is not None or any(not p.is_dc for p in programs)


def compile_stream(cfg: SystemConfig, programs, horizon_s=None, refreshes: int = 1) -> list[Frame]:
    if is_dynamic(cfg, programs):
        if horizon_s is None:
            n = max(len(p) for p in programs)
            horizon_s = Fraction(n) / exact(cfg.per_channel_rate_hz)
        return compile_dynamic_stream(cfg, programs, horizon_s)
    return [compile_static_frame(cfg, programs)] * refreshes


def _write_frames(cfg, frames, out: Path, fmt: str) -> Path:
    if fmt == "binary":
        path = out / "frames.bin"
        write_frames_binary(cfg, frames, path)
    else:
        path = out / "frames.csv"
        write_frames_csv(cfg, frames, path)
    return path


def _timing_report(cfg, frames, violations, epsilon) -> str:
    rates = effective_update_rate(cfg, frames[0])
    lines = [
        f"config={cfg.name or '-'}",
        f"slots_per_refresh={frames[0].slots_per_refresh}",
        f"frames={len(frames)}",
        f"dac_samples={sum(len(f.channels_covered) for f in frames)}",
        f"effective_rate={_num(rates.effective_hz)}",
        f"nominal_rate={_num(rates.nominal_hz)}",
        f"epsilon_v={epsilon:g}",
        f"violations={len(violations)}",
    ]
    lines += [f"  {v}" for v in violations]
    return "\n".join(lines) + "\n"


def _num(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else repr(float(x))


def _check_frames(cfg, frames, epsilon):
    out, seen = [], set()
    for f in frames:
        shape = tuple(s.purpose for s in f.slots)
        if shape not in seen:
            seen.add(shape)
            out += check_timing(cfg, f, epsilon)
    return out


def do_compile(cfg, cfg_dict, program_paths, out: Path, fmt: str, epsilon: float,
               horizon_s=None) -> int:
    programs = load_programs(cfg, cfg_dict, program_paths)
    frames = compile_stream(cfg, programs, horizon_s)
    violations = _check_frames(cfg, frames, epsilon)
    out.mkdir(parents=True, exist_ok=True)
    _write_frames(cfg, frames, out, fmt)
    report = _timing_report(cfg, frames, violations, epsilon)
    (out / "timing_report.txt").write_text(report)
    sys.stdout.write(report)
    return EXIT_VALIDATION if violations else EXIT_OK


def simulate_point(cfg, programs, out: Path, fmt: str, epsilon: float, refreshes: int,
                   oversampling: int, horizon_s=None, write_traces: bool = True) -> dict:
    frames = compile_stream(cfg, programs, horizon_s, refreshes)
    trace = run(cfg, frames, SimOptions(oversampling=oversampling, epsilon_v=epsilon))
    report = build_report(cfg, frames[0], trace, programs, len(trace.timing_violations))
    out.mkdir(parents=True, exist_ok=True)
    if write_traces:
        if fmt == "binary":
            write_trace_npz(trace, out / "trace.npz")
        else:
            write_trace_csv(trace, out / "trace.csv")
        write_markers_csv(trace, out / "markers.csv")
    (out / "metrics.json").write_text(report.to_json())
    row = report.csv_row()
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerow(row)
    return row


# ============================================================================
# Sweeps
# ============================================================================


def set_path(d: dict, dotted: str, value) -> None:
    """Assign ``value`` at a dotted path such as ``topology.stages.1.switch.c_on_f``."""
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        node = node[int(k)] if isinstance(node, list) else node[k]
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    elif last not in node and not (last in ("electrode_count", "per_channel_rate_hz")):
        raise KeyError(dotted)
    else:
        node[last] = value


def check_axes(cfg_dict: dict, axes: dict[str, list]) -> None:
    for name in axes:
        probe = copy.deepcopy(cfg_dict)
        try:
            set_path(probe, name, None)
        except (KeyError, IndexError, ValueError, TypeError) as exc:
            raise ValidationFailure(f"sweep axis {name!r} is not a config field") from exc


def sweep_points(axes: dict[str, list]) -> list[dict[str, Any]]:
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def _point_dict(cfg_dict: dict, point: dict) -> dict:
    d = copy.deepcopy(cfg_dict)
    d.pop("electrode_count", None)  # re-derived from the swept topology
    for name, value in point.items():
        set_path(d, name, value)
    return d


def _run_point(args) -> dict:
    (index, point, cfg_dict, program_paths, out, fmt, epsilon, refreshes, oversampling) = args
    row: dict[str, Any] = {"point": index, **{k: v for k, v in point.items()}}
    try:
        cfg = parse_config(_point_dict(cfg_dict, point), validate=False)
        if "per_channel_rate_hz" not in point and cfg.routing is None and cfg.topology.two_stage:
            # a static tree refreshes as fast as its frame allows
            cfg = cfg.with_(per_channel_rate_hz=cfg.dac.update_rate_hz / slots_per_refresh(cfg))
        cfg = validate_config(cfg)
        programs = load_programs(cfg, cfg_dict, program_paths)
        if not is_dynamic(cfg, programs) and len(programs) != cfg.electrode_count:
            # DC sets are padded / trimmed to the swept channel count
            levels = [p.value for p in programs]
            programs = [VoltageProgram.dc(c, levels[c % len(levels)], cfg.per_channel_rate_hz)
                        for c in range(cfg.electrode_count)]
        row.update(simulate_point(cfg, programs, out / f"point_{index:04d}", fmt, epsilon,
                                  refreshes, oversampling, write_traces=False))
        row["error"] = ""
    except (TdmError, ValidationFailure, ValueError, KeyError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
    return row


def do_sweep(cfg_dict, program_paths, axes, out: Path, fmt, epsilon, refreshes, oversampling,
             jobs: int) -> int:
    check_axes(cfg_dict, axes)
    points = sweep_points(axes) if axes else [{}]
    out.mkdir(parents=True, exist_ok=True)
    work = [(k, p, cfg_dict, program_paths, out, fmt, epsilon, refreshes, oversampling)
            for k, p in enumerate(points)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_point, work))
    else:
        rows = [_run_point(w) for w in work]
    fields = ["point", *axes, *CSV_FIELDS, "error"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v)
                        for k, v in row.items()})
    failed = sum(1 for r in rows if r["error"])
    sys.stdout.write(f"sweep points={len(rows)} failed={failed} -> {out / 'sweep.csv'}\n")
    return EXIT_OK


# ============================================================================
# argparse
# ============================================================================


def _parse_axis(text: str) -> tuple[str, list]:
    name, _, values = text.partition("=")
    if not values:
        raise argparse.ArgumentTypeError(f"axis {text!r} must look like path=v1,v2")
    return name, [json.loads(v) for v in values.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdmvolt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("compile", "simulate", "report", "sweep"):
        s = sub.add_parser(name)
        s.add_argument("--manifest", type=Path, help="JSON run manifest")
        s.add_argument("--config", type=Path)
        s.add_argument("--programs", type=Path, action="append", default=None)
        s.add_argument("--out", type=Path)
        s.add_argument("--format", choices=("csv", "binary"), default=None)
        s.add_argument("--epsilon", type=float, default=None, help="settling budget in volts")
        s.add_argument("--horizon", type=float, default=None, help="dynamic horizon in seconds")
        s.add_argument("--refreshes", type=int, default=None,
                       help=f"static refreshes to simulate (default {DEFAULT_REFRESHES})")
        s.add_argument("--oversampling", type=int, default=None)
        s.add_argument("--jobs", type=int, default=1)
        s.add_argument("--axis", type=_parse_axis, action="append", default=[],
                       help="sweep axis, e.g. topology.stages.0.hold_capacitance_f=0,2.7e-9")
    return p


def _resolve(args) -> RunManifest:
    if args.manifest:
        m = RunManifest.load(args.manifest)
    else:
        if args.config is None:
            raise ValidationFailure("--config or --manifest is required")
        m = RunManifest(config=args.config)
    if args.config:
        m.config = args.config
    if args.programs:
        m.programs = list(args.programs)
    if args.out:
        m.out = args.out
    if m.out is None:
        m.out = Path(os.environ.get(OUT_ENV, "tdmvolt-out")) / args.command
    for name, values in args.axis:
        m.sweep[name] = values
    m.command = args.command
    problems = m.check()
    if problems:
        raise ValidationFailure("; ".join(problems))
    return m


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        m = _resolve(args)
        opt = m.options
        fmt = args.format or opt.get("format", "csv")
        epsilon = args.epsilon if args.epsilon is not None else float(opt.get("epsilon_v", 1e-3))
        horizon = args.horizon if args.horizon is not None else opt.get("horizon_s")
        refreshes = args.refreshes or int(opt.get("refreshes", DEFAULT_REFRESHES))
        oversampling = args.oversampling or int(opt.get("oversampling", 16))
        cfg_dict = load_config_dict(m.config)

        if m.command == "sweep":
            return do_sweep(cfg_dict, m.programs, m.sweep, m.out, fmt, epsilon, refreshes,
                            oversampling, max(1, args.jobs))

        cfg = parse_config(cfg_dict)
        if m.command == "compile":
            return do_compile(cfg, cfg_dict, m.programs, m.out, fmt, epsilon, horizon)
        if m.command == "report":
            programs = load_programs(cfg, cfg_dict, m.programs)
            frames = compile_stream(cfg, programs, horizon)
            violations = _check_frames(cfg, frames, epsilon)
            report = build_report(cfg, frames[0], timing_violations=len(violations))
            m.out.mkdir(parents=True, exist_ok=True)
            (m.out / "metrics.json").write_text(report.to_json())
            sys.stdout.write(report.to_json() + "\n")
            return EXIT_OK
        programs = load_programs(cfg, cfg_dict, m.programs)
        row = simulate_point(cfg, programs, m.out, fmt, epsilon, refreshes, oversampling, horizon)
        sys.stdout.write("".join(f"{k}={v}\n" for k, v in row.items()))
        return EXIT_OK
    except ConfigError as exc:
        sys.stderr.write(f"invalid config:\n{exc}\n")
        return EXIT_VALIDATION
    except (ValidationFailure, ScheduleError, ConfigViolation, AmplitudeExceedsFullScale) as exc:
        sys.stderr.write(f"validation failed: {exc}\n")
        return EXIT_VALIDATION
    except TdmError as exc:  # NumericalBlowup and anything else raised while simulating
        sys.stderr.write(f"simulation failed: {exc}\n")
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
