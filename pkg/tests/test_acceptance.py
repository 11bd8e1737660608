"""The ten acceptance criteria, each at its stated tolerance.

Run under pytest, or directly (``python3 tests/test_acceptance.py``) for a
plain PASS/FAIL listing.
"""

import contextlib
import dataclasses
import io
import itertools
import json
import sys
import tempfile
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))
import oracle  # noqa: E402

from tdmvolt.cli import main as cli_main  # noqa: E402
from tdmvolt.metrics import (  # noqa: E402
    config_droop_per_refresh,
    droop_per_refresh,
    measure_crosstalk,
    resource_comparison,
    settle_error,
)
from tdmvolt.model import DacSpec, LeakageSpec, intermediate_capacitance_f  # noqa: E402
from tdmvolt.presets import (  # noqa: E402
    DYNAMIC_CROSSTALK,
    STATIC_WORST_CROSSTALK,
    dynamic_config,
    dynamic_crosstalk,
    static_config,
    static_worst_crosstalk,
)
from tdmvolt.scheduler import (  # noqa: E402
    Purpose,
    VoltageProgram,
    check_timing,
    compile_dynamic_stream,
    compile_static_frame,
    decode_select,
    effective_update_rate,
    encode_states,
)
from tdmvolt.simulator import (  # noqa: E402
    NodeState,
    SimOptions,
    charge_share,
    drive_charge,
    electrode_id,
    intermediate_id,
    read_trace_npz,
    run,
)
from tdmvolt.waveforms import Sine, WaveformSpec, reconstruction_error, zoh_reference  # noqa: E402

CONFIGS = Path(__file__).resolve().parents[1] / "paper-configs"
NO_LEAK = LeakageSpec(0.0, 10.0)


def dc(cfg, levels):
    return [VoltageProgram.dc(c, float(v), cfg.per_channel_rate_hz) for c, v in enumerate(levels)]


def one_slot(frame, purpose, nth=0):
    slot = [s for s in frame.slots if s.purpose is purpose][nth]
    return dataclasses.replace(frame, slots=(dataclasses.replace(slot, index=0),))


# ============================================================================
# Criteria
# ============================================================================


def criterion_1():
    t0 = time.perf_counter()
    cfg = static_config()
    frame = compile_static_frame(cfg, dc(cfg, np.linspace(-10, 10, 32)))
    rates = effective_update_rate(cfg, frame)
    dt = time.perf_counter() - t0
    ok = (frame.slots_per_refresh == 40 and rates.effective_hz == 37500
          and rates.nominal_hz == 46875 and dt < 1.0)
    return ok, (f"slots={frame.slots_per_refresh} effective={rates.effective_hz} "
                f"nominal={rates.nominal_hz} in {dt * 1e3:.1f} ms")


def criterion_2():
    cfg = static_config()
    frame = compile_static_frame(cfg, dc(cfg, [0.0] * 32))
    return frame.efficiency == Fraction(4, 5), f"efficiency={frame.efficiency}"


def criterion_3():
    cfg = dynamic_config()
    progs = dc(cfg, [0.0] * 4)
    (frame,) = compile_dynamic_stream(cfg, progs, 1e-6)
    rate = effective_update_rate(cfg, frame).effective_hz
    return rate == 1_000_000 and cfg.per_channel_rate_hz == 1_000_000, f"per-channel rate={rate} Hz"


def criterion_4():
    leak = LeakageSpec(-19.2e-3, 10.0)
    d = droop_per_refresh(leak, 26.7e-6)
    cfg = static_config()
    frame = compile_static_frame(cfg, dc(cfg, [0.0] * 32))
    d_cfg = config_droop_per_refresh(cfg, frame)
    ok = abs(d - 0.513e-6) <= 0.01 * 0.513e-6 and abs(d_cfg - 0.513e-6) <= 0.01 * 0.513e-6
    return ok, f"droop={d * 1e6:.4f} uV at 26.7 us, {d_cfg * 1e6:.4f} uV at 1/37.5 kHz"


def criterion_5():
    # without C1 the stage-1 node is just the on-capacitance of the 8:1 mux
    bare = static_config(c1_f=0.0, leakage=NO_LEAK)
    progs = dc(bare, [10.0] * 32)
    frame = compile_static_frame(bare, progs)
    trace = run(bare, frame, SimOptions(oversampling=16))
    first = trace.final(electrode_id(0))
    want = oracle.shared_voltage(185e-12, 10.0, 470e-12, 0.0)
    flagged = {v.reason for v in check_timing(bare, frame)} == {"charge_share"}
    err_bare = settle_error(trace, progs).max_final_v

    full = static_config(leakage=NO_LEAK)
    progs = dc(full, [10.0] * 32)
    frame = compile_static_frame(full, progs)
    trace = run(full, [frame] * 8, SimOptions(oversampling=16))
    err_full = settle_error(trace, progs).max_final_v
    clean = check_timing(full, frame) == []
    ok = (abs(first - 2.82) <= 0.01 * 2.82 and abs(first - want) <= 1e-3 * want and flagged
          and err_bare > 1e-3 and err_full <= 1e-3 and clean)
    return ok, (f"no C1: e0={first:.4f} V (oracle {want:.4f}), flagged={flagged}, "
                f"error={err_bare:.3f} V; with C1 after 8 refreshes: error={err_full * 1e6:.2f} uV")


def criterion_6():
    static = static_config(crosstalk=static_worst_crosstalk())
    got_s = measure_crosstalk(static, 0, WaveformSpec(Sine(5.0, 500.0), 2e-3), oversampling=4)[1]
    dyn = dynamic_config(crosstalk=dynamic_crosstalk())
    got_d = measure_crosstalk(dyn, 0, WaveformSpec(Sine(5.0, 100e3), 20e-6), oversampling=16)
    got_d = [got_d[k] for k in (1, 2, 3)]
    want_s, want_d = -12.0, [-29.0, -28.0, -35.0]
    ok = abs(got_s - want_s) <= 0.5 and all(abs(g - w) <= 0.5 for g, w in zip(got_d, want_d))
    # the configured coefficients are the published ones
    ok = ok and STATIC_WORST_CROSSTALK == 0.2512 and DYNAMIC_CROSSTALK == (0.0355, 0.0398, 0.0178)
    return ok, f"static {got_s:.2f} dB, dynamic {', '.join(f'{g:.2f}' for g in got_d)} dB"


def criterion_7():
    r = resource_comparison(static_config())
    ok = (r.feedthroughs_tdm, r.feedthroughs_conventional, r.dac_channels_tdm,
          r.dac_channels_conventional) == (8, 32, 1, 32) and r.feedthrough_reduction == 4
    return ok, (f"feedthroughs {r.feedthroughs_tdm} vs {r.feedthroughs_conventional} "
                f"({r.feedthrough_reduction}x), DAC channels {r.dac_channels_tdm} vs "
                f"{r.dac_channels_conventional}")


def _rel_ok(got, want, worst):
    rel = abs(got - want) / max(abs(want), 1e-3)  # 1 mV floor for targets near 0 V
    worst[0] = max(worst[0], rel)
    return rel <= 1e-3


def criterion_8(n_cases=1002, seed=2024):
    """Single-slot simulations against drive_charge / charge_share."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = [0.0]
    ok = True
    checks = 0
    base_dyn = dynamic_config()
    for case in range(n_cases):
        kind = case % 3
        slot_s = None
        if kind == 0:  # DAC straight onto a single-stage electrode
            c = 10 ** rng.uniform(-12, -9.5)
            r = 10 ** rng.uniform(0, 3)
            stage = dataclasses.replace(base_dyn.topology.stages[0], hold_capacitance_f=c,
                                        switch=dataclasses.replace(base_dyn.topology.stages[0].switch,
                                                                   r_on_ohm=r))
            cfg = base_dyn.with_(topology=dataclasses.replace(base_dyn.topology, stages=(stage,)),
                                 dac=DacSpec(4e6, 14, 10.0, 0.0))
            ch = int(rng.integers(4))
            levels = [0.0] * 4
            levels[ch] = rng.uniform(-10, 10)
            (frame,) = compile_dynamic_stream(cfg, dc(cfg, levels), 1e-6)
            f1 = one_slot(frame, Purpose.DIRECT_DELIVER, ch)
            v0 = rng.uniform(-10, 10)
            trace = run(cfg, f1, SimOptions(oversampling=16, initial_voltages={electrode_id(ch): v0}))
            slot_s = float(cfg.slot_duration_s)
            want = drive_charge(NodeState("e", c, v0), cfg.dac.dequantize(f1.slots[0].dac_code), r, slot_s)
            ok &= _rel_ok(trace.final(electrode_id(ch)), want, worst)
            checks += 1
            continue

        c1 = rng.choice([0.0, 10 ** rng.uniform(-10, -8)])
        c_on = 10 ** rng.uniform(-11.5, -9.5)
        c2 = 10 ** rng.uniform(-11, -8.5)
        r = 10 ** rng.uniform(0, 2.5)
        cfg = static_config(c1_f=c1, c_on_f=c_on, r_on_ohm=r, leakage=NO_LEAK)
        stages = (cfg.topology.stages[0],
                  dataclasses.replace(cfg.topology.stages[1], hold_capacitance_f=c2))
        cfg = cfg.with_(topology=dataclasses.replace(cfg.topology, stages=stages),
                        dac=DacSpec(1.5e6, 16, 10.0, 0.0))
        ca = intermediate_capacitance_f(cfg)
        slot_s = float(cfg.slot_duration_s)
        volts = rng.uniform(-10, 10, size=8)
        init = {intermediate_id(i): volts[i] for i in range(4)}
        init.update({electrode_id(i): volts[4 + i] for i in range(4)})
        opts = SimOptions(oversampling=16, initial_voltages=init, probe=frozenset(init))
        frame = compile_static_frame(cfg, dc(cfg, rng.uniform(-10, 10, size=32)))
        if kind == 1:  # DAC onto a first-stage node
            i = int(rng.integers(4))
            f1 = one_slot(frame, Purpose.STAGE1_CHARGE, i)
            trace = run(cfg, f1, opts)
            u = cfg.dac.dequantize(f1.slots[0].dac_code)
            want = drive_charge(NodeState("n", ca, volts[i]), u, r, slot_s)
            ok &= _rel_ok(trace.final(intermediate_id(i)), want, worst)
            checks += 1
        else:  # first-stage nodes sharing onto electrodes 0..3
            trace = run(cfg, one_slot(frame, Purpose.STAGE2_DELIVER), opts)
            for i in range(4):
                a, b = charge_share(NodeState("a", ca, volts[i]), NodeState("b", c2, volts[4 + i]), r, slot_s)
                ok &= _rel_ok(trace.final(intermediate_id(i)), a, worst)
                ok &= _rel_ok(trace.final(electrode_id(i)), b, worst)
                checks += 2
    dt = time.perf_counter() - t0
    ok = bool(ok) and n_cases >= 1000 and dt < 10.0
    return ok, f"{n_cases} cases, {checks} node checks, worst rel error {worst[0]:.2e}, {dt:.2f} s"


def criterion_9(seed=9):
    rng = np.random.default_rng(seed)
    notes = []

    # charge conservation through stage-2 deliveries, relative 1e-12
    cons_worst = 0.0
    for _ in range(50):
        cfg = static_config(c1_f=10 ** rng.uniform(-10, -8), c_on_f=10 ** rng.uniform(-11.5, -9.5),
                            r_on_ohm=10 ** rng.uniform(0, 2.5), leakage=NO_LEAK)
        ca, cb = intermediate_capacitance_f(cfg), 470e-12
        frame = compile_static_frame(cfg, dc(cfg, [0.0] * 32))
        volts = rng.uniform(-10, 10, size=8)
        init = {intermediate_id(i): volts[i] for i in range(4)}
        init.update({electrode_id(i): volts[4 + i] for i in range(4)})
        trace = run(cfg, one_slot(frame, Purpose.STAGE2_DELIVER),
                    SimOptions(oversampling=16, initial_voltages=init, probe=frozenset(init)))
        for i in range(4):
            q0 = ca * volts[i] + cb * volts[4 + i]
            q1 = ca * trace.final(intermediate_id(i)) + cb * trace.final(electrode_id(i))
            scale = ca * abs(volts[i]) + cb * abs(volts[4 + i])
            cons_worst = max(cons_worst, abs(q1 - q0) / scale)
    conservation = cons_worst <= 1e-12
    notes.append(f"charge {cons_worst:.1e}")

    # every channel exactly once per refresh, over all supported tree shapes
    coverage = True
    for s1, s2, two_step in itertools.product(range(1, 8), range(1, 9), (True, False)):
        cfg = static_config(stage1_outputs=s1, stage2_outputs=s2, two_step=two_step)
        frame = compile_static_frame(cfg, dc(cfg, [0.0] * (s1 * s2)))
        delivered = sorted(c for s in frame.slots for c in s.delivers)
        coverage &= delivered == list(range(s1 * s2))
    notes.append("coverage ok" if coverage else "coverage FAILED")

    # encode/decode over every reachable slot state
    roundtrip, n_states = True, 0
    for cfg in (static_config(), static_config(two_step=False),
                static_config(stage1_outputs=8, two_step=False), dynamic_config()):
        stages = cfg.topology.stages
        if len(stages) == 1:
            states = [(None,)] + [(k,) for k in range(stages[0].outputs_used)]
        elif cfg.two_step_charging:
            states = ([(None, None)] + [(i, None) for i in range(stages[0].outputs_used)]
                      + [(None, j) for j in range(stages[1].outputs_used)])
        else:
            states = list(itertools.product(range(stages[0].outputs_used), range(stages[1].outputs_used)))
        words = {encode_states(cfg, s) for s in states}
        roundtrip &= len(words) == len(states)
        roundtrip &= all(decode_select(cfg, encode_states(cfg, s)) == s for s in states)
        n_states += len(states)
    notes.append(f"{n_states} select states")

    # ideal chain reproduces the ZOH reference at slot boundaries within 1/2 LSB
    ideal = dynamic_config(r_on_ohm=1.0).with_(dac=DacSpec(4e6, 14, 10.0, 0.0))
    samples = rng.uniform(-10, 10, size=(4, 25))
    progs = [VoltageProgram.waveform(c, samples[c], 1e6) for c in range(4)]
    trace = run(ideal, compile_dynamic_stream(ideal, progs, 25e-6), SimOptions(oversampling=16))
    zoh_worst = 0.0
    for c, p in enumerate(progs):
        ticks = trace.deliveries[trace.deliveries["channel"] == c]["tick"]
        err = reconstruction_error(trace.time_s, trace.electrode(c), zoh_reference(p),
                                   boundary=ticks, delay_s=(c + 1) / 4e6)
        zoh_worst = max(zoh_worst, err.max_boundary_v)
    zoh = zoh_worst <= ideal.dac.lsb_v / 2 * (1 + 1e-9)  # float slack on an exact bound
    notes.append(f"ZOH {zoh_worst * 1e3:.3f} mV <= {ideal.dac.lsb_v / 2 * 1e3:.3f} mV")

    # bit-identical repeated runs (noise enabled, fixed seed)
    cfg = static_config()
    frame = compile_static_frame(cfg, dc(cfg, np.linspace(-10, 10, 32)))
    opts = SimOptions(oversampling=16, seed=3, dac_noise_rms_v=1e-4)
    a, b = run(cfg, [frame] * 2, opts), run(cfg, [frame] * 2, opts)
    det = a.identical_to(b) and a.voltages.tobytes() == b.voltages.tobytes()
    notes.append("deterministic" if det else "NOT deterministic")

    return conservation and coverage and roundtrip and zoh and det, "; ".join(notes)


def criterion_10():
    with tempfile.TemporaryDirectory() as tmp, contextlib.redirect_stdout(io.StringIO()):
        tmp = Path(tmp)
        t0 = time.perf_counter()
        rc_s = cli_main(["simulate", "--manifest", str(CONFIGS / "static_manifest.json"),
                         "--out", str(tmp / "static"), "--format", "binary"])
        t_static = time.perf_counter() - t0
        t0 = time.perf_counter()
        rc_d = cli_main(["simulate", "--manifest", str(CONFIGS / "dynamic_manifest.json"),
                         "--out", str(tmp / "dynamic"), "--format", "binary"])
        t_dyn = time.perf_counter() - t0
        if rc_s or rc_d:
            return False, f"exit codes {rc_s}/{rc_d}"

        targets = json.loads((CONFIGS / "static_programs.json").read_text())["dc_v"]
        trace = read_trace_npz(tmp / "static" / "trace.npz")
        finals = np.array([trace.final(electrode_id(c)) for c in range(32)])
        metrics = json.loads((tmp / "static" / "metrics.json").read_text())
        static_ok = (len(np.unique(np.round(finals, 4))) == 32
                     and np.all(np.diff(finals) > 0.5)
                     and abs(finals[0] + 10) <= 1e-3 and abs(finals[-1] - 10) <= 1e-3
                     and max(metrics["per_channel_settle_error_v"]) <= 1e-3
                     and np.allclose(finals, targets, atol=1e-3))

        dyn = read_trace_npz(tmp / "dynamic" / "trace.npz")
        spec = json.loads((CONFIGS / "dynamic_programs.json").read_text())["channels"]
        cfg = dynamic_config()
        dyn_ok, worst = True, 0.0
        for entry in spec:
            c, w = entry["channel"], entry["waveform"]
            d = dyn.deliveries[dyn.deliveries["channel"] == c]
            ticks = d["tick"].astype(int)
            step_s = np.diff(ticks) * dyn.tick_s
            dyn_ok &= bool(np.allclose(step_s, 1e-6))
            t = d["sample"] / 1e6
            want = w["amplitude_v"] * np.sin(2 * np.pi * w["frequency_hz"] * t)
            got = dyn.electrode(c)[ticks]
            worst = max(worst, float(np.max(np.abs(got - want))))
            # stepped: the held value does not move between deliveries
            v = dyn.electrode(c)
            held = [v[a + 1: b - dyn.ticks_per_slot + 1] for a, b in zip(ticks, ticks[1:])]
            dyn_ok &= all(np.ptp(h) == 0 for h in held if len(h))
            # each trace is the sine it was given, not a neighbour's
            dyn_ok &= float(np.corrcoef(got, want)[0, 1]) > 0.999
        dyn_ok &= worst <= cfg.dac.lsb_v / 2 + 1e-3
        ok = static_ok and dyn_ok and t_static < 30 and t_dyn < 30
        return bool(ok), (f"static: 32 levels {finals[0]:+.4f}..{finals[-1]:+.4f} V in {t_static:.1f} s; "
                          f"dynamic: 4 stepped sines, worst sample error {worst * 1e3:.3f} mV "
                          f"in {t_dyn:.1f} s")


CRITERIA = [
    (1, "rate reproduction", criterion_1),
    (2, "efficiency factor", criterion_2),
    (3, "dynamic rate", criterion_3),
    (4, "droop per refresh", criterion_4),
    (5, "voltage-division failure mode", criterion_5),
    (6, "crosstalk loop closure", criterion_6),
    (7, "resource comparison", criterion_7),
    (8, "oracle equivalence", criterion_8),
    (9, "property suites", criterion_9),
    (10, "end-to-end golden runs", criterion_10),
]


def _line(n, name, ok, detail):
    return f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {name}: {detail}"


@pytest.mark.parametrize("n,name,check", CRITERIA, ids=[f"criterion_{n}" for n, _, _ in CRITERIA])
def test_criterion(n, name, check, capsys):
    ok, detail = check()
    with capsys.disabled():
        print("\n" + _line(n, name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failures = 0
    for n, name, check in CRITERIA:
        ok, detail = check()
        failures += not ok
        print(_line(n, name, ok, detail))
    sys.exit(1 if failures else 0)
