"""Drive the 4-channel dynamic demux with four sines and dump the stepped traces."""

import argparse

import numpy as np

from tdmvolt.presets import dynamic_config
from tdmvolt.scheduler import compile_dynamic_stream
from tdmvolt.simulator import SimOptions, run, write_trace_csv
from tdmvolt.waveforms import reconstruction_error, sine_bank, zoh_reference


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--freqs", type=float, nargs=4, default=[50e3, 75e3, 100e3, 125e3])
    ap.add_argument("--amplitude", type=float, default=8.0)
    ap.add_argument("--duration", type=float, default=40e-6)
    ap.add_argument("--out", default="dynamic_sines.csv")
    args = ap.parse_args()

    cfg = dynamic_config()
    progs = sine_bank(args.freqs, args.amplitude, args.duration, cfg.per_channel_rate_hz)
    frames = compile_dynamic_stream(cfg, progs, args.duration)
    trace = run(cfg, frames, SimOptions(oversampling=16))
    write_trace_csv(trace, args.out)

    for c, p in enumerate(progs):
        ticks = trace.deliveries[trace.deliveries["channel"] == c]["tick"]
        err = reconstruction_error(trace.time_s, trace.electrode(c), zoh_reference(p),
                                   boundary=ticks, delay_s=(c + 1) / cfg.dac.update_rate_hz)
        print(f"ch{c} {args.freqs[c] / 1e3:6.1f} kHz  boundary rms {err.rms_boundary_v * 1e3:.3f} mV"
              f"  max {err.max_boundary_v * 1e3:.3f} mV  span max {err.max_span_v:.3f} V")
    print(f"{len(frames)} frames, {np.sum([len(f.slots) for f in frames])} slots -> {args.out}")


if __name__ == "__main__":
    main()
