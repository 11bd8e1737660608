"""Settle the 32-channel static board onto 32 levels from -10 V to +10 V.

Prints the delivered level per channel after each refresh and writes
``static_levels.csv`` (channel, target_V, refresh, voltage_V).
"""

import argparse
import csv

import numpy as np

from tdmvolt.metrics import settle_error
from tdmvolt.presets import static_config
from tdmvolt.scheduler import VoltageProgram, compile_static_frame
from tdmvolt.simulator import SimOptions, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--refreshes", type=int, default=8)
    ap.add_argument("--c1", type=float, default=2.7e-9, help="first-stage capacitor (F)")
    ap.add_argument("--out", default="static_levels.csv")
    args = ap.parse_args()

    cfg = static_config(c1_f=args.c1)
    targets = np.linspace(-10, 10, cfg.electrode_count)
    progs = [VoltageProgram.dc(c, float(v), cfg.per_channel_rate_hz) for c, v in enumerate(targets)]
    frame = compile_static_frame(cfg, progs)
    trace = run(cfg, [frame] * args.refreshes, SimOptions(oversampling=16))
    err = settle_error(trace, progs)

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "target_V", "refresh", "voltage_V"])
        for row in trace.deliveries:
            ch = int(row["channel"])
            w.writerow([ch, targets[ch], int(row["frame"]), trace.voltages[int(row["tick"]), ch]])

    print(f"{'refresh':>7} {'max |error| (V)':>16}")
    for r, e in enumerate(np.nanmax(err.errors_v, axis=1)):
        print(f"{r:7d} {e:16.3e}")
    print(f"final levels: {trace.final('e0'):+.5f} .. {trace.final(f'e{cfg.electrode_count - 1}'):+.5f} V"
          f" -> {args.out}")


if __name__ == "__main__":
    main()
