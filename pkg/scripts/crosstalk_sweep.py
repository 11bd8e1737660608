"""Sweep a single coupling coefficient and compare measured crosstalk with 20 log10(c)."""

import argparse

import numpy as np

from tdmvolt.metrics import coupling_db, measure_crosstalk
from tdmvolt.model import CrosstalkMatrix
from tdmvolt.presets import dynamic_config
from tdmvolt.waveforms import Sine, WaveformSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--points", type=int, default=9)
    args = ap.parse_args()

    drive = WaveformSpec(Sine(5.0, 100e3), 20e-6)
    print(f"{'coupling':>10} {'expected dB':>12} {'measured dB':>12}")
    for c in np.geomspace(1e-3, 0.5, args.points):
        cfg = dynamic_config(crosstalk=CrosstalkMatrix.from_pairs(4, {(1, 0): float(c)}))
        got = measure_crosstalk(cfg, 0, drive, oversampling=8)[1]
        print(f"{c:10.4f} {coupling_db(c):12.2f} {got:12.2f}")


if __name__ == "__main__":
    main()
