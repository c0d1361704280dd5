"""Latency and resources of one 3x3 conv layer on the shift-add array vs a MAC array.

Sweeps the stage count and PE grid for a 64->64 channel layer on a 16x16
output and prints cycles and speed-up against an 8x8 MAC baseline.
"""
import argparse

import numpy as np

from po2forge.hw import AcceleratorConfig, HardParams, baseline_sa_latency, latency_accl, resource_accl, speedup
from po2forge.store import CostCalibration, LayerSpec, ModelGraph


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--baseline-grid", default="8,8")
    args = ap.parse_args()

    c = args.channels
    model = ModelGraph("conv", (args.size, args.size, c), [
        LayerSpec("conv2d", (c, c), (3, 3), padding="same", weights=np.zeros((3, 3, c, c)), decomposable=True)])
    grid = tuple(int(v) for v in args.baseline_grid.split(","))
    base = baseline_sa_latency(model, grid)
    print(f"MAC baseline {grid[0]}x{grid[1]}: {base} cycles")
    cal = CostCalibration()
    print(f"{'Z,E,M,S_W':>10} {'P':>2} {'grid':>5} {'cycles':>7} {'speed-up':>8} {'LUTs':>7}")
    for m, sw in ((4, 4), (8, 4), (8, 2)):
        hard = HardParams(3, 3, m, sw, 3)
        for p in (1, 2, 3):
            for px, py in ((2, 4), (4, 4)):
                acc = AcceleratorConfig(hard, px, py, cal)
                cyc = latency_accl(model, {0: p}, acc).cycles_total
                luts = resource_accl(acc).luts_total
                print(f"{f'3,3,{m},{sw}':>10} {p:>2} {f'{px},{py}':>5} {cyc:>7} {speedup(base, cyc):>8.2f} {luts:>7}")


if __name__ == "__main__":
    main()
