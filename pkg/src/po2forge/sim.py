"""Cycle-level, bit-exact model of the weight-stationary shift-add systolic array.

Schedule per layer (weight stationary)::

    for kernel position k:
      for output tile (C_out / (M * PE_y)):
        for input tile (C_in / (S_W * PE_x)):
          load stage terms into every PE's registers
          for every output pixel:
            Lat_F cycles: cycle 0 runs F0 block + first F_gen pass,
                          each further cycle one more F_gen pass
            column sums of PE outputs are accumulated into the output buffer

Only the streaming cycles count as compute cycles; register loads and
pipeline fill/drain are reported separately.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hw import AcceleratorConfig, BRAM_BITS, lat_factor, resource_accl
from .store import LayerSpec, ModelGraph
from .wmd import (INT32_MAX, INT32_MIN, AccumulatorOverflow, DecomposedLayer, StageMatrix,
                  conv_patches)


class SimulationError(RuntimeError):
    pass


@dataclass
class SimReport:
    output: np.ndarray
    compute_cycles: int = 0
    load_cycles: int = 0
    fill_cycles: int = 0
    buffer_reads: int = 0
    buffer_writes: int = 0
    accumulations: int = 0
    overflow_events: int = 0

    def as_text(self) -> str:
        keys = ("compute_cycles", "load_cycles", "fill_cycles", "buffer_reads",
                "buffer_writes", "accumulations", "overflow_events")
        return "".join(f"{k}: {getattr(self, k)}\n" for k in keys)


class _Block:
    """Shift units + adder tree of one F-block, programmed from a stage matrix."""

    def __init__(self, stage: StageMatrix):
        self.rows = stage.rows
        counts = np.bincount(stage.terms[:, 0], minlength=stage.rows) if len(stage.terms) else \
            np.zeros(stage.rows, dtype=int)
        width = max(1, int(counts.max()) if counts.size else 1)
        # unused shift-unit lanes carry sign 0
        self.src = np.zeros((stage.rows, width), dtype=np.int64)
        self.shift = np.zeros((stage.rows, width), dtype=np.int64)
        self.sign = np.zeros((stage.rows, width), dtype=np.int64)
        fill = np.zeros(stage.rows, dtype=int)
        for r, c, z, s in stage.terms.tolist():
            lane = fill[r]
            self.src[r, lane], self.shift[r, lane], self.sign[r, lane] = c, z, s
            fill[r] += 1
        self.elements = len(stage.terms)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        lanes = v[self.src] >> self.shift
        return (lanes * self.sign).sum(axis=1)


class _PE:
    def __init__(self, m_rows: int):
        self.m_rows = m_rows
        self.blocks: list[_Block] = []
        self.state = np.zeros(m_rows, dtype=np.int64)

    def load(self, stages) -> int:
        self.blocks = [_Block(st) for st in stages] if stages else []
        return sum(b.elements for b in self.blocks)

    def step(self, cycle: int, v_in: np.ndarray | None) -> None:
        if not self.blocks:
            self.state = np.zeros(self.m_rows, dtype=np.int64)
            return
        if cycle == 0:
            v = self.blocks[0](v_in)
            if len(self.blocks) > 1:
                v = self.blocks[1](v)
        else:
            v = self.blocks[cycle + 1](self.state)
        self.state = v

    @property
    def output(self) -> np.ndarray:
        return self.state


def _overflowed(v: np.ndarray) -> int:
    return int(((v < INT32_MIN) | (v > INT32_MAX)).sum())


def simulate_layer(layer: LayerSpec, dl: DecomposedLayer, cfg: AcceleratorConfig, x: np.ndarray,
                   trace: list | None = None, check_capacity: bool = True, frac_bits: int = 0) -> SimReport:
    """Run one decomposed layer on the array.

    ``x`` is an (H, W, C_in) tensor in the ``activation_bw`` range. With
    ``frac_bits > 0`` the input registers append that many fraction bits
    (a left shift) before streaming, and the output is in units of
    ``2**-frac_bits``.
    """
    hard, wcfg = cfg.hard, dl.config
    if (wcfg.shifts, wcfg.nonzeros, wcfg.rows, wcfg.slice_width) != \
            (hard.shifts, hard.nonzeros, hard.rows, hard.slice_width):
        raise SimulationError(f"decomposition {wcfg} does not match accelerator {hard}")
    if wcfg.stages > hard.max_stages:
        raise SimulationError(f"layer needs {wcfg.stages} stages, hardware supports {hard.max_stages}")
    if dl.mode != "accelerator":
        raise SimulationError("the array executes accelerator-mode decompositions only")
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.integer):
        raise SimulationError("simulator inputs must be integers")
    qmax = 2 ** (cfg.calibration.activation_bw - 1)
    if x.size and (x.min() < -qmax or x.max() >= qmax):
        raise SimulationError(f"inputs exceed {cfg.calibration.activation_bw}-bit activations")
    if frac_bits < 0:
        raise SimulationError("frac_bits must be non-negative")
    x = x.astype(np.int64) << frac_bits

    if layer.kind == "dense":
        xp, oh, ow = x.reshape(1, 1, -1), 1, 1
        kx = ky = sx = sy = 1
    else:
        xp, oh, ow = conv_patches(x, layer)
        kx, ky = layer.kernel
        sx, sy = layer.stride
    c_in, c_out = dl.shape[1], dl.group_rows
    m, sw = hard.rows, hard.slice_width
    pe_x, pe_y = cfg.pe_x, cfg.pe_y
    n_slices, n_blocks = dl.num_slices, dl.blocks_per_group
    tiles_in, tiles_out = math.ceil(c_in / (sw * pe_x)), math.ceil(c_out / (m * pe_y))
    lat_f = lat_factor(wcfg.stages)

    res = resource_accl(cfg)
    if check_capacity:
        words = res.brams_output * BRAM_BITS // cfg.calibration.out_bw
        if oh * ow * c_out > words:
            raise SimulationError(f"output buffer capacity exceeded: {oh * ow * c_out} > {words} words")

    padded_in = np.zeros(xp.shape[:2] + (tiles_in * pe_x * sw,), dtype=np.int64)
    padded_in[..., :c_in] = xp
    out_buf = np.zeros((oh, ow, tiles_out * pe_y * m), dtype=np.int64)
    grid = [[_PE(m) for _ in range(pe_x)] for _ in range(pe_y)]
    rep = SimReport(output=None)

    for k in range(kx * ky):
        ki, kj = divmod(k, ky)
        for to in range(tiles_out):
            for ti in range(tiles_in):
                for py in range(pe_y):
                    b = to * pe_y + py
                    for px in range(pe_x):
                        s = ti * pe_x + px
                        stages = dl.stages(k * n_blocks + b, s) if b < n_blocks and s < n_slices else None
                        grid[py][px].load(stages)
                rep.load_cycles += pe_y * hard.max_stages * hard.nonzeros * m
                rep.fill_cycles += pe_x + pe_y - 1
                last = ti == tiles_in - 1 and k == kx * ky - 1
                for oy in range(oh):
                    for ox in range(ow):
                        pix = padded_in[oy * sx + ki, ox * sy + kj]
                        cols = [pix[(ti * pe_x + px) * sw:(ti * pe_x + px + 1) * sw] for px in range(pe_x)]
                        rep.buffer_reads += pe_x
                        for cyc in range(lat_f):
                            for py in range(pe_y):
                                for px in range(pe_x):
                                    grid[py][px].step(cyc, cols[px] if cyc == 0 else None)
                                    rep.overflow_events += _overflowed(grid[py][px].output)
                            rep.compute_cycles += 1
                            if trace is not None:
                                trace.append(f"cycle {rep.compute_cycles} k={k} tile_out={to} tile_in={ti} "
                                             f"pixel=({oy},{ox}) pass={cyc}")
                        for py in range(pe_y):
                            psum = np.zeros(m, dtype=np.int64)
                            for px in range(pe_x):
                                psum = psum + grid[py][px].output   # M adders per hop
                                rep.overflow_events += _overflowed(psum)
                            lo = (to * pe_y + py) * m
                            out_buf[oy, ox, lo:lo + m] += psum
                            rep.accumulations += m
                            rep.overflow_events += _overflowed(out_buf[oy, ox, lo:lo + m])
                            if last:
                                rep.buffer_writes += max(0, min(m, c_out - lo))
    rep.output = out_buf[:, :, :c_out].copy()
    if rep.overflow_events:
        raise AccumulatorOverflow(f"{rep.overflow_events} accumulator overflow events")
    return rep


def round_half_even_clamp(x: np.ndarray, bits: int) -> np.ndarray:
    q = 2 ** (bits - 1)
    return np.clip(np.rint(x), -q, q - 1).astype(np.int64)


@dataclass
class ModelSimReport:
    output: np.ndarray
    layers: dict[int, SimReport] = field(default_factory=dict)
    input_scales: dict[int, float] = field(default_factory=dict)
    nondecomposed_cycles: int = 0

    @property
    def compute_cycles(self) -> int:
        return sum(r.compute_cycles for r in self.layers.values()) + self.nondecomposed_cycles

    @property
    def load_cycles(self) -> int:
        return sum(r.load_cycles for r in self.layers.values())


def calibrate_scales(model: ModelGraph, dl_set: dict[int, DecomposedLayer], x: np.ndarray,
                     bits: int = 8) -> dict[int, float]:
    """Per-layer input scales (max |activation| / (2**(bits-1)-1)) from the float reference."""
    from .infer import forward, substitute_decomposed

    approx = substitute_decomposed(model, dl_set)
    scales: dict[int, float] = {}

    def hook(i, layer, xin):
        if i in dl_set:
            peak = float(np.abs(xin).max())
            scales[i] = peak / (2 ** (bits - 1) - 1) if peak > 0 else 1.0
        return None

    forward(approx, np.asarray(x, dtype=np.float64)[None], hook=hook)
    return scales


def simulate_model(model: ModelGraph, dl_set: dict[int, DecomposedLayer], cfg: AcceleratorConfig,
                   x: np.ndarray, scales: dict[int, float] | None = None,
                   nondecomposed_grid: tuple[int, int] | None = None,
                   frac_bits: int | None = None) -> ModelSimReport:
    """Run a whole model: decomposed layers on the array, the rest on the float path.

    Activations entering each decomposed layer are requantized (round half to
    even, clamp) to ``activation_bw`` bits with the given or calibrated scale.
    ``frac_bits`` defaults to Z-1, the fraction bits the datapath width
    reserves, so first-stage shifts lose nothing.
    """
    from .hw import baseline_layer_cycles

    bits = cfg.calibration.activation_bw
    frac = cfg.hard.shifts - 1 if frac_bits is None else frac_bits
    scales = calibrate_scales(model, dl_set, x, bits) if scales is None else scales
    report = ModelSimReport(output=None, input_scales=dict(scales))

    def hook(i, layer, xin):
        if i not in dl_set:
            if layer.weights is not None and nondecomposed_grid is not None:
                report.nondecomposed_cycles += baseline_layer_cycles(model, i, *nondecomposed_grid)
            return None
        dl = dl_set[i]
        s_in = scales[i]
        xq = round_half_even_clamp(xin[0] / s_in, bits)
        rep = simulate_layer(layer, dl, cfg, xq, frac_bits=frac)
        report.layers[i] = rep
        y = np.ldexp(rep.output.astype(np.float64), -frac) * (dl.scale * s_in)
        if layer.bias is not None:
            y = y + layer.bias
        return y[None]

    from .infer import forward

    out = forward(model, np.asarray(x, dtype=np.float64)[None], hook=hook)
    report.output = out.reshape(-1)
    return report
