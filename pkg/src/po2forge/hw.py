"""Analytical LUT/BRAM and cycle models of the shift-and-add systolic array."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping

from .store import CostCalibration, ConvGeometry, ModelGraph, layer_geometry
from .wmd import DecomposedLayer, WmdConfig

log = logging.getLogger(__name__)

BRAM_BITS = 36 * 1024


class InfeasibleError(RuntimeError):
    """No PE grid fits the LUT budget."""


@dataclass(frozen=True)
class HardParams:
    shifts: int
    nonzeros: int
    rows: int
    slice_width: int
    max_stages: int = 2

    def __post_init__(self):
        if self.max_stages < 2:
            raise ValueError("max_stages must be >= 2 (F0 block plus one generic block)")

    @classmethod
    def from_config(cls, cfg: WmdConfig, max_stages: int | None = None) -> "HardParams":
        return cls(cfg.shifts, cfg.nonzeros, cfg.rows, cfg.slice_width,
                   max(2, cfg.stages if max_stages is None else max_stages))


@dataclass(frozen=True)
class AcceleratorConfig:
    hard: HardParams
    pe_x: int
    pe_y: int
    calibration: CostCalibration

    def __post_init__(self):
        if self.pe_x < 1 or self.pe_y < 1:
            raise ValueError("PE grid dimensions must be positive")


@dataclass(frozen=True)
class ResourceEstimate:
    luts_total: int
    luts_per_pe_row: int
    brams_input: int
    brams_output: int
    f_elements_fetched: int
    feasible: bool


@dataclass(frozen=True)
class LatencyEstimate:
    cycles_total: int
    per_layer_cycles: tuple[int, ...]
    lat_f_per_layer: tuple[int, ...]
    layers: tuple[int, ...] = ()
    nondecomposed_cycles: int = 0


@dataclass(frozen=True)
class Mapping:
    pe_x: int
    pe_y: int
    cycles: int


def datapath_bits(hard: HardParams, cal: CostCalibration) -> int:
    """Worst-case datapath width: activation + fraction bits + adder growth, capped at out_bw."""
    growth = math.ceil(math.log2(hard.slice_width)) + (hard.max_stages - 1) * math.ceil(math.log2(hard.nonzeros))
    return min(cal.out_bw, cal.activation_bw + (hard.shifts - 1) + growth)


def resource_fgen(hard: HardParams, cal: CostCalibration) -> int:
    """LUTs of a generic block: E-1 shift units + muxes per row, plus the row adder tree."""
    bw = datapath_bits(hard, cal)
    e, m = hard.nonzeros, hard.rows
    return m * ((e - 1) * (cal.r_mul(hard.shifts, bw) + cal.r_mux(m, bw)) + cal.r_add(e, bw))


def resource_f0(hard: HardParams, cal: CostCalibration) -> int:
    """LUTs of the first block: S_W hard-wired shift units per row, no muxes."""
    bw = datapath_bits(hard, cal)
    return hard.rows * (hard.slice_width * cal.r_mul(hard.shifts, bw) + cal.r_add(hard.slice_width, bw))


def pe_unit_luts(hard: HardParams, cal: CostCalibration) -> int:
    bw = datapath_bits(hard, cal)
    return resource_f0(hard, cal) + resource_fgen(hard, cal) + cal.r_add(2, bw) * hard.rows


def resource_accl(cfg: AcceleratorConfig) -> ResourceEstimate:
    hard, cal = cfg.hard, cfg.calibration
    row = cfg.pe_x * pe_unit_luts(hard, cal)
    total = cfg.pe_y * row
    return ResourceEstimate(
        luts_total=total,
        luts_per_pe_row=row,
        brams_input=cfg.pe_x,
        brams_output=math.ceil(cfg.pe_y * hard.rows * cal.out_bw / cal.bram_bits_per_block),
        f_elements_fetched=cfg.pe_x * cfg.pe_y * hard.max_stages * hard.nonzeros * hard.rows,
        feasible=total <= cal.lut_max,
    )


def lat_factor(stages: int) -> int:
    """Cycles per tile: F0 + first generic block share a cycle, later stages reuse F_gen."""
    return max(1, stages - 1)


def tile_cycles(geom: ConvGeometry, cols: int, rows: int, pe_x: int, pe_y: int, lat_f: int = 1) -> int:
    return (lat_f * geom.k_xy * geom.o_xy
            * math.ceil(geom.c_in / (cols * pe_x)) * math.ceil(geom.c_out / (rows * pe_y)))


def latency_layer(geom: ConvGeometry, hard: HardParams, pe_x: int, pe_y: int, stages: int) -> int:
    if stages > hard.max_stages:
        raise ValueError(f"layer needs {stages} stages but hardware supports {hard.max_stages}")
    return tile_cycles(geom, hard.slice_width, hard.rows, pe_x, pe_y, lat_factor(stages))


def _plan(dl_set: Mapping) -> dict[int, int]:
    """Normalize {layer: DecomposedLayer | stage count} to {layer: stage count}."""
    return {int(i): (v.config.stages if isinstance(v, DecomposedLayer) else int(v)) for i, v in dl_set.items()}


def baseline_layer_cycles(model: ModelGraph, i: int, pe_x: int, pe_y: int) -> int:
    geom = layer_geometry(model, i)
    if model.layers[i].kind == "depthwise_conv2d":
        # channels are independent: only the multiplier dimension maps onto rows
        mult = geom.c_out // geom.c_in
        return geom.k_xy * geom.o_xy * math.ceil(geom.c_in / pe_x) * math.ceil(mult / pe_y)
    return tile_cycles(geom, 1, 1, pe_x, pe_y)


def latency_accl(model: ModelGraph, dl_set: Mapping, cfg: AcceleratorConfig,
                 nondecomposed_grid: tuple[int, int] | None = None) -> LatencyEstimate:
    plan = _plan(dl_set)
    per_layer, lat_f = [], []
    for i in sorted(plan):
        per_layer.append(latency_layer(layer_geometry(model, i), cfg.hard, cfg.pe_x, cfg.pe_y, plan[i]))
        lat_f.append(lat_factor(plan[i]))
    rest = [i for i, l in enumerate(model.layers) if l.weights is not None and i not in plan]
    extra = 0
    if rest:
        if nondecomposed_grid is None:
            log.warning("layers %s are not decomposed; charged 0 cycles", rest)
        else:
            extra = sum(baseline_layer_cycles(model, i, *nondecomposed_grid) for i in rest)
    return LatencyEstimate(sum(per_layer) + extra, tuple(per_layer), tuple(lat_f), tuple(sorted(plan)), extra)


def search_grid(pe_luts: int, lut_max: int, latency: Callable[[int, int], int]) -> Mapping:
    """Row-length sweep: grow PE_x while a row fits, fill PE_y, keep strictly better latency."""
    best: Mapping | None = None
    pe_x = 1
    while pe_x * pe_luts <= lut_max:
        pe_y = lut_max // (pe_x * pe_luts)
        lat = latency(pe_x, pe_y)
        if best is None or lat < best.cycles:
            best = Mapping(pe_x, pe_y, lat)
        pe_x += 1
    if best is None:
        raise InfeasibleError(f"no feasible grid: one PE needs {pe_luts} LUTs, budget is {lut_max}")
    return best


def map_pes(model: ModelGraph, dl_set: Mapping, hard: HardParams, cal: CostCalibration) -> Mapping:
    plan = _plan(dl_set)
    geoms = {i: layer_geometry(model, i) for i in plan}

    def latency(pe_x, pe_y):
        return sum(latency_layer(geoms[i], hard, pe_x, pe_y, plan[i]) for i in sorted(plan))

    return search_grid(pe_unit_luts(hard, cal), cal.lut_max, latency)


def baseline_sa_latency(model: ModelGraph, grid: tuple[int, int], layers=None) -> int:
    """Cycles of a MAC systolic array (one MAC per PE) over ``layers``.

    ``layers`` defaults to the decomposable layers, i.e. the workload the
    shift-add array takes over.
    """
    layers = model.decomposable_layers if layers is None else layers
    return sum(baseline_layer_cycles(model, i, *grid) for i in layers)


def baseline_mapping(model: ModelGraph, cal: CostCalibration, layers=None) -> Mapping:
    layers = model.decomposable_layers if layers is None else list(layers)
    return search_grid(cal.mac_pe_luts, cal.lut_max,
                       lambda x, y: baseline_sa_latency(model, (x, y), layers))


def speedup(lat_std: int, cycles: int) -> float:
    return lat_std / cycles if cycles else math.inf
