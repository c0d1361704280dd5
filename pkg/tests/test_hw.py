import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import grid_candidates
from po2forge.hw import (AcceleratorConfig, HardParams, InfeasibleError, baseline_layer_cycles, baseline_mapping,
                         baseline_sa_latency, datapath_bits, latency_accl, latency_layer, map_pes, pe_unit_luts,
                         resource_accl, resource_f0, resource_fgen, search_grid, speedup, tile_cycles)
from po2forge.store import ConvGeometry, CostCalibration, LayerSpec, ModelGraph, constant_calibration

CAL = constant_calibration(10, 5, 20)
EXAMPLE_LAYER = ConvGeometry(9, 256, 64, 64)


def test_generic_block_luts():
    assert resource_fgen(HardParams(3, 3, 4, 4), CAL) == 200
    assert resource_fgen(HardParams(3, 1, 4, 4), CAL) == 80
    assert resource_fgen(HardParams(3, 3, 8, 4), CAL) == 400


def test_first_block_luts():
    assert resource_f0(HardParams(3, 3, 4, 4), CAL) == 240
    assert resource_f0(HardParams(3, 3, 4, 1), CAL) == 120
    assert resource_f0(HardParams(3, 2, 4, 4), CAL) == resource_f0(HardParams(3, 4, 4, 4), CAL)


def test_accelerator_resources():
    res = resource_accl(AcceleratorConfig(HardParams(3, 3, 4, 4), 2, 2, CAL))
    assert res.luts_total == 2080 and res.luts_per_pe_row == 1040
    assert res.f_elements_fetched == 96
    assert res.brams_input == 2
    big = resource_accl(AcceleratorConfig(HardParams(3, 3, 8, 4), 2, 4, CAL))
    assert big.brams_output == 15


def test_datapath_width_is_capped():
    cal = CostCalibration()
    assert datapath_bits(HardParams(3, 3, 4, 4), cal) == 8 + 2 + 2 + 2
    assert datapath_bits(HardParams(30, 3, 4, 4, 9), cal) == 32


@given(st.integers(1, 5), st.integers(2, 5), st.sampled_from([2, 4, 8, 16]), st.sampled_from([1, 2, 4]),
       st.integers(2, 4), st.integers(1, 6), st.integers(1, 6))
def test_total_is_grid_times_unit(z, e, m, sw, fmax, px, py):
    hard = HardParams(z, e, m, sw, fmax)
    cal = CostCalibration()
    res = resource_accl(AcceleratorConfig(hard, px, py, cal))
    bw = datapath_bits(hard, cal)
    unit = resource_f0(hard, cal) + resource_fgen(hard, cal) + cal.r_add(2, bw) * m
    assert res.luts_total == px * py * unit == py * res.luts_per_pe_row
    assert res.feasible == (res.luts_total <= cal.lut_max)


def test_layer_latency_examples():
    hard = HardParams(3, 3, 8, 4, 3)
    assert latency_layer(EXAMPLE_LAYER, hard, 2, 4, 2) == 36864
    assert latency_layer(EXAMPLE_LAYER, hard, 2, 4, 3) == 73728
    assert latency_layer(EXAMPLE_LAYER, hard, 2, 4, 1) == 36864
    assert latency_layer(ConvGeometry(9, 256, 8, 32), hard, 2, 4, 2) == 9 * 256
    with pytest.raises(ValueError):
        latency_layer(EXAMPLE_LAYER, hard, 2, 4, 4)


geom = st.builds(ConvGeometry, st.sampled_from([1, 9]), st.integers(1, 64), st.integers(1, 70), st.integers(1, 70))


@given(geom, st.integers(1, 8), st.integers(1, 8), st.integers(1, 3))
def test_latency_monotone(g, px, py, p):
    hard = HardParams(2, 2, 4, 2, 4)
    base = latency_layer(g, hard, px, py, p)
    assert latency_layer(g, hard, px + 1, py, p) <= base
    assert latency_layer(g, hard, px, py + 1, p) <= base
    assert latency_layer(g, hard, px, py, p + 1) >= base
    assert latency_layer(g, HardParams(2, 2, 8, 4, 4), px, py, p) <= base
    assert latency_layer(ConvGeometry(g.k_xy, g.o_xy + 1, g.c_in + 1, g.c_out + 1), hard, px, py, p) >= base


def test_grid_search_hand_trace():
    lat = lambda x, y: tile_cycles(ConvGeometry(1, 1, 8, 8), 4, 4, x, y)
    assert [(x, y, lat(x, y)) for x, y in grid_candidates(30, 100)] == [(1, 3, 2), (2, 1, 2), (3, 1, 2)]
    best = search_grid(30, 100, lat)
    assert (best.pe_x, best.pe_y, best.cycles) == (1, 3, 2)
    with pytest.raises(InfeasibleError, match="no feasible grid"):
        search_grid(101, 100, lat)


@given(st.integers(20, 3000), st.integers(100, 10_000), geom, st.sampled_from([1, 2, 4]), st.sampled_from([1, 4, 8]))
def test_grid_search_is_exhaustive_minimum(pe_luts, lut_max, g, sw, m):
    lat = lambda x, y: tile_cycles(g, sw, m, x, y)
    cands = grid_candidates(pe_luts, lut_max)
    if not cands:
        with pytest.raises(InfeasibleError):
            search_grid(pe_luts, lut_max, lat)
        return
    best = search_grid(pe_luts, lut_max, lat)
    lo = min(lat(x, y) for x, y in cands)
    assert best.cycles == lo
    assert (best.pe_x, best.pe_y) == next((x, y) for x, y in cands if lat(x, y) == lo)


def example_model(cin=64, cout=64):
    w = np.zeros((3, 3, cin, cout))
    return ModelGraph("ex", (16, 16, cin), [LayerSpec("conv2d", (cin, cout), (3, 3), padding="same", weights=w,
                                                      decomposable=True)])


def test_baseline_example_and_speedup():
    model = example_model()
    assert baseline_sa_latency(model, (8, 8)) == 147456
    wmd = latency_accl(model, {0: 2}, AcceleratorConfig(HardParams(3, 3, 8, 4), 2, 4, CAL))
    assert wmd.cycles_total == 36864
    assert speedup(147456, wmd.cycles_total) == 4.0
    empty = ModelGraph("e", (4, 4, 1), [LayerSpec("relu", (1, 1))])
    assert baseline_sa_latency(empty, (8, 8)) == 0


def test_latency_totals_and_nondecomposed_layers(toy_model, caplog):
    cfg = AcceleratorConfig(HardParams(3, 3, 8, 4, 3), 2, 2, CostCalibration())
    plan = {2: 2, 4: 3, 7: 1}
    est = latency_accl(toy_model, plan, cfg)
    assert est.cycles_total == sum(est.per_layer_cycles)
    assert est.lat_f_per_layer == (1, 2, 1)
    assert "not decomposed" in caplog.text
    charged = latency_accl(toy_model, plan, cfg, nondecomposed_grid=(4, 4))
    assert charged.nondecomposed_cycles == baseline_layer_cycles(toy_model, 0, 4, 4) > 0
    assert charged.cycles_total == est.cycles_total + charged.nondecomposed_cycles


def test_depthwise_baseline_counts_multiplier_only(dscnn_model):
    g_in, g_out = dscnn_model.input_of(2)[2], dscnn_model.output_of(2)
    cycles = baseline_layer_cycles(dscnn_model, 2, 4, 1)
    assert cycles == 9 * g_out[0] * g_out[1] * math.ceil(g_in / 4)


def test_map_pes_uses_unit_cost(toy_model, toy_cal):
    hard = HardParams(4, 2, 8, 4)
    m = map_pes(toy_model, {2: 2, 4: 2, 7: 2}, hard, toy_cal)
    assert m.pe_x * m.pe_y * pe_unit_luts(hard, toy_cal) <= toy_cal.lut_max
    base = baseline_mapping(toy_model, toy_cal)
    assert base.pe_x * base.pe_y * toy_cal.mac_pe_luts <= toy_cal.lut_max
