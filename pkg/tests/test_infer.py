from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import naive_conv
from po2forge.infer import (EvalResult, evaluate_accuracy, forward, infer, quantize_ptq, quantize_tensor,
                            round_half_away, run_layer, substitute_decomposed, substitute_weights)
from po2forge.store import Dataset, LayerSpec, ModelError, ModelGraph
from po2forge.wmd import WmdConfig, decompose_layer, weight_to_mn


@pytest.mark.parametrize("k,stride,padding", [(3, 1, "same"), (3, 2, "same"), (3, 2, "valid"), (1, 1, "valid"),
                                              (2, 2, "same")])
def test_conv_matches_direct_loops(k, stride, padding):
    rng = np.random.default_rng(k * 10 + stride)
    kind = "pointwise_conv2d" if k == 1 else "conv2d"
    layer = LayerSpec(kind, (3, 4), (k, k), (stride, stride), padding, weights=rng.normal(size=(k, k, 3, 4)))
    x = rng.normal(size=(7, 6, 3))
    np.testing.assert_allclose(run_layer(layer, x[None])[0], naive_conv(x, layer.weights, (stride, stride), padding),
                               rtol=1e-12, atol=1e-12)


def test_depthwise_is_per_channel_conv():
    rng = np.random.default_rng(0)
    layer = LayerSpec("depthwise_conv2d", (3, 6), (3, 3), padding="same", weights=rng.normal(size=(3, 3, 3, 2)))
    x = rng.normal(size=(5, 5, 3))
    y = run_layer(layer, x[None])[0]
    for c in range(3):
        for mlt in range(2):
            w = layer.weights[:, :, c:c + 1, mlt:mlt + 1]
            np.testing.assert_allclose(y[:, :, c * 2 + mlt], naive_conv(x[:, :, c:c + 1], w, (1, 1), "same")[:, :, 0],
                                       atol=1e-12)


def test_pooling_and_activations():
    x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    mp = run_layer(LayerSpec("maxpool", (1, 1), (2, 2), (2, 2)), x)
    np.testing.assert_array_equal(mp[0, :, :, 0], [[5, 7], [13, 15]])
    ap = run_layer(LayerSpec("avgpool", (1, 1), (2, 2), (2, 2)), x)
    np.testing.assert_array_equal(ap[0, :, :, 0], [[2.5, 4.5], [10.5, 12.5]])
    # 'same' average pooling divides by the number of real cells
    ap_same = run_layer(LayerSpec("avgpool", (1, 1), (3, 3), padding="same"), np.ones((1, 3, 3, 1)))
    np.testing.assert_allclose(ap_same, 1.0)
    sm = run_layer(LayerSpec("softmax", (3, 3)), np.array([[[[1.0, 2.0, 3.0]]]]))
    assert sm.sum() == pytest.approx(1.0)
    assert run_layer(LayerSpec("relu", (1, 1)), -x).max() == 0.0


def test_residual_adds_the_source_output():
    w = np.eye(2).reshape(1, 1, 2, 2) * 2.0
    m = ModelGraph("r", (2, 2, 2), [LayerSpec("pointwise_conv2d", (2, 2), weights=w),
                                    LayerSpec("add_residual", (2, 2), source=-1),
                                    LayerSpec("add_residual", (2, 2), source=0)])
    x = np.random.default_rng(0).normal(size=(1, 2, 2, 2))
    np.testing.assert_allclose(forward(m, x), 2 * x + x + 2 * x)


def test_bias_is_applied():
    layer = LayerSpec("dense", (2, 2), weights=np.eye(2), bias=np.array([1.0, -1.0]))
    np.testing.assert_allclose(run_layer(layer, np.zeros((1, 1, 1, 2))), [[[[1.0, -1.0]]]])


def test_infer_single_and_batch(toy_model, toy_data):
    x = toy_data.inputs[:3]
    batch = infer(toy_model, x)
    assert batch.shape == (3, 3)
    np.testing.assert_allclose(infer(toy_model, x[1]), batch[1])
    with pytest.raises(ModelError):
        infer(toy_model, np.zeros((4, 4, 1)))


def test_substituting_own_weights_is_identity(toy_model):
    i = toy_model.decomposable_layers[0]
    layer = toy_model.layers[i]
    same = substitute_weights(toy_model, i, weight_to_mn(layer.weights, layer.kind))
    np.testing.assert_array_equal(same.layers[i].weights, layer.weights)
    with pytest.raises(ModelError):
        substitute_weights(toy_model, i, np.zeros((3, 3)))


def test_exact_decomposition_keeps_accuracy(toy_model, toy_data):
    base = evaluate_accuracy(toy_model, toy_data)
    # snap one layer to the codebook, then decompose it: nothing changes
    i = toy_model.decomposable_layers[0]
    layer = toy_model.layers[i]
    scale = float(np.abs(layer.weights).max())
    snapped = np.sign(layer.weights) * scale * 2.0 ** -np.clip(np.rint(-np.log2(np.abs(layer.weights) / scale)), 0, 3)
    model = toy_model.with_layer(i, replace(layer, weights=snapped))
    dl = decompose_layer(model.layers[i], WmdConfig(1, 4, 2, 4, 4), layer_index=i)
    assert dl.residual_norm == pytest.approx(0.0, abs=1e-12)
    approx = substitute_decomposed(model, {i: dl})
    assert evaluate_accuracy(approx, toy_data, baseline=evaluate_accuracy(model, toy_data)).accuracy_drop == 0.0
    assert base.samples_evaluated == toy_data.search_count


def test_accuracy_drop_in_percentage_points():
    m = ModelGraph("id", (1, 1, 2), [LayerSpec("dense", (2, 2), weights=np.eye(2))])
    ds = Dataset(np.array([[[[1.0, 0.0]]], [[[0.0, 1.0]]]] * 2), [0, 1, 1, 1], 2, 1.0)
    base = EvalResult(1.0, 0.0, 4, 4)
    res = evaluate_accuracy(m, ds, "search", base)
    assert res.top1_accuracy == 0.75 and res.accuracy_drop == 25.0


def test_empty_subset_is_an_error():
    m = ModelGraph("id", (1, 1, 2), [LayerSpec("dense", (2, 2), weights=np.eye(2))])
    ds = Dataset(np.zeros((5, 1, 1, 2)), [0] * 5, 2, 0.1)
    with pytest.raises(ModelError):
        evaluate_accuracy(m, ds, "search")


def test_ptq_formula_value():
    w = np.array([1.0, 0.5, -0.25])
    q = quantize_tensor(w, 8)
    # 0.5 * 127 = 63.5 rounds away from zero to 64
    assert q[1] == pytest.approx(64 / 127)
    assert q[0] == 1.0 and q[2] == pytest.approx(-32 / 127)
    np.testing.assert_array_equal(round_half_away(np.array([-2.5, -0.5, 0.5, 1.5])), [-3, -1, 1, 2])


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=30), st.integers(2, 16))
def test_ptq_error_is_at_most_half_a_step(vals, bits):
    w = np.array(vals)
    q = quantize_tensor(w, bits)
    peak = np.abs(w).max()
    if peak == 0:
        assert not q.any()
        return
    step = peak / (2 ** (bits - 1) - 1)
    assert np.all(np.abs(q - w) <= step / 2 + 1e-12 * peak)
    assert len(np.unique(np.rint(q / step))) <= 2 ** bits - 1


def test_ptq_rejects_one_bit(toy_model):
    with pytest.raises(ValueError):
        quantize_ptq(toy_model, 1)
