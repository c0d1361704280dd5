import numpy as np
import pytest
from hypothesis import given, strategies as st

from po2forge.store import (CostCalibration, Dataset, LayerSpec, ModelError, ModelGraph, constant_calibration,
                            layer_geometry, load_calibration, load_dataset, load_model, same_pad,
                            save_calibration, save_dataset, save_model, spatial_out)


def small_model(rng):
    return ModelGraph("m", (6, 6, 2), [
        LayerSpec("conv2d", (2, 4), (3, 3), padding="same", weights=rng.normal(size=(3, 3, 2, 4)),
                  bias=rng.normal(size=4), decomposable=True),
        LayerSpec("relu", (4, 4)),
        LayerSpec("depthwise_conv2d", (4, 8), (3, 3), (2, 2), "valid", weights=rng.normal(size=(3, 3, 4, 2))),
        LayerSpec("pointwise_conv2d", (8, 4), weights=rng.normal(size=(1, 1, 8, 4))),
        LayerSpec("maxpool", (4, 4), (2, 2), (2, 2)),
        LayerSpec("dense", (4, 3), weights=rng.normal(size=(4, 3))),
        LayerSpec("softmax", (3, 3)),
    ])


def test_shapes_follow_the_chain():
    m = small_model(np.random.default_rng(0))
    assert m.shapes[0] == (6, 6, 4)
    assert m.shapes[2] == (2, 2, 8)
    assert m.shapes[4] == (1, 1, 4)
    assert m.shapes[-1] == (1, 1, 3)
    assert m.decomposable_layers == [0]
    assert m.num_classes == 3


def test_layer_validation_errors():
    with pytest.raises(ModelError):
        LayerSpec("conv3d", (1, 1))
    with pytest.raises(ModelError):
        LayerSpec("conv2d", (2, 4), (3, 3), weights=np.zeros((3, 3, 4, 2)))
    with pytest.raises(ModelError):
        LayerSpec("depthwise_conv2d", (2, 4), (3, 3), weights=np.zeros((3, 3, 2, 2)), decomposable=True)
    with pytest.raises(ModelError):
        ModelGraph("bad", (4, 4, 1), [LayerSpec("dense", (15, 2), weights=np.zeros((15, 2)))])


def test_residual_needs_matching_shapes():
    w = np.zeros((1, 1, 2, 2))
    ok = ModelGraph("r", (3, 3, 2), [LayerSpec("pointwise_conv2d", (2, 2), weights=w),
                                     LayerSpec("add_residual", (2, 2), source=-1)])
    assert ok.shapes[-1] == (3, 3, 2)
    with pytest.raises(ModelError):
        ModelGraph("r", (3, 3, 2), [LayerSpec("pointwise_conv2d", (2, 4), weights=np.zeros((1, 1, 2, 4))),
                                    LayerSpec("add_residual", (4, 4), source=-1)])


def test_model_archive_round_trip(tmp_path):
    m = small_model(np.random.default_rng(1))
    save_model(m, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.input_shape == m.input_shape
    for a, b in zip(m.layers, back.layers):
        assert (a.kind, a.channels, a.kernel, a.stride, a.padding, a.decomposable) == \
            (b.kind, b.channels, b.kernel, b.stride, b.padding, b.decomposable)
        if a.weights is not None:
            np.testing.assert_array_equal(b.weights, a.weights.astype(np.float32))
    # saving the loaded model again reproduces the same bytes
    save_model(back, tmp_path / "m2")
    for f in sorted((tmp_path / "m").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "m2" / f.relative_to(tmp_path / "m")).read_bytes()


def test_truncated_tensor_is_rejected(tmp_path):
    save_model(small_model(np.random.default_rng(2)), tmp_path / "m")
    blob = sorted((tmp_path / "m" / "tensors").glob("*weights.bin"))[0]
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ModelError, match="tensor length mismatch"):
        load_model(tmp_path / "m")


def test_missing_manifest(tmp_path):
    with pytest.raises(ModelError):
        load_model(tmp_path / "nothing")


def test_dataset_split_and_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    ds = Dataset(rng.normal(size=(25, 4, 4, 1)), rng.integers(0, 3, 25), 3, 0.2)
    assert ds.search_count == 5
    xs, ys = ds.subset("search")
    xf, yf = ds.subset("final")
    assert len(ys) == 5 and len(yf) == 20
    np.testing.assert_array_equal(np.concatenate([ys, yf]), ds.labels)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.inputs, ds.inputs.astype(np.float32))
    assert back.split_fraction_search == ds.split_fraction_search
    with pytest.raises(ValueError):
        ds.subset("train")


def test_dataset_label_range():
    with pytest.raises(ModelError):
        Dataset(np.zeros((2, 2, 2, 1)), [0, 3], 3)


@given(st.integers(1, 40), st.integers(1, 7), st.integers(1, 4))
def test_same_padding_keeps_ceil_size(size, k, s):
    before, after = same_pad(size, k, s)
    out = spatial_out(size, k, s, "same")
    assert out == -(-size // s)
    assert (out - 1) * s + k <= size + before + after
    assert 0 <= after - before <= 1


def test_geometry_of_conv(toy_model):
    g = layer_geometry(toy_model, 2)
    assert (g.k_xy, g.o_xy, g.c_in, g.c_out) == (1, 64, 8, 16)
    with pytest.raises(ModelError):
        layer_geometry(toy_model, 1)


def test_calibration_file(tmp_path):
    p = tmp_path / "cal.txt"
    p.write_text("# device\nLUT_max = 5000\nb_ports = 36\nr_mul = 2, 1\nr_add(2,16) = 40\n")
    cal = load_calibration(p)
    assert cal.lut_max == 5000 and cal.bram_bits_per_block == 36
    assert cal.r_mul(3, 8) == 2 + 8 * 2
    assert cal.r_add(2, 16) == 40
    assert cal.r_add(3, 16) == 32
    save_calibration(cal, tmp_path / "again.txt")
    assert load_calibration(tmp_path / "again.txt") == cal


def test_calibration_defaults_and_errors(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert load_calibration(empty) == CostCalibration()
    bad = tmp_path / "bad.txt"
    bad.write_text("lut_max =\n")
    with pytest.raises(ModelError, match="missing LUT_max"):
        load_calibration(bad)
    bad.write_text("lut_max = -3\n")
    with pytest.raises(ModelError):
        load_calibration(bad)
    bad.write_text("r_mux(4,8) = 0\n")
    with pytest.raises(ModelError):
        load_calibration(bad)
    bad.write_text("volts = 3\n")
    with pytest.raises(ModelError):
        load_calibration(bad)


def test_constant_calibration_ignores_arguments():
    cal = constant_calibration(10, 5, 20)
    assert {cal.r_mul(z, bw) for z in (1, 4) for bw in (8, 32)} == {10}
    assert cal.r_mux(16, 32) == 5 and cal.r_add(9, 17) == 20
