"""Deterministic toy models, datasets and calibrations used by tests and scripts."""
from __future__ import annotations

import numpy as np

from .infer import forward
from .store import CostCalibration, Dataset, LayerSpec, ModelGraph

TOY_CLASSES = ("horizontal", "vertical", "diagonal")


def bar_images(count: int, seed: int = 0, size: int = 8, noise: float = 0.5):
    """Noisy 8x8 images of a horizontal bar, a vertical bar or a diagonal line."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(TOY_CLASSES), size=count)
    x = rng.normal(0.0, noise, size=(count, size, size, 1))
    for n, c in enumerate(labels):
        pos = rng.integers(1, size - 1)
        amp = rng.uniform(0.7, 1.3)
        if c == 0:
            x[n, pos, :, 0] += amp
        elif c == 1:
            x[n, :, pos, 0] += amp
        else:
            shift = rng.integers(-2, 3)
            idx = np.arange(size)
            keep = (idx + shift >= 0) & (idx + shift < size)
            x[n, idx[keep], (idx + shift)[keep], 0] += amp
    return x, labels


def _edge_filters(rng) -> np.ndarray:
    base = np.array([
        [[-1, -1, -1], [2, 2, 2], [-1, -1, -1]],     # horizontal line
        [[-1, 2, -1], [-1, 2, -1], [-1, 2, -1]],     # vertical line
        [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]],     # main diagonal
        [[-1, -1, 2], [-1, 2, -1], [2, -1, -1]],     # anti-diagonal
    ], dtype=np.float64) / 6.0
    filt = np.concatenate([base, -base]) + rng.normal(0, 0.05, size=(8, 3, 3))
    return filt.transpose(1, 2, 0)[:, :, None, :]    # (3, 3, 1, 8)


def _features_model(w1, w2, w3) -> list[LayerSpec]:
    return [
        LayerSpec("conv2d", (1, 8), (3, 3), padding="same", weights=w1, name="stem"),
        LayerSpec("relu", (8, 8), name="relu1"),
        LayerSpec("pointwise_conv2d", (8, 16), weights=w2, decomposable=True, name="pw2"),
        LayerSpec("relu", (16, 16), name="relu2"),
        LayerSpec("pointwise_conv2d", (16, 16), weights=w3, decomposable=True, name="pw3"),
        LayerSpec("relu", (16, 16), name="relu3"),
        LayerSpec("avgpool", (16, 16), (4, 4), (4, 4), name="pool"),
    ]


def toy3(seed: int = 0, train: int = 600, ridge: float = 1e-2, noise: float = 0.5) -> ModelGraph:
    """Three-class bar detector.

    Edge-filter stem, two pointwise mixing layers, 4x4 average pool and a
    ridge-fitted dense head. The two pointwise layers and the head are the
    decomposition targets; the 1-channel stem is not.
    """
    rng = np.random.default_rng(seed)
    w1 = _edge_filters(rng)
    w2 = rng.normal(0, 0.5, size=(1, 1, 8, 16))
    w3 = rng.normal(0, 0.35, size=(1, 1, 16, 16))
    trunk = ModelGraph("toy3-trunk", (8, 8, 1), _features_model(w1, w2, w3))
    x, y = bar_images(train, seed=seed + 1000, noise=noise)
    feats = forward(trunk, x).reshape(train, -1)
    scale = 1.0 / feats.std()
    feats = feats * scale
    targets = np.eye(3)[y] * 4.0 - 2.0
    a = feats.T @ feats + ridge * train * np.eye(feats.shape[1])
    dense = np.linalg.solve(a, feats.T @ targets)
    layers = _features_model(w1, w2, w3) + [
        LayerSpec("dense", (64, 3), weights=dense * scale, decomposable=True, name="fc"),
        LayerSpec("softmax", (3, 3), name="softmax"),
    ]
    return ModelGraph("toy3", (8, 8, 1), layers)


def toy_dataset(count: int = 800, seed: int = 1, split: float = 0.25, noise: float = 0.5) -> Dataset:
    x, y = bar_images(count, seed=seed, noise=noise)
    return Dataset(x, y, len(TOY_CLASSES), split)


def dscnn_like(seed: int = 0, width: int = 16, classes: int = 4) -> ModelGraph:
    """Small depthwise-separable keyword-spotting style network with four pointwise targets."""
    rng = np.random.default_rng(seed)

    def he(*shape, fan_in):
        return rng.normal(0, np.sqrt(2.0 / fan_in), size=shape)

    layers = [
        LayerSpec("conv2d", (1, width), (3, 3), (2, 2), "same", weights=he(3, 3, 1, width, fan_in=9), name="stem"),
        LayerSpec("relu", (width, width)),
    ]
    for b in range(4):
        layers += [
            LayerSpec("depthwise_conv2d", (width, width), (3, 3), padding="same",
                      weights=he(3, 3, width, 1, fan_in=9), name=f"dw{b}"),
            LayerSpec("relu", (width, width)),
            LayerSpec("pointwise_conv2d", (width, width), weights=he(1, 1, width, width, fan_in=width),
                      decomposable=True, name=f"pw{b}"),
            LayerSpec("relu", (width, width)),
        ]
    layers += [
        LayerSpec("avgpool", (width, width), (6, 4), (6, 4), name="pool"),
        LayerSpec("dense", (width, classes), weights=he(width, classes, fan_in=width), name="fc"),
        LayerSpec("softmax", (classes, classes)),
    ]
    return ModelGraph("dscnn-like", (12, 8, 1), layers)


def teacher_dataset(model: ModelGraph, count: int = 200, seed: int = 2, split: float = 0.25) -> Dataset:
    """Random inputs labelled by the model itself (baseline accuracy is 100%)."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(count,) + model.input_shape)
    labels = forward(model, x).reshape(count, -1).argmax(axis=1)
    return Dataset(x, labels, model.num_classes, split)


def toy_calibration() -> CostCalibration:
    """Small LUT budget so that the PE grid, not the channel count, limits parallelism."""
    return CostCalibration(lut_max=12000, mac_pe_luts=200)
