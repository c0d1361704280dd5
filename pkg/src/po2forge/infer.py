"""Float reference executor, weight substitution, PTQ and accuracy scoring."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .store import Dataset, LayerSpec, ModelError, ModelGraph, same_pad
from .wmd import DecomposedLayer, mn_to_weight, reconstruct, weight_to_mn


def _pad(x: np.ndarray, layer: LayerSpec, value: float = 0.0) -> np.ndarray:
    if layer.padding != "same":
        return x
    (pt, pb) = same_pad(x.shape[1], layer.kernel[0], layer.stride[0])
    (pl, pr) = same_pad(x.shape[2], layer.kernel[1], layer.stride[1])
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=value)


def _windows(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """(B, OH, OW, C, Kx, Ky) view of the (padded) input."""
    kx, ky = layer.kernel
    sx, sy = layer.stride
    return sliding_window_view(x, (kx, ky), axis=(1, 2))[:, ::sx, ::sy]


def run_layer(layer: LayerSpec, x: np.ndarray, skip: np.ndarray | None = None) -> np.ndarray:
    """Apply one layer to a batch ``x`` of shape (B, H, W, C)."""
    kind = layer.kind
    if kind in ("conv2d", "pointwise_conv2d"):
        win = _windows(_pad(x, layer), layer)
        y = np.einsum("bhwcij,ijco->bhwo", win, layer.weights, optimize=True)
    elif kind == "depthwise_conv2d":
        win = _windows(_pad(x, layer), layer)
        y = np.einsum("bhwcij,ijcm->bhwcm", win, layer.weights, optimize=True)
        y = y.reshape(y.shape[:3] + (-1,))
    elif kind == "dense":
        y = (x.reshape(x.shape[0], -1) @ layer.weights).reshape(x.shape[0], 1, 1, -1)
    elif kind == "maxpool":
        y = _windows(_pad(x, layer, -np.inf), layer).max(axis=(-2, -1))
    elif kind == "avgpool":
        total = _windows(_pad(x, layer), layer).sum(axis=(-2, -1))
        ones = np.ones((1,) + x.shape[1:3] + (1,))
        count = _windows(_pad(ones, layer), layer).sum(axis=(-2, -1))
        y = total / count
    elif kind == "relu":
        y = np.maximum(x, 0.0)
    elif kind == "softmax":
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
    elif kind == "add_residual":
        y = x + skip
    else:
        raise ModelError(f"unknown layer kind {kind!r}")
    if layer.bias is not None:
        y = y + layer.bias
    return y


def forward(model: ModelGraph, x: np.ndarray, hook=None) -> np.ndarray:
    """Batch forward pass. ``hook(i, layer, x_in)`` may return a replacement output."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ModelError(f"input shape {x.shape[1:]} != model input {model.input_shape}")
    x_in = x
    outs: list[np.ndarray] = []
    for i, layer in enumerate(model.layers):
        skip = None
        if layer.kind == "add_residual":
            skip = x_in if layer.source == -1 else outs[layer.source]
        y = hook(i, layer, x) if hook is not None else None
        x = run_layer(layer, x, skip) if y is None else y
        outs.append(x)
    return x


def infer(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Class scores for one input (H, W, C) or a batch (B, H, W, C)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    y = forward(model, x[None] if single else x)
    y = y.reshape(y.shape[0], -1)
    return y[0] if single else y


def substitute_weights(model: ModelGraph, layer_index: int, matrix: np.ndarray,
                       mode: str = "accelerator") -> ModelGraph:
    """Copy of ``model`` with one layer's weights replaced from its M x N form."""
    layer = model.layers[layer_index]
    expected = weight_to_mn(layer.weights, layer.kind, mode).shape
    if np.shape(matrix) != expected:
        raise ModelError(f"replacement shape {np.shape(matrix)} != layer matrix {expected}")
    w = mn_to_weight(matrix, layer.kind, layer.weight_shape, mode)
    return model.with_layer(layer_index, replace(layer, weights=w))


def substitute_decomposed(model: ModelGraph, layers: dict[int, DecomposedLayer]) -> ModelGraph:
    for i, dl in sorted(layers.items()):
        model = substitute_weights(model, i, reconstruct(dl), dl.mode)
    return model


@dataclass(frozen=True)
class EvalResult:
    top1_accuracy: float
    accuracy_drop: float        # percentage points vs baseline
    samples_evaluated: int
    correct: int = 0


def evaluate_accuracy(model: ModelGraph, dataset: Dataset, subset: str = "search",
                      baseline: EvalResult | None = None, batch: int = 256) -> EvalResult:
    x, y = dataset.subset(subset)
    if len(y) == 0:
        raise ModelError(f"dataset subset {subset!r} is empty")
    correct = 0
    for start in range(0, len(y), batch):
        scores = infer(model, x[start:start + batch])
        correct += int((scores.argmax(axis=1) == y[start:start + batch]).sum())
    top1 = correct / len(y)
    if baseline is None:
        drop = 0.0
    elif baseline.samples_evaluated == len(y):
        drop = 100.0 * (baseline.correct - correct) / len(y)
    else:
        drop = 100.0 * (baseline.top1_accuracy - top1)
    return EvalResult(top1, drop, len(y), correct)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(w: np.ndarray, bits: int) -> np.ndarray:
    """Per-tensor symmetric fake quantization."""
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.abs(w).max())
    if peak == 0.0:
        return np.array(w, dtype=np.float64)
    s = peak / qmax
    return np.clip(round_half_away(w / s), -qmax, qmax) * s


def quantize_ptq(model: ModelGraph, weight_bits: int) -> ModelGraph:
    """Quantize every weight tensor to ``weight_bits``; biases and activations untouched."""
    if weight_bits < 2:
        raise ValueError("weight_bits must be >= 2")
    for i, layer in enumerate(model.layers):
        if layer.weights is not None:
            model = model.with_layer(i, replace(layer, weights=quantize_tensor(layer.weights, weight_bits)))
    return model
