"""Model, dataset and cost-calibration containers plus their on-disk formats.

Model archive layout::

    <dir>/manifest              JSON, sorted keys, 2-space indent
    <dir>/tensors/<name>.bin    little-endian float32, row-major

Conv weights are stored as (K_x, K_y, C_in, C_out), depthwise weights as
(K_x, K_y, C_in, multiplier) and dense weights as (C_in, C_out). Tensors are
NHWC-style (H, W, C); the first kernel axis runs along H.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

MODEL_FORMAT = "po2forge-model/1"
DATASET_FORMAT = "po2forge-dataset/1"

LAYER_KINDS = (
    "conv2d", "depthwise_conv2d", "pointwise_conv2d", "dense",
    "maxpool", "avgpool", "relu", "softmax", "add_residual",
)
WEIGHTED_KINDS = ("conv2d", "depthwise_conv2d", "pointwise_conv2d", "dense")
DECOMPOSABLE_KINDS = ("conv2d", "pointwise_conv2d", "dense")


class ModelError(ValueError):
    """Raised for malformed archives or inconsistent model graphs."""


def _frozen(a):
    if a is None:
        return None
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: tuple[int, int]
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: str = "valid"
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    decomposable: bool = False
    # add_residual only: index of the layer whose output is added (-1 = model input)
    source: int | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        object.__setattr__(self, "weights", _frozen(self.weights))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.kind not in LAYER_KINDS:
            raise ModelError(f"unknown layer kind {self.kind!r}")
        if self.padding not in ("same", "valid"):
            raise ModelError(f"unknown padding {self.padding!r}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.channels) < 1:
            raise ModelError(f"{self.kind}: kernel, stride and channels must be positive")
        if self.decomposable and self.kind not in DECOMPOSABLE_KINDS:
            raise ModelError(f"{self.kind} layers cannot be decomposable")
        if self.kind == "pointwise_conv2d" and self.kernel != (1, 1):
            raise ModelError("pointwise_conv2d requires a 1x1 kernel")
        c_in, c_out = self.channels
        if self.kind in WEIGHTED_KINDS:
            if self.weights is None:
                raise ModelError(f"{self.kind} layer is missing weights")
            if self.weights.shape != self.weight_shape:
                raise ModelError(
                    f"{self.kind}: weight shape {self.weights.shape} != expected {self.weight_shape}")
            if self.bias is not None and self.bias.shape != (c_out,):
                raise ModelError(f"{self.kind}: bias shape {self.bias.shape} != ({c_out},)")
            if self.kind == "depthwise_conv2d" and c_out % c_in:
                raise ModelError("depthwise_conv2d requires C_out = C_in * multiplier")
        else:
            if self.weights is not None or self.bias is not None:
                raise ModelError(f"{self.kind} layers carry no weights")
            if c_in != c_out:
                raise ModelError(f"{self.kind} must preserve channel count")
        if self.kind == "add_residual" and self.source is None:
            raise ModelError("add_residual needs a source layer index")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        c_in, c_out = self.channels
        kx, ky = self.kernel
        if self.kind == "dense":
            return (c_in, c_out)
        if self.kind == "depthwise_conv2d":
            return (kx, ky, c_in, c_out // c_in)
        return (kx, ky, c_in, c_out)

    @property
    def is_spatial(self) -> bool:
        return self.kind in ("conv2d", "depthwise_conv2d", "pointwise_conv2d", "maxpool", "avgpool")


def spatial_out(size: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-size // s)
    return (size - k) // s + 1


def same_pad(size: int, k: int, s: int) -> tuple[int, int]:
    """TF-style 'same' padding split (before, after)."""
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def layer_output_shape(layer: LayerSpec, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
    h, w, c = in_shape
    if layer.kind == "dense":
        if h * w * c != layer.channels[0]:
            raise ModelError(f"dense expects {layer.channels[0]} inputs, got {h}x{w}x{c}")
        return (1, 1, layer.channels[1])
    if c != layer.channels[0]:
        raise ModelError(f"{layer.kind} expects {layer.channels[0]} channels, got {c}")
    if layer.is_spatial:
        oh = spatial_out(h, layer.kernel[0], layer.stride[0], layer.padding)
        ow = spatial_out(w, layer.kernel[1], layer.stride[1], layer.padding)
        if oh < 1 or ow < 1:
            raise ModelError(f"{layer.kind}: kernel larger than input {in_shape}")
        return (oh, ow, layer.channels[1])
    return (h, w, c)


@dataclass(frozen=True)
class ModelGraph:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    shapes: tuple[tuple[int, int, int], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ModelError(f"input_shape must be 3 positive integers, got {self.input_shape}")
        shapes = []
        cur = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                cur = layer_output_shape(layer, cur)
            except ModelError as exc:
                raise ModelError(f"layer {i}: {exc}") from None
            if layer.kind == "add_residual":
                src = layer.source
                if not -1 <= src < i:
                    raise ModelError(f"layer {i}: residual source {src} out of range")
                src_shape = self.input_shape if src == -1 else shapes[src]
                if src_shape != cur:
                    raise ModelError(f"layer {i}: residual shapes {src_shape} vs {cur}")
            shapes.append(cur)
        object.__setattr__(self, "shapes", tuple(shapes))

    def input_of(self, i: int) -> tuple[int, int, int]:
        return self.input_shape if i == 0 else self.shapes[i - 1]

    def output_of(self, i: int) -> tuple[int, int, int]:
        return self.shapes[i]

    @property
    def decomposable_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.decomposable]

    def with_layer(self, i: int, layer: LayerSpec) -> "ModelGraph":
        layers = list(self.layers)
        layers[i] = layer
        return ModelGraph(self.name, self.input_shape, tuple(layers))

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][-1]


@dataclass(frozen=True)
class ConvGeometry:
    """Loop bounds of one layer as seen by the accelerator."""
    k_xy: int
    o_xy: int
    c_in: int
    c_out: int


def layer_geometry(model: ModelGraph, i: int) -> ConvGeometry:
    layer = model.layers[i]
    if layer.kind not in WEIGHTED_KINDS:
        raise ModelError(f"layer {i} ({layer.kind}) has no MAC workload")
    oh, ow, _ = model.output_of(i)
    kx, ky = layer.kernel
    return ConvGeometry(kx * ky, oh * ow, layer.channels[0], layer.channels[1])


# --- archive I/O -----------------------------------------------------------

def _tensor_meta(path: Path, name: str, arr: np.ndarray) -> dict:
    rel = f"tensors/{name}.bin"
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    (path / rel).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return {"file": rel, "shape": list(arr.shape)}


def _read_tensor(root: Path, meta: dict) -> np.ndarray:
    try:
        shape = tuple(int(d) for d in meta["shape"])
        blob = (root / meta["file"]).read_bytes()
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed tensor entry {meta!r}: {exc}") from None
    except OSError as exc:
        raise ModelError(f"cannot read tensor: {exc}") from None
    expected = math.prod(shape) * 4
    if len(blob) != expected:
        raise ModelError(f"tensor length mismatch for {meta['file']}: {len(blob)} bytes, expected {expected}")
    return np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float64)


def save_model(model: ModelGraph, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, layer in enumerate(model.layers):
        entry = {
            "kind": layer.kind,
            "channels": list(layer.channels),
            "kernel": list(layer.kernel),
            "stride": list(layer.stride),
            "padding": layer.padding,
            "decomposable": layer.decomposable,
            "name": layer.name,
        }
        if layer.source is not None:
            entry["source"] = layer.source
        if layer.weights is not None:
            entry["weights"] = _tensor_meta(path, f"layer{i:03d}_weights", layer.weights)
        if layer.bias is not None:
            entry["bias"] = _tensor_meta(path, f"layer{i:03d}_bias", layer.bias)
        layers.append(entry)
    manifest = {
        "format": MODEL_FORMAT,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "layers": layers,
    }
    (path / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(path) -> ModelGraph:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest").read_text())
    except OSError as exc:
        raise ModelError(f"cannot read manifest: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ModelError(f"malformed manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != MODEL_FORMAT:
        raise ModelError(f"malformed manifest: expected format {MODEL_FORMAT!r}")
    try:
        layers = []
        for entry in manifest["layers"]:
            layers.append(LayerSpec(
                kind=entry["kind"],
                channels=tuple(entry["channels"]),
                kernel=tuple(entry.get("kernel", (1, 1))),
                stride=tuple(entry.get("stride", (1, 1))),
                padding=entry.get("padding", "valid"),
                weights=_read_tensor(root, entry["weights"]) if "weights" in entry else None,
                bias=_read_tensor(root, entry["bias"]) if "bias" in entry else None,
                decomposable=bool(entry.get("decomposable", False)),
                source=entry.get("source"),
                name=entry.get("name", ""),
            ))
        return ModelGraph(manifest["name"], tuple(manifest["input_shape"]), tuple(layers))
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed manifest: missing or invalid field {exc}") from None


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray          # (count, H, W, C)
    labels: np.ndarray          # (count,)
    num_classes: int
    split_fraction_search: float = 0.10

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        if inputs.ndim != 4 or labels.shape != (inputs.shape[0],):
            raise ModelError("dataset inputs must be (count, H, W, C) with one label per sample")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ModelError("dataset label out of range")
        if not 0.0 < self.split_fraction_search <= 1.0:
            raise ModelError("split_fraction_search must lie in (0, 1]")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def search_count(self) -> int:
        return int(math.floor(self.split_fraction_search * len(self)))

    def subset(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        cut = self.search_count
        if which == "search":
            sl = slice(0, cut)
        elif which == "final":
            sl = slice(cut, None)
        elif which == "all":
            sl = slice(None)
        else:
            raise ValueError(f"unknown subset {which!r}")
        return self.inputs[sl], self.labels[sl]

    def check_against(self, model: ModelGraph) -> None:
        if tuple(self.inputs.shape[1:]) != model.input_shape:
            raise ModelError(f"dataset input shape {self.inputs.shape[1:]} != model {model.input_shape}")
        if self.num_classes > model.num_classes:
            raise ModelError("dataset has more classes than the model outputs")


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "data.bin").write_bytes(np.ascontiguousarray(ds.inputs, dtype="<f4").tobytes())
    (path / "labels.bin").write_bytes(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    manifest = {
        "format": DATASET_FORMAT,
        "count": len(ds),
        "input_shape": list(ds.inputs.shape[1:]),
        "num_classes": ds.num_classes,
        "split_fraction_search": ds.split_fraction_search,
    }
    (path / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest").read_text())
        count = int(manifest["count"])
        shape = tuple(int(d) for d in manifest["input_shape"])
        data = (root / "data.bin").read_bytes()
        labels = (root / "labels.bin").read_bytes()
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed dataset: {exc}") from None
    if len(data) != count * math.prod(shape) * 4 or len(labels) != count * 4:
        raise ModelError("tensor length mismatch in dataset")
    return Dataset(
        np.frombuffer(data, dtype="<f4").reshape((count,) + shape),
        np.frombuffer(labels, dtype="<u4"),
        int(manifest["num_classes"]),
        float(manifest.get("split_fraction_search", 0.10)),
    )


# --- cost calibration ------------------------------------------------------

def read_kv(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ModelError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lower().replace(" ", "")] = value
    return out


def _log2_ceil(v: int) -> int:
    return max(0, math.ceil(math.log2(v))) if v > 0 else 0


# basis functions the per-primitive coefficient tables scale
_BASIS: dict[str, Callable[[int, int], float]] = {
    "r_mul": lambda z, bw: bw * _log2_ceil(z + 1),
    "r_mux": lambda fan_in, bw: bw * math.ceil(fan_in / 2),
    "r_add": lambda n, bw: (n - 1) * bw,
}

_POINT_KEY = re.compile(r"^(r_mul|r_mux|r_add)\((\d+),(\d+)\)$")


@dataclass(frozen=True)
class CostCalibration:
    """Per-primitive LUT costs and device budget.

    Each primitive cost is ``const + coef * basis(arg, bw)``; ``points`` holds
    measured overrides keyed by ``(primitive, arg, bw)``.
    """
    lut_max: int = 63400
    bram_bits_per_block: int = 72     # summed port width of one BRAM
    out_bw: int = 32
    activation_bw: int = 8
    mac_pe_luts: int = 110            # 8-bit MAC PE of the baseline array
    coefficients: dict = field(default_factory=lambda: {k: (0.0, 1.0) for k in _BASIS})
    points: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lut_max", "bram_bits_per_block", "out_bw", "activation_bw", "mac_pe_luts"):
            if int(getattr(self, name)) <= 0:
                raise ModelError(f"calibration {name} must be positive")
        for prim, (const, coef) in self.coefficients.items():
            if const < 0 or coef < 0 or const + coef <= 0:
                raise ModelError(f"calibration {prim}: coefficients must be non-negative and not both zero")
        for key, v in self.points.items():
            if v <= 0:
                raise ModelError(f"calibration {key[0]}({key[1]},{key[2]}) must be positive, got {v}")

    def _cost(self, prim: str, arg: int, bw: int) -> int:
        if (prim, arg, bw) in self.points:
            return int(self.points[(prim, arg, bw)])
        const, coef = self.coefficients[prim]
        return int(math.ceil(const + coef * _BASIS[prim](arg, bw)))

    def r_mul(self, shifts: int, bw: int) -> int:
        return self._cost("r_mul", shifts, bw)

    def r_mux(self, fan_in: int, bw: int) -> int:
        return self._cost("r_mux", fan_in, bw)

    def r_add(self, operands: int, bw: int) -> int:
        return self._cost("r_add", operands, bw)


def constant_calibration(r_mul: int, r_mux: int, r_add: int, **kw) -> CostCalibration:
    """Calibration whose primitive costs ignore their arguments."""
    return CostCalibration(
        coefficients={"r_mul": (float(r_mul), 0.0), "r_mux": (float(r_mux), 0.0), "r_add": (float(r_add), 0.0)},
        **kw)


_SCALAR_KEYS = {
    "lut_max": "lut_max", "b_ports": "bram_bits_per_block", "bram_bits_per_block": "bram_bits_per_block",
    "out_bw": "out_bw", "activation_bw": "activation_bw", "mac_pe_luts": "mac_pe_luts",
}


def load_calibration(path) -> CostCalibration:
    kv = read_kv(path)
    kwargs: dict = {}
    coeffs = {k: (0.0, 1.0) for k in _BASIS}
    points = {}
    for key, value in kv.items():
        try:
            if key in _SCALAR_KEYS:
                if not value:
                    raise ModelError("missing LUT_max" if key == "lut_max" else f"calibration {key} has no value")
                kwargs[_SCALAR_KEYS[key]] = int(value)
            elif key in _BASIS:
                const, coef = (float(v) for v in value.split(","))
                coeffs[key] = (const, coef)
            elif m := _POINT_KEY.match(key):
                points[(m.group(1), int(m.group(2)), int(m.group(3)))] = float(value)
            else:
                raise ModelError(f"unknown calibration key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ModelError):
                raise
            raise ModelError(f"calibration {key}: cannot parse {value!r}") from None
    return CostCalibration(coefficients=coeffs, points=points, **kwargs)


def save_calibration(cal: CostCalibration, path) -> None:
    lines = [
        f"lut_max = {cal.lut_max}",
        f"b_ports = {cal.bram_bits_per_block}",
        f"out_bw = {cal.out_bw}",
        f"activation_bw = {cal.activation_bw}",
        f"mac_pe_luts = {cal.mac_pe_luts}",
    ]
    for prim in sorted(cal.coefficients):
        const, coef = cal.coefficients[prim]
        lines.append(f"{prim} = {const!r}, {coef!r}")
    for (prim, arg, bw), v in sorted(cal.points.items()):
        lines.append(f"{prim}({arg},{bw}) = {v!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def with_calibration(cal: CostCalibration, **changes) -> CostCalibration:
    return replace(cal, **changes)
