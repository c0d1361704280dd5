"""Approximate weight-matrix decomposition into power-of-two stage matrices.

A weight slice ``W_s`` (M x S_W, entries in [-1, 1]) is approximated by a
product of sparse stage matrices ``F_P ... F_1 G_0`` where ``G_0 = [I; 0]``
and every nonzero is ``+-2**-z`` with ``z`` in ``0..Z-1``. Stages are built
greedily row by row (matching pursuit over the rows of the current product).

Stage matrices are kept as term lists ``(row, col, exp, sign)``. In generic
stages one term per row is the fixed ``+1`` diagonal, and several terms may
address the same column (each shift unit has its own input mux), which is how
a row that should stay unchanged is filled with terms that cancel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .store import LayerSpec, ModelError, same_pad, spatial_out

INT32_MIN = -(2 ** 31)
INT32_MAX = 2 ** 31 - 1
WMD_FORMAT = "po2forge-wmd/1"


class AccumulatorOverflow(ArithmeticError):
    pass


@dataclass(frozen=True)
class WmdConfig:
    """Decomposition parameters ``{P, Z, E, M, S_W}``."""
    stages: int        # P
    shifts: int        # Z, exponents 0..Z-1
    nonzeros: int      # E, terms per row of a generic stage
    rows: int          # M
    slice_width: int   # S_W

    def __post_init__(self):
        for name in ("stages", "shifts", "nonzeros", "rows", "slice_width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"WmdConfig.{name} must be a positive integer")
        if self.nonzeros < 2:
            raise ValueError("WmdConfig.nonzeros must be >= 2")
        if self.slice_width > self.rows:
            raise ValueError("WmdConfig requires slice_width <= rows")
        if self.nonzeros > self.rows:
            raise ValueError("WmdConfig requires nonzeros <= rows")

    @classmethod
    def parse(cls, text: str) -> "WmdConfig":
        """Parse ``"P,Z,E,M,SW"``."""
        try:
            p, z, e, m, sw = (int(v) for v in text.split(","))
        except ValueError:
            raise ValueError(f"expected P,Z,E,M,SW, got {text!r}") from None
        return cls(p, z, e, m, sw)

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.stages, self.shifts, self.nonzeros, self.rows, self.slice_width)

    def with_stages(self, p: int) -> "WmdConfig":
        return replace(self, stages=p)


@dataclass(frozen=True, eq=False)
class StageMatrix:
    index: int            # 1-based stage number
    rows: int
    cols: int
    terms: np.ndarray     # (T, 4) int64: row, col, exp, sign
    diagonal_fixed: bool

    def __post_init__(self):
        t = np.asarray(self.terms, dtype=np.int64).reshape(-1, 4)
        t = t[np.lexsort(t.T[::-1])] if len(t) else t
        t.setflags(write=False)
        object.__setattr__(self, "terms", t)

    def __eq__(self, other):
        return (isinstance(other, StageMatrix) and self.index == other.index
                and self.rows == other.rows and self.cols == other.cols
                and self.diagonal_fixed == other.diagonal_fixed
                and np.array_equal(self.terms, other.terms))

    def coefficients(self) -> np.ndarray:
        return np.ldexp(self.terms[:, 3].astype(np.float64), -self.terms[:, 2])

    def dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        np.add.at(out, (self.terms[:, 0], self.terms[:, 1]), self.coefficients())
        return out

    def row_terms(self, r: int) -> np.ndarray:
        return self.terms[self.terms[:, 0] == r]

    def check(self, cfg: WmdConfig) -> None:
        """Raise ``ValueError`` unless the hardware constraints hold."""
        t = self.terms
        if len(t) and ((t[:, 2] < 0).any() or (t[:, 2] >= cfg.shifts).any()):
            raise ValueError(f"stage {self.index}: exponent outside 0..{cfg.shifts - 1}")
        if len(t) and not np.isin(t[:, 3], (-1, 1)).all():
            raise ValueError(f"stage {self.index}: sign must be +-1")
        counts = np.bincount(t[:, 0], minlength=self.rows) if len(t) else np.zeros(self.rows, int)
        if self.index == 1:
            if self.cols != cfg.slice_width or (len(t) and t[:, 1].max() >= cfg.slice_width):
                raise ValueError("first stage may only address the first S_W columns")
            for r in range(self.rows):
                cols = self.row_terms(r)[:, 1]
                if len(cols) != len(set(cols.tolist())):
                    raise ValueError("first stage uses one shift unit per column")
            if (counts > cfg.slice_width).any():
                raise ValueError("first stage row exceeds S_W nonzeros")
        else:
            if self.cols != self.rows:
                raise ValueError("generic stage must be square")
            if (counts != cfg.nonzeros).any():
                raise ValueError(f"stage {self.index}: each row needs exactly E={cfg.nonzeros} terms")
            if self.diagonal_fixed:
                for r in range(self.rows):
                    rt = self.row_terms(r)
                    if not ((rt[:, 1] == r) & (rt[:, 2] == 0) & (rt[:, 3] == 1)).any():
                        raise ValueError(f"stage {self.index}: row {r} lacks the fixed diagonal")


@dataclass(frozen=True)
class SliceFit:
    stages: tuple[StageMatrix, ...]
    residuals: tuple[float, ...]     # ||W_s - G_p||_F after each stage

    @property
    def residual_norm(self) -> float:
        return self.residuals[-1]

    def truncate(self, p: int) -> "SliceFit":
        return SliceFit(self.stages[:p], self.residuals[:p])


# --- greedy decomposition --------------------------------------------------

def _codebook(shifts: int) -> np.ndarray:
    """Coefficient grid of shape (Z, 2): [z, 0] = +2**-z, [z, 1] = -2**-z."""
    mags = np.ldexp(1.0, -np.arange(shifts))
    return np.stack([mags, -mags], axis=1)


def _row_sq(d: np.ndarray) -> float:
    return float(np.dot(d, d))


def _coef_row(terms: list[tuple[int, int, int]], size: int) -> np.ndarray:
    coef = np.zeros(size)
    for j, z, s in terms:
        coef[j] += s * math.ldexp(1.0, -z)
    return coef


def _first_stage(target: np.ndarray, shifts: int):
    m_rows, sw = target.shape
    book = _codebook(shifts)
    terms, rows = [], np.zeros_like(target)
    for m in range(m_rows):
        r = target[m].copy()
        used = np.zeros(sw, dtype=bool)
        coef = np.zeros(sw)
        for _ in range(sw):
            # ||r - c e_j||^2 - ||r||^2 = (r_j - c)^2 - r_j^2
            gain = (r[:, None, None] - book[None]) ** 2 - (r ** 2)[:, None, None]
            gain[used] = np.inf
            j, z, si = np.unravel_index(np.argmin(gain), gain.shape)
            if not gain[j, z, si] < 0:
                break
            c = book[z, si]
            coef[j] = c
            r[j] -= c
            used[j] = True
            terms.append((m, j, z, 1 if si == 0 else -1))
        rows[m] = coef
    return terms, rows


def _neutral_fill(n: int, m: int, zero_rows: list[int], shifts: int):
    """``n`` terms whose contributions sum to zero, or None if impossible."""
    if n == 0:
        return []
    if zero_rows:
        return [(zero_rows[0], 0, 1)] * n
    pair = [(m, shifts - 1, 1), (m, shifts - 1, -1)]
    if n % 2 == 0:
        return pair * (n // 2)
    if n >= 3 and shifts >= 2:
        return [(m, 1, 1), (m, 1, 1), (m, 0, -1)] + pair * ((n - 3) // 2)
    return None


def _generic_stage(target: np.ndarray, prev: np.ndarray, row_sq: list[float], shifts: int, e: int):
    m_rows = target.shape[0]
    book = _codebook(shifts)
    zero_rows = [j for j in range(m_rows) if not prev[j].any()]
    k = e - 1
    terms, rows, new_sq = [], np.empty_like(prev), []
    for m in range(m_rows):
        r = target[m] - prev[m]
        chosen: list[tuple[int, int, int]] = []
        for _ in range(k):
            cand = r[None, None, None, :] - book[None, :, :, None] * prev[:, None, None, :]
            sq = np.einsum("jzsk,jzsk->jzs", cand, cand)
            j, z, si = np.unravel_index(np.argmin(sq), sq.shape)
            if not sq[j, z, si] < _row_sq(r):
                break
            chosen.append((int(j), int(z), 1 if si == 0 else -1))
            r = cand[j, z, si]
        fill = _neutral_fill(k - len(chosen), m, zero_rows, shifts)
        if fill is None and chosen:
            # give back the weakest gain to restore a neutral-fillable parity
            fill = _neutral_fill(k - len(chosen) + 1, m, zero_rows, shifts)
            if fill is not None:
                chosen = chosen[:-1]
        if fill is None:
            # single free slot with no cancelling option: take the least-bad term
            fill = (_neutral_fill(k - len(chosen) - 1, m, zero_rows, shifts) or [])
            r = target[m] - prev[m]
            for j, z, s in chosen:
                r = r - s * math.ldexp(1.0, -z) * prev[j]
            cand = r[None, None, None, :] - book[None, :, :, None] * prev[:, None, None, :]
            sq = np.einsum("jzsk,jzsk->jzs", cand, cand)
            j, z, si = np.unravel_index(np.argmin(sq), sq.shape)
            fill = fill + [(int(j), int(z), 1 if si == 0 else -1)]
        row_terms = [(m, 0, 1)] + chosen + fill
        coef = _coef_row(row_terms, m_rows)
        row = np.dot(coef, prev)
        sq = _row_sq(target[m] - row)
        neutral = _neutral_fill(k, m, zero_rows, shifts)
        if sq > row_sq[m] and neutral is not None:
            row_terms = [(m, 0, 1)] + neutral
            row = np.dot(_coef_row(row_terms, m_rows), prev)
            sq = _row_sq(target[m] - row)
        rows[m] = row
        new_sq.append(sq)
        terms.extend((m, j, z, s) for j, z, s in row_terms)
    return terms, rows, new_sq


def decompose_slice(target: np.ndarray, cfg: WmdConfig) -> SliceFit:
    """Greedy Po2 decomposition of one normalized ``M x S_W`` slice."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (cfg.rows, cfg.slice_width):
        raise ValueError(f"slice shape {target.shape} != ({cfg.rows}, {cfg.slice_width})")
    if target.size and np.abs(target).max() > 1.0 + 1e-12:
        raise ValueError("slice entries must be normalized to [-1, 1]")
    terms, rows = _first_stage(target, cfg.shifts)
    stages = [StageMatrix(1, cfg.rows, cfg.slice_width, terms, diagonal_fixed=False)]
    row_sq = [_row_sq(target[m] - rows[m]) for m in range(cfg.rows)]
    residuals = [math.sqrt(math.fsum(row_sq))]
    for p in range(2, cfg.stages + 1):
        terms, rows, row_sq = _generic_stage(target, rows, row_sq, cfg.shifts, cfg.nonzeros)
        stages.append(StageMatrix(p, cfg.rows, cfg.rows, terms, diagonal_fixed=True))
        residuals.append(math.sqrt(math.fsum(row_sq)))
    return SliceFit(tuple(stages), tuple(residuals))


def stage_product(stages, slice_width: int) -> np.ndarray:
    """``G_P = F_P ... F_1 G_0`` with the same row arithmetic the decomposer uses."""
    first = stages[0]
    g = np.zeros((first.rows, slice_width))
    for r, c, z, s in first.terms:
        g[r, c] = s * math.ldexp(1.0, -int(z))
    for st in stages[1:]:
        nxt = np.empty_like(g)
        for m in range(st.rows):
            rt = st.row_terms(m)
            nxt[m] = np.dot(_coef_row([(int(j), int(z), int(s)) for _, j, z, s in rt], st.cols), g)
        g = nxt
    return g


# --- matrix views of a layer -----------------------------------------------

MODES = ("accelerator", "conv")


def weight_to_mn(weights: np.ndarray, kind: str, mode: str = "accelerator") -> np.ndarray:
    """Flatten a conv/dense weight tensor into the ``M_total x N`` matrix.

    ``accelerator``: N = C_in, rows enumerate (kernel position, C_out).
    ``conv``: N = K_x*K_y, rows enumerate (C_out, C_in).
    """
    w = np.asarray(weights, dtype=np.float64)
    if kind == "dense":
        w = w.reshape(1, 1, *w.shape)
    elif kind not in ("conv2d", "pointwise_conv2d"):
        raise ValueError(f"{kind} layers are not decomposable")
    kx, ky, c_in, c_out = w.shape
    if mode == "accelerator":
        return w.transpose(0, 1, 3, 2).reshape(kx * ky * c_out, c_in)
    if mode == "conv":
        return w.transpose(3, 2, 0, 1).reshape(c_out * c_in, kx * ky)
    raise ValueError(f"unknown mode {mode!r}")


def mn_to_weight(mat: np.ndarray, kind: str, weight_shape, mode: str = "accelerator") -> np.ndarray:
    shape = tuple(weight_shape)
    kx, ky, c_in, c_out = (1, 1, *shape) if kind == "dense" else shape
    mat = np.asarray(mat, dtype=np.float64)
    if mode == "accelerator":
        if mat.shape != (kx * ky * c_out, c_in):
            raise ValueError(f"matrix shape {mat.shape} does not match {shape}")
        w = mat.reshape(kx, ky, c_out, c_in).transpose(0, 1, 3, 2)
    elif mode == "conv":
        if mat.shape != (c_out * c_in, kx * ky):
            raise ValueError(f"matrix shape {mat.shape} does not match {shape}")
        w = mat.reshape(c_out, c_in, kx, ky).transpose(2, 3, 1, 0)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return w.reshape(shape).copy()


def group_rows_for(layer: LayerSpec, mode: str) -> int:
    """Rows per independently blocked group: C_out per kernel position in accelerator mode."""
    c_in, c_out = layer.channels
    if mode == "accelerator":
        return c_out
    kx, ky = layer.kernel
    return c_out * c_in


def slice_matrix(mat: np.ndarray, slice_width: int, rows: int) -> list[list[np.ndarray]]:
    """Split into zero-padded ``rows x slice_width`` tiles, indexed [row_block][slice]."""
    mat = np.asarray(mat, dtype=np.float64)
    m_total, n = mat.shape
    nb, ns = -(-m_total // rows), -(-n // slice_width)
    padded = np.zeros((nb * rows, ns * slice_width))
    padded[:m_total, :n] = mat
    return [[padded[b * rows:(b + 1) * rows, s * slice_width:(s + 1) * slice_width].copy()
             for s in range(ns)] for b in range(nb)]


@dataclass(frozen=True)
class DecomposedLayer:
    config: WmdConfig
    scale: float
    layer_index: int
    mode: str
    shape: tuple[int, int]               # (M_total, N)
    group_rows: int
    blocks: tuple[tuple[int, int], ...]  # (row offset, valid rows) per row block
    tiles: tuple[tuple[SliceFit, ...], ...]  # [block][slice]

    @property
    def num_slices(self) -> int:
        return -(-self.shape[1] // self.config.slice_width)

    @property
    def num_groups(self) -> int:
        return self.shape[0] // self.group_rows

    @property
    def row_blocks(self) -> int:
        return len(self.blocks)

    @property
    def blocks_per_group(self) -> int:
        return -(-self.group_rows // self.config.rows)

    @property
    def residual_norm(self) -> float:
        """Frobenius error ``||W - W_hat||_F`` in original weight units."""
        return self.scale * math.sqrt(math.fsum(t.residual_norm ** 2 for row in self.tiles for t in row))

    def stages(self, block: int, slc: int) -> tuple[StageMatrix, ...]:
        return self.tiles[block][slc].stages

    def truncate(self, p: int) -> "DecomposedLayer":
        if not 1 <= p <= self.config.stages:
            raise ValueError(f"cannot truncate {self.config.stages} stages to {p}")
        tiles = tuple(tuple(t.truncate(p) for t in row) for row in self.tiles)
        return replace(self, config=self.config.with_stages(p), tiles=tiles)


def _layer_blocks(m_total: int, group_rows: int, rows: int) -> list[tuple[int, int]]:
    blocks = []
    for g0 in range(0, m_total, group_rows):
        for off in range(0, group_rows, rows):
            blocks.append((g0 + off, min(rows, group_rows - off)))
    return blocks


def decompose_layer(layer: LayerSpec, cfg: WmdConfig, mode: str = "accelerator",
                    layer_index: int = 0) -> DecomposedLayer:
    if layer.kind not in ("conv2d", "pointwise_conv2d", "dense"):
        raise ValueError(f"{layer.kind} layers are not decomposable")
    mat = weight_to_mn(layer.weights, layer.kind, mode)
    peak = float(np.abs(mat).max()) if mat.size else 0.0
    scale = peak if peak > 0 else 1.0
    norm = mat / scale
    group_rows = group_rows_for(layer, mode)
    blocks = _layer_blocks(mat.shape[0], group_rows, cfg.rows)
    tiles = []
    for off, valid in blocks:
        strip = np.zeros((cfg.rows, mat.shape[1]))
        strip[:valid] = norm[off:off + valid]
        tiles.append(tuple(decompose_slice(t, cfg) for t in slice_matrix(strip, cfg.slice_width, cfg.rows)[0]))
    return DecomposedLayer(cfg, scale, layer_index, mode, mat.shape, group_rows, tuple(blocks), tuple(tiles))


def reconstruct(dl: DecomposedLayer) -> np.ndarray:
    """Approximate ``M_total x N`` weight matrix ``scale * [G_P per tile]``."""
    m_total, n = dl.shape
    sw = dl.config.slice_width
    out = np.zeros((m_total, dl.num_slices * sw))
    for (off, valid), row in zip(dl.blocks, dl.tiles):
        for s, fit in enumerate(row):
            out[off:off + valid, s * sw:(s + 1) * sw] = stage_product(fit.stages, sw)[:valid]
    return dl.scale * out[:, :n]


def reconstruct_weights(dl: DecomposedLayer, layer: LayerSpec) -> np.ndarray:
    return mn_to_weight(reconstruct(dl), layer.kind, layer.weight_shape, dl.mode)


# --- applying a decomposition to activations --------------------------------

def _check_i32(v: np.ndarray, what: str) -> None:
    if v.size and (v.min() < INT32_MIN or v.max() > INT32_MAX):
        raise AccumulatorOverflow(f"{what} exceeds the 32-bit accumulator")


def apply_stage(stage: StageMatrix, v: np.ndarray, arithmetic: str = "integer") -> np.ndarray:
    t = stage.terms
    if arithmetic == "integer":
        out = np.zeros(stage.rows, dtype=np.int64)
        # numpy >> on signed ints is an arithmetic (floor) shift
        np.add.at(out, t[:, 0], t[:, 3] * (v[t[:, 1]] >> t[:, 2]))
        _check_i32(out, f"stage {stage.index} output")
        return out
    return stage.dense() @ v


def apply_decomposed(dl: DecomposedLayer, x, arithmetic: str = "integer") -> np.ndarray:
    """Shift-and-add product of the normalized decomposition with ``x``.

    ``x`` is either one length-N vector shared by all rows (result length
    M_total) or one vector per group, shape (groups, N), giving a
    (groups, group_rows) result. The layer ``scale`` is not applied.
    """
    if arithmetic not in ("integer", "real"):
        raise ValueError(f"unknown arithmetic {arithmetic!r}")
    dtype = np.int64 if arithmetic == "integer" else np.float64
    x = np.asarray(x)
    if arithmetic == "integer":
        if not np.issubdtype(x.dtype, np.integer):
            raise ValueError("integer arithmetic needs integer inputs")
        x = x.astype(np.int64)
        _check_i32(x, "input")
    else:
        x = x.astype(np.float64)
    per_group = x.ndim == 2
    n = dl.shape[1]
    if x.shape[-1] != n or (per_group and x.shape[0] != dl.num_groups):
        raise ValueError(f"input shape {x.shape} incompatible with layer matrix {dl.shape}")
    sw = dl.config.slice_width
    padded = np.zeros(x.shape[:-1] + (dl.num_slices * sw,), dtype=dtype)
    padded[..., :n] = x
    out = np.zeros(dl.shape[0], dtype=dtype)
    for (off, valid), row in zip(dl.blocks, dl.tiles):
        vec = padded[off // dl.group_rows] if per_group else padded
        acc = np.zeros(dl.config.rows, dtype=dtype)
        for s, fit in enumerate(row):
            v = vec[s * sw:(s + 1) * sw]
            for st in fit.stages:
                v = apply_stage(st, v, arithmetic)
            acc = acc + v
            if arithmetic == "integer":
                _check_i32(acc, "slice accumulation")
        out[off:off + valid] = acc[:valid]
    if per_group:
        return out.reshape(dl.num_groups, dl.group_rows)
    return out


def conv_patches(x: np.ndarray, layer: LayerSpec):
    """Zero-padded input and per-output-pixel patch origins for a conv layer."""
    kx, ky = layer.kernel
    sx, sy = layer.stride
    h, w, _ = x.shape
    oh, ow = spatial_out(h, kx, sx, layer.padding), spatial_out(w, ky, sy, layer.padding)
    if layer.padding == "same":
        (pt, pb), (pl, pr) = same_pad(h, kx, sx), same_pad(w, ky, sy)
    else:
        pt = pb = pl = pr = 0
    xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    return xp, oh, ow


def decomposed_conv_reference(layer: LayerSpec, dl: DecomposedLayer, x: np.ndarray) -> np.ndarray:
    """Integer layer output computed pixel by pixel through ``apply_decomposed``."""
    if dl.mode != "accelerator":
        raise ValueError("the accelerator reference needs an accelerator-mode decomposition")
    x = np.asarray(x, dtype=np.int64)
    if layer.kind == "dense":
        return apply_decomposed(dl, x.reshape(1, -1)).reshape(1, 1, -1)
    xp, oh, ow = conv_patches(x, layer)
    kx, ky = layer.kernel
    sx, sy = layer.stride
    out = np.zeros((oh, ow, layer.channels[1]), dtype=np.int64)
    for oy in range(oh):
        for ox in range(ow):
            patch = xp[oy * sx:oy * sx + kx, ox * sy:ox * sy + ky, :].reshape(kx * ky, -1)
            partial = apply_decomposed(dl, patch)
            acc = partial.sum(axis=0)
            _check_i32(acc, "kernel accumulation")
            out[oy, ox] = acc
    return out


# --- serialization -----------------------------------------------------------

def dump_decomposed(dl: DecomposedLayer, header: str = "") -> str:
    cfg = dl.config
    lines = [header.rstrip("\n")] if header else []
    lines += [
        f"format {WMD_FORMAT}",
        f"layer_index {dl.layer_index}",
        f"mode {dl.mode}",
        "config " + " ".join(str(v) for v in cfg.as_tuple()),
        f"scale {dl.scale.hex()}",
        f"shape {dl.shape[0]} {dl.shape[1]}",
        f"group_rows {dl.group_rows}",
        f"tiles {len(dl.blocks)} {dl.num_slices}",
    ]
    for b, ((off, valid), row) in enumerate(zip(dl.blocks, dl.tiles)):
        for s, fit in enumerate(row):
            lines.append(f"tile {b} {s} {off} {valid} " + " ".join(r.hex() for r in fit.residuals))
            for st in fit.stages:
                lines.append(f"stage {st.index} {st.rows} {st.cols} {int(st.diagonal_fixed)} {len(st.terms)}")
                lines.extend(f"{r} {c} {z} {sg}" for r, c, z, sg in st.terms.tolist())
    return "\n".join(lines) + "\n"


def parse_decomposed(text: str) -> DecomposedLayer:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    it = iter(lines)

    def field(name):
        parts = next(it).split()
        if parts[0] != name:
            raise ModelError(f"expected {name!r}, got {parts[0]!r}")
        return parts[1:]

    try:
        if field("format") != [WMD_FORMAT]:
            raise ModelError("unsupported decomposition format")
        layer_index = int(field("layer_index")[0])
        mode = field("mode")[0]
        cfg = WmdConfig(*(int(v) for v in field("config")))
        scale = float.fromhex(field("scale")[0])
        shape = tuple(int(v) for v in field("shape"))
        group_rows = int(field("group_rows")[0])
        nb, ns = (int(v) for v in field("tiles"))
        blocks, tiles = [], []
        for b in range(nb):
            row = []
            for s in range(ns):
                head = field("tile")
                if (int(head[0]), int(head[1])) != (b, s):
                    raise ModelError("tiles out of canonical order")
                if s == 0:
                    blocks.append((int(head[2]), int(head[3])))
                residuals = tuple(float.fromhex(v) for v in head[4:])
                stages = []
                for _ in residuals:
                    idx, rows, cols, diag, count = (int(v) for v in field("stage"))
                    terms = [[int(v) for v in next(it).split()] for _ in range(count)]
                    stages.append(StageMatrix(idx, rows, cols, np.array(terms, dtype=np.int64).reshape(-1, 4),
                                              bool(diag)))
                row.append(SliceFit(tuple(stages), residuals))
            tiles.append(tuple(row))
    except (StopIteration, ValueError, IndexError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"malformed decomposition: {exc}") from None
    return DecomposedLayer(cfg, scale, layer_index, mode, shape, group_rows, tuple(blocks), tuple(tiles))


def save_decomposed(dl: DecomposedLayer, path, header: str = "") -> None:
    Path(path).write_text(dump_decomposed(dl, header))


def load_decomposed(path) -> DecomposedLayer:
    return parse_decomposed(Path(path).read_text())
