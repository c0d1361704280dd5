"""Constrained two-objective NSGA-II over decomposition configurations.

A genome is ``[idx_Z, idx_E, idx_M, idx_SW, idx_P_1, ..., idx_P_L]``: indices
into the choice lists of a :class:`DesignSpace`. Objectives are the top-1
accuracy drop (percentage points) and the accelerator cycle count, both
minimized, subject to ``drop <= ad_max`` and ``cycles <= lat_std``.
"""
from __future__ import annotations

import itertools
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .hw import HardParams, InfeasibleError, baseline_mapping, latency_accl, map_pes, pe_unit_luts
from .infer import EvalResult, evaluate_accuracy, substitute_decomposed
from .store import CostCalibration, Dataset, ModelGraph, read_kv
from .wmd import DecomposedLayer, WmdConfig, decompose_layer

log = logging.getLogger(__name__)

HARD_GENES = ("shifts", "nonzeros", "rows", "slice_widths")
INVALID_VIOLATION = 1e6


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


@dataclass(frozen=True)
class DesignSpace:
    shifts: tuple[int, ...] = (1, 2, 3)
    nonzeros: tuple[int, ...] = (2, 3, 4)
    rows: tuple[int, ...] = (4, 8)
    slice_widths: tuple[int, ...] = (1, 2, 4)
    stages: tuple[int, ...] = (1, 2)
    layers: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "layers":
                if v < 1:
                    raise ValueError("design space needs at least one layer")
            else:
                object.__setattr__(self, f.name, tuple(int(x) for x in v))
                if not getattr(self, f.name) or min(getattr(self, f.name)) < 1:
                    raise ValueError(f"{f.name} must be a non-empty list of positive integers")

    @property
    def gene_sizes(self) -> tuple[int, ...]:
        hard = tuple(len(getattr(self, g)) for g in HARD_GENES)
        return hard + (len(self.stages),) * self.layers

    def decode(self, genes: Sequence[int]) -> tuple[tuple[int, int, int, int], tuple[int, ...]]:
        """``((Z, E, M, S_W), (P_1, ..., P_L))`` for a genome."""
        if len(genes) != len(self.gene_sizes) or any(not 0 <= g < n for g, n in zip(genes, self.gene_sizes)):
            raise ValueError(f"genome {tuple(genes)} outside space with gene sizes {self.gene_sizes}")
        hard = tuple(getattr(self, name)[g] for name, g in zip(HARD_GENES, genes[:4]))
        return hard, tuple(self.stages[g] for g in genes[4:])

    def genomes(self):
        """Every genome in lexicographic order."""
        return itertools.product(*(range(n) for n in self.gene_sizes))

    @classmethod
    def load(cls, path, layers: int | None = None) -> "DesignSpace":
        kv = read_kv(path)
        kw = {k: _ints(kv[k]) for k in ("shifts", "nonzeros", "rows", "slice_widths", "stages") if k in kv}
        if "layers" in kv:
            kw["layers"] = int(kv["layers"])
        if layers is not None:
            kw["layers"] = layers
        unknown = set(kv) - {"shifts", "nonzeros", "rows", "slice_widths", "stages", "layers"}
        if unknown:
            raise ValueError(f"unknown design-space keys: {sorted(unknown)}")
        return cls(**kw)


def design_space_size(space: DesignSpace) -> int:
    hard = math.prod(len(getattr(space, g)) for g in HARD_GENES)
    return len(space.stages) ** space.layers * hard


@dataclass(frozen=True)
class GAParams:
    population: int = 250
    generations: int = 20
    crossover_prob: float = 0.9
    swap_prob: float = 0.5
    eta_c: float = 15.0      # kept for configuration parity; uniform crossover ignores it
    eta_m: float = 5.0
    mutation_prob: float | None = None   # per gene; None means 1 / genome length
    stall_generations: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.population < 2 or self.generations < 0:
            raise ValueError("population must be >= 2 and generations >= 0")
        for name in ("crossover_prob", "swap_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def load(cls, path, **overrides) -> "GAParams":
        kv = read_kv(path)
        kw = {}
        for f in fields(cls):
            if f.name in kv:
                raw = kv[f.name]
                kw[f.name] = int(raw) if f.name in ("population", "generations", "stall_generations", "seed") \
                    else float(raw)
        unknown = set(kv) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown GA keys: {sorted(unknown)}")
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


@dataclass(frozen=True)
class ParetoPoint:
    genes: tuple[int, ...]
    hard: tuple[int, int, int, int]      # (Z, E, M, S_W)
    stages: tuple[int, ...]              # P per targeted layer
    accuracy_drop: float
    cycles: int
    speedup: float
    mapping: tuple[int, int]
    feasible: bool
    violation: float = 0.0

    @property
    def objectives(self) -> tuple[float, int]:
        return (self.accuracy_drop, self.cycles)


class SearchContext:
    """Everything a fitness evaluation needs, plus its caches."""

    def __init__(self, model: ModelGraph, dataset: Dataset, calibration: CostCalibration,
                 space: DesignSpace | None = None, layers: Sequence[int] | None = None,
                 ad_max: float = 2.0, lat_std: int | None = None, subset: str = "search",
                 mode: str = "accelerator"):
        self.model = model
        self.dataset = dataset
        self.calibration = calibration
        self.layers = tuple(model.decomposable_layers if layers is None else layers)
        if not self.layers:
            raise ValueError("model has no decomposable layers to explore")
        self.space = DesignSpace(layers=len(self.layers)) if space is None else space
        if self.space.layers != len(self.layers):
            raise ValueError(f"design space has {self.space.layers} layer genes, model targets {len(self.layers)}")
        self.ad_max = float(ad_max)
        self.lat_std = int(baseline_mapping(model, calibration, self.layers).cycles if lat_std is None else lat_std)
        self.subset = subset
        self.mode = mode
        self.baseline = evaluate_accuracy(model, dataset, subset)
        self._decomp: dict[tuple, DecomposedLayer] = {}
        self._points: dict[tuple[int, ...], ParetoPoint] = {}
        self._lock = threading.Lock()

    def decomposition(self, layer: int, hard: tuple[int, int, int, int], stages: int) -> DecomposedLayer:
        """Greedy stages are prefix-stable, so one run at the largest P serves every P."""
        key = (layer, hard)
        dl = self._decomp.get(key)
        if dl is None:
            z, e, m, sw = hard
            dl = decompose_layer(self.model.layers[layer], WmdConfig(max(self.space.stages), z, e, m, sw),
                                 self.mode, layer)
            with self._lock:
                dl = self._decomp.setdefault(key, dl)
        return dl.truncate(stages)

    def accuracy(self, dl_set: dict[int, DecomposedLayer]) -> EvalResult:
        approx = substitute_decomposed(self.model, dl_set)
        return evaluate_accuracy(approx, self.dataset, self.subset, baseline=self.baseline)

    @property
    def evaluations(self) -> int:
        return len(self._points)

    def cached(self, genes: tuple[int, ...]) -> ParetoPoint | None:
        return self._points.get(genes)

    def remember(self, point: ParetoPoint) -> ParetoPoint:
        with self._lock:
            return self._points.setdefault(point.genes, point)


def _violation(drop: float, cycles: int, ctx: SearchContext) -> float:
    return (max(0.0, drop - ctx.ad_max) / max(ctx.ad_max, 1e-9)
            + max(0, cycles - ctx.lat_std) / max(ctx.lat_std, 1))


def evaluate_fitness(genes: Sequence[int], ctx: SearchContext) -> ParetoPoint:
    genes = tuple(int(g) for g in genes)
    hit = ctx.cached(genes)
    if hit is not None:
        return hit
    hard, stages = ctx.space.decode(genes)
    z, e, m, sw = hard
    if sw > m or e > m or e < 2:
        # no such hardware: E and S_W must fit in M rows
        point = ParetoPoint(genes, hard, stages, math.inf, 0, 0.0, (0, 0), False, INVALID_VIOLATION)
        return ctx.remember(point)
    dl_set = {layer: ctx.decomposition(layer, hard, p) for layer, p in zip(ctx.layers, stages)}
    drop = ctx.accuracy(dl_set).accuracy_drop
    hw = HardParams(z, e, m, sw, max(2, max(stages)))
    try:
        mapping = map_pes(ctx.model, dl_set, hw, ctx.calibration)
    except InfeasibleError:
        over = pe_unit_luts(hw, ctx.calibration) / ctx.calibration.lut_max
        point = ParetoPoint(genes, hard, stages, drop, 0, 0.0, (0, 0), False, INVALID_VIOLATION * 0.5 + over)
        return ctx.remember(point)
    cycles = mapping.cycles
    v = _violation(drop, cycles, ctx)
    point = ParetoPoint(genes, hard, stages, drop, cycles, ctx.lat_std / cycles if cycles else math.inf,
                        (mapping.pe_x, mapping.pe_y), v == 0.0, v)
    return ctx.remember(point)


def model_cycles(ctx: SearchContext, point: ParetoPoint) -> int:
    """Recompute a point's cycles through ``latency_accl`` (cross-check helper)."""
    from .hw import AcceleratorConfig

    z, e, m, sw = point.hard
    hw = HardParams(z, e, m, sw, max(2, max(point.stages)))
    plan = dict(zip(ctx.layers, point.stages))
    return latency_accl(ctx.model, plan, AcceleratorConfig(hw, *point.mapping, ctx.calibration)).cycles_total


# --- Pareto utilities ----------------------------------------------------------

def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def pareto_filter(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated subset under (min accuracy_drop, min cycles), in input order."""
    out = []
    seen = set()
    for p in points:
        if p.genes in seen:
            continue
        if not any(dominates(q.objectives, p.objectives) for q in points):
            out.append(p)
            seen.add(p.genes)
    return out


def hypervolume_2d(objs: Sequence[tuple[float, float]], reference: tuple[float, float]) -> float:
    """Area dominated by ``objs`` and bounded by ``reference`` (both objectives minimized)."""
    pts = sorted((a, b) for a, b in objs if a < reference[0] and b < reference[1])
    area, best_b = 0.0, reference[1]
    for a, b in pts:
        if b < best_b:
            area += (reference[0] - a) * (best_b - b)
            best_b = b
    return area


def front_hypervolume(points: Sequence[ParetoPoint], ctx: SearchContext) -> float:
    """Hypervolume of feasible points on (drop, cycles / lat_std) with reference (ad_max, 1)."""
    objs = [(p.accuracy_drop, p.cycles / ctx.lat_std) for p in points if p.feasible]
    return hypervolume_2d(objs, (ctx.ad_max, 1.0))


def exhaustive_front(ctx: SearchContext, jobs: int = 1) -> list[ParetoPoint]:
    """Evaluate every genome and return the feasible Pareto set."""
    pts = _evaluate_all(list(ctx.space.genomes()), ctx, jobs)
    return pareto_filter([p for p in pts if p.feasible])


# --- NSGA-II -----------------------------------------------------------------------

def _constrained_fronts(pop: Sequence[ParetoPoint]) -> list[list[int]]:
    """Fronts under constraint domination: feasible Pareto fronts, then infeasible by violation."""
    feas = [i for i, p in enumerate(pop) if p.feasible]
    infeas = sorted((i for i, p in enumerate(pop) if not p.feasible), key=lambda i: (pop[i].violation, i))
    fronts: list[list[int]] = []
    dominated_by = {i: [] for i in feas}
    count = {i: 0 for i in feas}
    for a, b in itertools.combinations(feas, 2):
        if dominates(pop[a].objectives, pop[b].objectives):
            dominated_by[a].append(b)
            count[b] += 1
        elif dominates(pop[b].objectives, pop[a].objectives):
            dominated_by[b].append(a)
            count[a] += 1
    current = [i for i in feas if count[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                count[j] -= 1
                if count[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
    # equal violations share a front so crowding keeps diversity among them
    for _, group in itertools.groupby(infeas, key=lambda i: pop[i].violation):
        fronts.append(list(group))
    return fronts


def _crowding(pop: Sequence[ParetoPoint], front: list[int]) -> dict[int, float]:
    dist = {i: 0.0 for i in front}
    if len(front) <= 2 or not pop[front[0]].feasible:
        return {i: math.inf for i in front}
    for k in range(2):
        order = sorted(front, key=lambda i: (pop[i].objectives[k], i))
        lo, hi = pop[order[0]].objectives[k], pop[order[-1]].objectives[k]
        dist[order[0]] = dist[order[-1]] = math.inf
        if hi == lo:
            continue
        for prev, cur, nxt in zip(order, order[1:], order[2:]):
            dist[cur] += (pop[nxt].objectives[k] - pop[prev].objectives[k]) / (hi - lo)
    return dist


def _rank_and_crowd(pop: Sequence[ParetoPoint]):
    rank, crowd = {}, {}
    for r, front in enumerate(_constrained_fronts(pop)):
        crowd.update(_crowding(pop, front))
        for i in front:
            rank[i] = r
    return rank, crowd


def _survive(pop: list[ParetoPoint], mu: int) -> list[ParetoPoint]:
    chosen: list[int] = []
    for front in _constrained_fronts(pop):
        if len(chosen) + len(front) <= mu:
            chosen.extend(front)
            continue
        crowd = _crowding(pop, front)
        chosen.extend(sorted(front, key=lambda i: (-crowd[i], i))[:mu - len(chosen)])
        break
    return [pop[i] for i in chosen]


def _tournament(rng, rank, crowd, n: int) -> int:
    a, b = rng.integers(0, n, size=2)
    if rank[a] != rank[b]:
        return int(a if rank[a] < rank[b] else b)
    if crowd[a] != crowd[b]:
        return int(a if crowd[a] > crowd[b] else b)
    return int(min(a, b))


def _poly_mutate(rng, gene: int, upper: int, eta: float) -> int:
    """Polynomial mutation on an integer gene in [0, upper], rounded back to the grid."""
    if upper == 0:
        return 0
    x = float(gene)
    d1, d2 = x / upper, (upper - x) / upper
    u = rng.random()
    if u < 0.5:
        dq = (2 * u + (1 - 2 * u) * (1 - d1) ** (eta + 1)) ** (1 / (eta + 1)) - 1
    else:
        dq = 1 - (2 * (1 - u) + 2 * (u - 0.5) * (1 - d2) ** (eta + 1)) ** (1 / (eta + 1))
    y = int(round(x + dq * upper))
    if y == gene:
        # rounding swallowed the step; move to a neighbour in the sampled direction
        y = gene + (1 if dq > 0 else -1)
    if y < 0 or y > upper:
        # stepped off the range from a boundary gene: go inward instead
        y = 1 if gene == 0 else upper - 1
    return min(max(y, 0), upper)


def _offspring(rng, pop: list[ParetoPoint], sizes: tuple[int, ...], params: GAParams) -> list[tuple[int, ...]]:
    rank, crowd = _rank_and_crowd(pop)
    n = len(pop)
    pm = params.mutation_prob if params.mutation_prob is not None else 1.0 / len(sizes)
    kids: list[tuple[int, ...]] = []
    while len(kids) < params.population:
        a = list(pop[_tournament(rng, rank, crowd, n)].genes)
        b = list(pop[_tournament(rng, rank, crowd, n)].genes)
        if rng.random() < params.crossover_prob:
            for k in range(len(sizes)):
                if rng.random() < params.swap_prob:
                    a[k], b[k] = b[k], a[k]
        for child in (a, b):
            for k, size in enumerate(sizes):
                if rng.random() < pm:
                    child[k] = _poly_mutate(rng, child[k], size - 1, params.eta_m)
            kids.append(tuple(child))
    return kids[:params.population]


def _evaluate_all(genomes: list[tuple[int, ...]], ctx: SearchContext, jobs: int) -> list[ParetoPoint]:
    todo = sorted({g for g in genomes if ctx.cached(g) is None})
    if jobs > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(lambda g: evaluate_fitness(g, ctx), todo))
    else:
        for g in todo:
            evaluate_fitness(g, ctx)
    return [ctx.cached(tuple(g)) for g in genomes]


@dataclass
class GenerationStats:
    generation: int
    evaluations: int
    feasible: int
    front: list[ParetoPoint] = field(default_factory=list)
    best_drop: float = math.inf
    best_cycles: float = math.inf


def explore(ctx: SearchContext, params: GAParams, jobs: int = 1,
            on_generation: Callable[[GenerationStats], None] | None = None) -> list[ParetoPoint]:
    """Run NSGA-II and return the feasible non-dominated set of everything evaluated."""
    rng = np.random.default_rng(params.seed)
    sizes = ctx.space.gene_sizes
    total = design_space_size(ctx.space)
    init: list[tuple[int, ...]]
    if total <= params.population:
        init = list(ctx.space.genomes())
    else:
        init = [tuple(int(rng.integers(0, n)) for n in sizes) for _ in range(params.population)]
    pop = _evaluate_all(init, ctx, jobs)
    archive: dict[tuple[int, ...], ParetoPoint] = {p.genes: p for p in pop}

    def report(gen):
        feas = [p for p in archive.values() if p.feasible]
        front = pareto_filter(sorted(feas, key=lambda p: p.genes))
        stats = GenerationStats(gen, ctx.evaluations, len(feas), front,
                                min((p.accuracy_drop for p in feas), default=math.inf),
                                min((p.cycles for p in feas), default=math.inf))
        if on_generation is not None:
            on_generation(stats)
        return frozenset(p.genes for p in front)

    last = report(0)
    stall = 0
    for gen in range(1, params.generations + 1):
        if total <= len(archive):
            break
        kids = _evaluate_all(_offspring(rng, pop, sizes, params), ctx, jobs)
        for p in kids:
            archive.setdefault(p.genes, p)
        merged = list({p.genes: p for p in pop + kids}.values())
        pop = _survive(merged, params.population)
        current = report(gen)
        # an empty front is not a converged one
        stall = stall + 1 if current and current == last else 0
        last = current
        if stall >= params.stall_generations:
            log.info("front unchanged for %d generations; stopping at generation %d", stall, gen)
            break
    front = pareto_filter(sorted((p for p in archive.values() if p.feasible), key=lambda p: p.genes))
    if not front:
        log.warning("no feasible configuration found (ad_max=%s, lat_std=%s)", ctx.ad_max, ctx.lat_std)
    return sorted(front, key=lambda p: (p.cycles, p.accuracy_drop, p.genes))
