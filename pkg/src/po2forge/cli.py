"""``po2forge`` command line: decompose, eval, map, simulate, explore, report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dse import DesignSpace, GAParams, SearchContext, explore
from .hw import (AcceleratorConfig, HardParams, InfeasibleError, baseline_mapping, latency_accl,
                 map_pes, resource_accl)
from .infer import evaluate_accuracy, infer, quantize_ptq, substitute_decomposed
from .sim import SimulationError, simulate_model
from .store import CostCalibration, ModelError, load_calibration, load_dataset, load_model
from .wmd import AccumulatorOverflow, WmdConfig, decompose_layer, load_decomposed, save_decomposed

log = logging.getLogger("po2forge")

EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_INVARIANT = 0, 2, 3, 4


class Infeasible(RuntimeError):
    """A well-formed request with no admissible answer."""


# --- run manifest ------------------------------------------------------------------

def _hash_path(h, path: Path) -> None:
    if path.is_dir():
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(child.relative_to(path)).encode())
            h.update(child.read_bytes())
    elif path.exists():
        h.update(path.read_bytes())


def run_manifest(command: str, args: argparse.Namespace) -> dict[str, str]:
    """Provenance fields embedded in every output file.

    The timestamp comes from SOURCE_DATE_EPOCH when set and is omitted
    otherwise, so identical runs produce identical bytes.
    """
    inputs = {k: str(v) for k, v in sorted(vars(args).items())
              if k in ("model", "dataset", "calibration", "decomposed", "space", "ga", "front") and v}
    h = hashlib.sha256()
    for key, path in inputs.items():
        h.update(key.encode())
        _hash_path(h, Path(path))
    params = {k: v for k, v in sorted(vars(args).items())
              if k not in inputs and k not in ("out", "func", "jobs") and v is not None}
    h.update(json.dumps(params, sort_keys=True, default=str).encode())
    man = {
        "tool": f"po2forge {__version__}",
        "command": command,
        "inputs": " ".join(f"{k}={v}" for k, v in inputs.items()),
        "config_hash": h.hexdigest()[:16],
        "seed": str(getattr(args, "seed", None)),
    }
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        man["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(int(epoch)))
    return man


def _header(man: dict[str, str]) -> str:
    return "".join(f"# {k}: {v}\n" for k, v in man.items())


def write_csv(path: Path, man: dict[str, str], columns: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(_header(man))
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})


def read_csv(path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Inverse of :func:`write_csv`: (manifest, rows as strings)."""
    man: dict[str, str] = {}
    body = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# ") and not body:
                key, _, value = line[2:].rstrip("\n").partition(": ")
                man[key] = value
            else:
                body.append(line)
    return man, list(csv.DictReader(body))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return " ".join(str(x) for x in v)
    return str(v)


def _write_text(path: Path, man: dict[str, str], text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_header(man) + text)


# --- shared loading ------------------------------------------------------------------

def _calibration(args) -> CostCalibration:
    return load_calibration(args.calibration) if args.calibration else CostCalibration()


def _load_decomposed_dir(path) -> dict:
    files = sorted(Path(path).glob("*.wmd"))
    if not files:
        raise ModelError(f"no .wmd files in {path}")
    dls = {}
    for f in files:
        dl = load_decomposed(f)
        dls[dl.layer_index] = dl
    return dls


def _hard_from(dls: dict) -> HardParams:
    cfgs = {dl.config.as_tuple()[1:] for dl in dls.values()}
    if len(cfgs) != 1:
        raise ModelError(f"decomposed layers disagree on hardware parameters: {sorted(cfgs)}")
    z, e, m, sw = cfgs.pop()
    return HardParams(z, e, m, sw, max(2, max(dl.config.stages for dl in dls.values())))


def _grid(text: str | None):
    if not text:
        return None
    x, y = (int(v) for v in text.split(","))
    return x, y


def _layers_arg(text: str | None, model) -> list[int]:
    if not text or text == "all":
        return model.decomposable_layers
    return [int(v) for v in text.split(",")]


# --- commands ------------------------------------------------------------------------------

def cmd_decompose(args) -> int:
    model = load_model(args.model)
    cfg = WmdConfig.parse(args.wmd)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = run_manifest("decompose", args)
    rows = []
    for i in _layers_arg(args.layers, model):
        layer = model.layers[i]
        if layer.weights is None:
            raise ModelError(f"layer {i} ({layer.kind}) has no weights")
        dl = decompose_layer(layer, cfg, args.mode, i)
        save_decomposed(dl, out / f"layer{i:03d}.wmd", _header(man))
        norm = float(np.linalg.norm(layer.weights))
        rows.append({"layer": i, "name": layer.name, "kind": layer.kind, "P": cfg.stages, "Z": cfg.shifts,
                     "E": cfg.nonzeros, "M": cfg.rows, "S_W": cfg.slice_width,
                     "residual_norm": dl.residual_norm, "weight_norm": norm,
                     "relative_residual": dl.residual_norm / norm if norm else 0.0})
    write_csv(out / "residuals.csv", man, list(rows[0]) if rows else ["layer"], rows)
    for r in rows:
        print(f"layer {r['layer']:3d} {r['kind']:<17} residual {r['residual_norm']:.6g} "
              f"(relative {r['relative_residual']:.4f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    ds.check_against(model)
    base = evaluate_accuracy(model, ds, args.subset)
    rows = [{"variant": "baseline", **_eval_row(base)}]
    if args.decomposed:
        approx = substitute_decomposed(model, _load_decomposed_dir(args.decomposed))
        rows.append({"variant": "decomposed", **_eval_row(evaluate_accuracy(approx, ds, args.subset, base))})
    for bits in args.ptq_bits or []:
        q = quantize_ptq(model, bits)
        rows.append({"variant": f"ptq{bits}", **_eval_row(evaluate_accuracy(q, ds, args.subset, base))})
    man = run_manifest("eval", args)
    write_csv(Path(args.out), man, ["variant", "top1_accuracy", "accuracy_drop", "samples_evaluated", "correct"],
              rows)
    for r in rows:
        print(f"{r['variant']:<11} top1 {r['top1_accuracy']:.4f}  drop {r['accuracy_drop']:+.2f} pp")
    return EXIT_OK


def _eval_row(res) -> dict:
    return {"top1_accuracy": res.top1_accuracy, "accuracy_drop": res.accuracy_drop,
            "samples_evaluated": res.samples_evaluated, "correct": res.correct}


def _plan_and_hard(args, model):
    if args.decomposed:
        dls = _load_decomposed_dir(args.decomposed)
        return dls, _hard_from(dls)
    if not args.wmd:
        raise ModelError("map needs --decomposed or --wmd")
    cfg = WmdConfig.parse(args.wmd)
    plan = {i: cfg.stages for i in _layers_arg(args.layers, model)}
    return plan, HardParams.from_config(cfg)


def cmd_map(args) -> int:
    model = load_model(args.model)
    cal = _calibration(args)
    plan, hard = _plan_and_hard(args, model)
    mapping = map_pes(model, plan, hard, cal)
    acc = AcceleratorConfig(hard, mapping.pe_x, mapping.pe_y, cal)
    res = resource_accl(acc)
    lat = latency_accl(model, plan, acc)
    lat_std = args.lat_std if args.lat_std is not None else baseline_mapping(model, cal, sorted(plan)).cycles
    rows = [{"layer": i, "cycles": c, "lat_f": f}
            for i, c, f in zip(lat.layers, lat.per_layer_cycles, lat.lat_f_per_layer)]
    man = run_manifest("map", args)
    summary = {
        "pe_x": mapping.pe_x, "pe_y": mapping.pe_y, "cycles_total": lat.cycles_total,
        "luts_total": res.luts_total, "luts_per_pe_row": res.luts_per_pe_row, "lut_max": cal.lut_max,
        "brams_input": res.brams_input, "brams_output": res.brams_output,
        "f_elements_fetched": res.f_elements_fetched, "lat_std": lat_std,
        "speedup": lat_std / lat.cycles_total if lat.cycles_total else math.inf,
    }
    out = Path(args.out)
    write_csv(out, man, ["layer", "cycles", "lat_f"], rows)
    text = "".join(f"{k}: {_fmt(v)}\n" for k, v in summary.items())
    _write_text(out.with_suffix(".txt"), man, text)
    print(text, end="")
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    ds.check_against(model)
    cal = _calibration(args)
    dls = _load_decomposed_dir(args.decomposed)
    hard = _hard_from(dls)
    grid = _grid(args.grid)
    if grid is None:
        m = map_pes(model, dls, hard, cal)
        grid = (m.pe_x, m.pe_y)
    acc = AcceleratorConfig(hard, *grid, cal)
    x, y = ds.subset(args.subset)
    count = min(args.sample, len(y))
    if count == 0:
        raise ModelError("no samples to simulate")
    approx = substitute_decomposed(model, dls)
    totals: dict[str, int] = {}
    agree = 0
    lines = []
    for n in range(count):
        rep = simulate_model(model, dls, acc, x[n])
        ref = infer(approx, x[n])
        agree += int(rep.output.argmax() == ref.argmax())
        for i, lr in sorted(rep.layers.items()):
            for key in ("compute_cycles", "load_cycles", "fill_cycles", "buffer_reads", "buffer_writes",
                        "accumulations", "overflow_events"):
                totals[key] = totals.get(key, 0) + getattr(lr, key)
            if n == 0:
                lines.append(f"layer {i}: " + lr.as_text().replace("\n", "; ").rstrip("; "))
        lines_pred = f"sample {n}: simulated class {int(rep.output.argmax())} reference class {int(ref.argmax())}"
        lines.append(lines_pred)
    analytic = latency_accl(model, dls, acc).cycles_total
    per_sample = totals["compute_cycles"] // count
    text = (f"grid: {grid[0]},{grid[1]}\nsamples: {count}\n"
            + "".join(f"{k}: {v}\n" for k, v in totals.items())
            + f"compute_cycles_per_sample: {per_sample}\nanalytical_cycles: {analytic}\n"
            + f"argmax_agreement: {agree}/{count}\n" + "\n".join(lines) + "\n")
    _write_text(Path(args.out), run_manifest("simulate", args), text)
    print(text, end="")
    if per_sample != analytic:
        log.error("simulated cycles %d differ from the analytical model %d", per_sample, analytic)
        return EXIT_INVARIANT
    return EXIT_OK


FRONT_COLUMNS = ["genes", "Z", "E", "M", "S_W", "stages", "accuracy_drop", "cycles", "speedup",
                 "pe_x", "pe_y", "feasible", "violation"]


def _front_row(p) -> dict:
    z, e, m, sw = p.hard
    return {"genes": p.genes, "Z": z, "E": e, "M": m, "S_W": sw, "stages": p.stages,
            "accuracy_drop": p.accuracy_drop, "cycles": p.cycles, "speedup": p.speedup,
            "pe_x": p.mapping[0], "pe_y": p.mapping[1], "feasible": int(p.feasible), "violation": p.violation}


def cmd_explore(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    ds.check_against(model)
    cal = _calibration(args)
    layers = _layers_arg(args.layers, model)
    space = DesignSpace.load(args.space, len(layers)) if args.space else DesignSpace(layers=len(layers))
    params = GAParams.load(args.ga, seed=args.seed) if args.ga else GAParams(seed=args.seed or 0)
    if args.population:
        params = GAParams(**{**vars(params), "population": args.population})
    if args.generations is not None:
        params = GAParams(**{**vars(params), "generations": args.generations})
    ctx = SearchContext(model, ds, cal, space, layers, ad_max=args.ad_max, lat_std=args.lat_std)

    def progress(stats):
        log.info("generation %d: %d evaluations, %d feasible, front size %d",
                 stats.generation, stats.evaluations, stats.feasible, len(stats.front))

    front = explore(ctx, params, jobs=args.jobs, on_generation=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = run_manifest("explore", args)
    man["lat_std"] = str(ctx.lat_std)
    man["ad_max"] = repr(ctx.ad_max)
    write_csv(out / "pareto.csv", man, FRONT_COLUMNS, [_front_row(p) for p in front])
    write_csv(out / "plot.csv", man, ["accuracy_drop", "speedup"],
              [{"accuracy_drop": p.accuracy_drop, "speedup": p.speedup} for p in front])
    print(f"lat_std {ctx.lat_std} cycles, {ctx.evaluations} configurations evaluated, front size {len(front)}")
    for p in front:
        print(f"  Z={p.hard[0]} E={p.hard[1]} M={p.hard[2]} S_W={p.hard[3]} P={','.join(map(str, p.stages))}"
              f"  drop {p.accuracy_drop:+.2f} pp  cycles {p.cycles}  speed-up {p.speedup:.3f}")
    if not front:
        raise Infeasible("no feasible configuration found; relax --ad-max or --lat-std")
    return EXIT_OK


def cmd_report(args) -> int:
    man, rows = read_csv(args.front)
    if not rows:
        raise ModelError(f"{args.front} has no points")
    ad_max = args.ad_max if args.ad_max is not None else float(man.get("ad_max", 2.0))
    ok = [r for r in rows if int(r["feasible"]) and float(r["accuracy_drop"]) <= ad_max]
    if not ok:
        raise Infeasible(f"no point in {args.front} has accuracy drop <= {ad_max} pp")
    best = min(ok, key=lambda r: (int(r["cycles"]), float(r["accuracy_drop"])))
    print(f"selected: Z={best['Z']} E={best['E']} M={best['M']} S_W={best['S_W']} P={best['stages']}")
    print(f"accuracy drop: {float(best['accuracy_drop']):.2f} pp (limit {ad_max} pp)")
    print(f"cycles: {best['cycles']}  speed-up: {float(best['speedup']):.3f}")
    print(f"PE grid: {best['pe_x']} x {best['pe_y']}")
    if args.calibration or args.model:
        cal = _calibration(args)
        hard = HardParams(int(best["Z"]), int(best["E"]), int(best["M"]), int(best["S_W"]),
                          max(2, max(int(s) for s in best["stages"].split())))
        res = resource_accl(AcceleratorConfig(hard, int(best["pe_x"]), int(best["pe_y"]), cal))
        print(f"LUTs: {res.luts_total} of {cal.lut_max}  BRAM in/out: {res.brams_input}/{res.brams_output}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="po2forge", description=__doc__)
    ap.add_argument("--version", action="version", version=f"po2forge {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, *names):
        if "model" in names:
            p.add_argument("--model", required=True, help="model archive directory")
        if "dataset" in names:
            p.add_argument("--dataset", required=True, help="dataset archive directory")
        if "calibration" in names:
            p.add_argument("--calibration", help="LUT cost calibration file (key = value)")
        if "layers" in names:
            p.add_argument("--layers", help="comma-separated layer indices (default: decomposable layers)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)

    p = sub.add_parser("decompose", help="decompose layers into power-of-two stage matrices")
    common(p, "model", "layers")
    p.add_argument("--wmd", required=True, metavar="P,Z,E,M,SW")
    p.add_argument("--mode", choices=("accelerator", "conv"), default="accelerator")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("eval", help="top-1 accuracy of baseline, decomposed and PTQ variants")
    common(p, "model", "dataset")
    p.add_argument("--decomposed", help="directory of .wmd files")
    p.add_argument("--ptq-bits", type=int, action="append", help="weight bits for PTQ (repeatable)")
    p.add_argument("--subset", choices=("search", "final", "all"), default="final")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="PE grid search, resources and latency")
    common(p, "model", "calibration", "layers")
    p.add_argument("--decomposed")
    p.add_argument("--wmd", metavar="P,Z,E,M,SW")
    p.add_argument("--lat-std", type=int)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("simulate", help="cycle-level simulation on dataset samples")
    common(p, "model", "dataset", "calibration")
    p.add_argument("--decomposed", required=True)
    p.add_argument("--grid", metavar="PE_X,PE_Y", help="default: the grid chosen by map")
    p.add_argument("--sample", type=int, default=1, help="number of samples to simulate")
    p.add_argument("--subset", choices=("search", "final", "all"), default="final")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("explore", help="NSGA-II design-space exploration")
    common(p, "model", "dataset", "calibration", "layers")
    p.add_argument("--space", help="design-space file (key = value lists)")
    p.add_argument("--ga", help="GA parameter file (key = value)")
    p.add_argument("--population", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--ad-max", type=float, default=2.0, help="accuracy-drop limit in percentage points")
    p.add_argument("--lat-std", type=int, help="latency limit in cycles (default: MAC baseline)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("report", help="pick the fastest point under the accuracy-drop limit")
    p.add_argument("--front", required=True, help="pareto.csv from explore")
    p.add_argument("--ad-max", type=float)
    p.add_argument("--calibration")
    p.add_argument("--model")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("PO2FORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InfeasibleError, Infeasible) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (AccumulatorOverflow, AssertionError) as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ModelError, SimulationError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
