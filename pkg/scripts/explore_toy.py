"""Compare NSGA-II fronts against the exhaustive front on the toy design space.

Prints the exhaustive front, then one line per seed with the hypervolume
ratio and the number of configurations the search evaluated.
"""
import argparse
import time
from pathlib import Path

from po2forge.dse import DesignSpace, GAParams, SearchContext, exhaustive_front, explore, front_hypervolume
from po2forge.store import load_calibration, load_dataset, load_model

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--fixtures", default=str(FIXTURES))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--population", type=int)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    fx = Path(args.fixtures)
    model, data = load_model(fx / "toy3"), load_dataset(fx / "toy_data")
    cal = load_calibration(fx / "calibration.txt")
    space = DesignSpace.load(fx / "toy_space.txt", len(model.decomposable_layers))
    params = GAParams.load(fx / "ga_small.txt")
    if args.population:
        params = GAParams(**{**vars(params), "population": args.population})

    t0 = time.perf_counter()
    ref_ctx = SearchContext(model, data, cal, space)
    ref = exhaustive_front(ref_ctx, args.jobs)
    ref_hv = front_hypervolume(ref, ref_ctx)
    print(f"exhaustive: {ref_ctx.evaluations} configurations in {time.perf_counter() - t0:.0f} s, "
          f"lat_std {ref_ctx.lat_std}")
    for p in sorted(ref, key=lambda q: q.cycles):
        print(f"  drop {p.accuracy_drop:+.2f} pp  cycles {p.cycles:5d}  hard {p.hard}  stages {p.stages}")

    for seed in range(args.seeds):
        ctx = SearchContext(model, data, cal, space)
        t0 = time.perf_counter()
        front = explore(ctx, GAParams(**{**vars(params), "seed": seed}), jobs=args.jobs)
        ratio = front_hypervolume(front, ctx) / ref_hv
        print(f"seed {seed}: HV ratio {ratio:.3f}, {ctx.evaluations} evaluated, "
              f"{len(front)} points, {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
