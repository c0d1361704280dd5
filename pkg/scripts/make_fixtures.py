"""Regenerate the committed fixtures/ directory from the deterministic builders."""
import argparse
from pathlib import Path

from po2forge.fixtures import dscnn_like, teacher_dataset, toy3, toy_calibration, toy_dataset
from po2forge.store import save_calibration, save_dataset, save_model

TOY_SPACE = """\
# enumerable toy design space: 4 * 3 * 2 * 3 hard choices, 3 stage choices per layer
shifts = 2, 3, 4, 5
nonzeros = 2, 3, 4
rows = 4, 8
slice_widths = 1, 2, 4
stages = 1, 2, 3
"""

GA_SMALL = """\
population = 96
generations = 20
crossover_prob = 0.9
swap_prob = 0.5
eta_c = 15
eta_m = 5
stall_generations = 5
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "fixtures"))
    out = Path(ap.parse_args().out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(toy3(), out / "toy3")
    save_dataset(toy_dataset(), out / "toy_data")
    ds_model = dscnn_like()
    save_model(ds_model, out / "dscnn")
    save_dataset(teacher_dataset(ds_model), out / "dscnn_data")
    save_calibration(toy_calibration(), out / "calibration.txt")
    (out / "toy_space.txt").write_text(TOY_SPACE)
    (out / "ga_small.txt").write_text(GA_SMALL)
    for p in sorted(out.iterdir()):
        print(p)


if __name__ == "__main__":
    main()
