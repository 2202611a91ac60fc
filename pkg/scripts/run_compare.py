#!/usr/bin/env python3
"""Run the standard fixture mode comparison and print the aggregate table.

Equivalent to `dtvg compare`, but handy to tweak inline while exploring.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from dtvg import experiments


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--modes", nargs="*", default=None)
    args = parser.parse_args()

    cfg = experiments.FixtureConfig()
    modes = args.modes or list(experiments.MODES)
    cells = experiments.compare_modes(cfg, range(args.seeds), modes=modes)
    rows = experiments.aggregate_table(cells)
    width = max(len(r["mode"]) for r in rows)
    print(f"{'mode'.ljust(width)}  mean_test_acc  sd      per-seed")
    for r in rows:
        accs = [c.test_accuracy for c in cells if c.mode == r["mode"]]
        per_seed = " ".join(f"{a:.3f}" for a in accs)
        print(f"{r['mode'].ljust(width)}  {r['mean_test_accuracy']:.4f}         "
              f"{r['sd_test_accuracy']:.4f}  {per_seed}")
    dtvg = [c.test_accuracy for c in cells if c.mode == "dtvg_dynamic"]
    nt = [c.test_accuracy for c in cells if c.mode == "no_transfer_pt"]
    if dtvg and nt:
        print(f"\ndynamic grouping vs plain tuning: "
              f"{np.mean(dtvg) - np.mean(nt):+.4f} mean accuracy")
    return 0


if __name__ == "__main__":
    sys.exit(main())
