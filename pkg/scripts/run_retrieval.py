#!/usr/bin/env python3
"""Top-1 source retrieval: TPV dot-product metric vs cosine of pooled prompts.

Counts, per seeded trial, whether each metric's best-ranked source is one of
the helpful tasks. Prints aggregate accuracies and the trials where the two
metrics disagree.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from dtvg import experiments


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--trials", type=int, default=50)
    args = parser.parse_args()

    cfg = experiments.FixtureConfig()
    trials = experiments.retrieval_trials(cfg, range(args.trials))
    tpv_acc = sum(t.tpv_correct for t in trials)
    cos_acc = sum(t.cosine_correct for t in trials)
    print(f"TPV similarity retrieval:    {tpv_acc}/{len(trials)}")
    print(f"cosine-of-prompt retrieval:  {cos_acc}/{len(trials)}")
    for t in trials:
        if t.tpv_pick != t.cosine_pick:
            print(f"  seed {t.seed}: tpv -> {t.tpv_pick}, cosine -> {t.cosine_pick}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
