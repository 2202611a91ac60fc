#!/usr/bin/env python3
"""Observe how the dynamically selected source group settles over training.

Runs the dynamic mode on the standard fixture for each seed and reports the
group-change counts per training decile plus the final stable run. These are
observational statistics; nothing about the decay is asserted anywhere.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from dtvg import experiments, transfer


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--regroup-every", type=int, default=1)
    args = parser.parse_args()

    cfg = experiments.FixtureConfig(regroup_every=args.regroup_every)
    for seed in range(args.seeds):
        art = experiments.run_stage1(cfg, seed)
        run = transfer.run_transfer(
            art.model, art.target, art.source_tpvs, art.p_init,
            cfg.transfer_config("dtvg_dynamic", seed),
        )
        stats = transfer.stabilization_stats(run.state.history, cfg.n_max)
        final = run.state.history[-1].selected
        print(
            f"seed {seed}: {stats.change_count:3d} changes / {stats.regroup_events} regroups, "
            f"per-decile {list(stats.changes_per_decile)}, "
            f"stable last {stats.final_stable_steps:3d} steps, "
            f"final group {{{','.join(final) or '-'}}}, test {run.test_accuracy:.3f}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
