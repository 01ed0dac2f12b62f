"""TDCRL vs the no-intervention ablation on the synthetic benchmark.

    python3 scripts/run_ablation.py --seeds 0 1 2 3 4 [--config run.yaml] [--json out.json]
"""
import argparse
import json
import time

import numpy as np

from tdcrl.config import RunConfig, load_config
from tdcrl.experiments import ablation_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--config")
    ap.add_argument("--json")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig()
    t0 = time.perf_counter()
    rows = []
    for seed in args.seeds:
        r = ablation_seed(seed, cfg).to_dict()
        rows.append(r)
        print(f"seed {seed}: tdcrl {r['acc_tdcrl']:.3f}  no-ci {r['acc_no_ci']:.3f}  "
              f"mmd {r['mmd_pre']:.3f} -> {r['mmd_post']:.3f}  "
              f"probe CE {r['probe_ce_pre']:.3f} -> {r['probe_ce_post']:.3f}  "
              f"gap {r['initial_gap']:.2e} -> {r['final_gap']:.2e}", flush=True)
    diffs = [r["improvement"] for r in rows]
    print(f"mean improvement {100 * np.mean(diffs):.2f} pp, wins {sum(d > 0 for d in diffs)}/{len(diffs)}, "
          f"{time.perf_counter() - t0:.1f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
