#!/usr/bin/env python3
"""FAA of the four rebalancing variants (none, old classes, current classes, all) over seeds.

    python scripts/ablation.py --seeds 5 --out runs/ablation
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from fcil_sim.harness import ABLATION_ROWS, RunConfig, benchmark_config, run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", help="JSON config; defaults to the benchmark preset")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    base = RunConfig.from_json(args.config) if args.config else benchmark_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    table = {name: [] for name in ABLATION_ROWS}
    for s in range(args.seeds):
        rows = run_ablation(base.replace(seed=base.seed + s))["rows"]
        for name, row in rows.items():
            table[name].append(row["faa"])
        print(f"seed {base.seed + s}: " + "  ".join(f"{k} {v['faa']:.3f}" for k, v in rows.items()))

    with open(out / "faa_table.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "faa_mean", "faa_std", *[f"seed{s}" for s in range(args.seeds)]])
        for name, vals in table.items():
            w.writerow([name, np.mean(vals), np.std(vals), *vals])
    print()
    for name, vals in table.items():
        print(f"{name:<8} {np.mean(vals):.4f} +/- {np.std(vals):.4f}")


if __name__ == "__main__":
    main()
