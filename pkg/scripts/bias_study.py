#!/usr/bin/env python3
"""Client response entropy and accuracy as the label split gets more skewed.

Repeats the study over several seeds and prints per-beta means, plus the
entropy of one model trained centrally on the same data for reference.

    python scripts/bias_study.py --seeds 3 --out runs/bias
"""

import argparse
from pathlib import Path

import numpy as np

from fcil_sim.harness import RunConfig, benchmark_config, run_bias_study, write_bias_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", help="JSON config; defaults to the benchmark preset without rebalancing")
    ap.add_argument("--betas", default="0.5,0.1,0.05")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--out", default="runs/bias_study")
    args = ap.parse_args()

    base = RunConfig.from_json(args.config) if args.config else benchmark_config(rebalance=False)
    betas = [float(b) for b in args.betas.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    entropy = np.zeros((args.seeds, len(betas)))
    acc = np.zeros_like(entropy)
    joint = []
    for s in range(args.seeds):
        study = run_bias_study(base.replace(seed=base.seed + s), betas)
        write_bias_csv(study, out / f"entropy_vs_beta_seed{s}.csv")
        entropy[s] = [p["entropy"] for p in study["points"]]
        acc[s] = [p["accuracy"] for p in study["points"]]
        joint.append(study["joint_entropy"])

    print(f"{'beta':>8} {'entropy (nats)':>15} {'accuracy':>9}")
    for j, b in enumerate(betas):
        print(f"{b:>8g} {entropy[:, j].mean():>15.4f} {acc[:, j].mean():>9.4f}")
    print(f"{'joint':>8} {np.mean(joint):>15.4f}")


if __name__ == "__main__":
    main()
