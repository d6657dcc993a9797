#!/usr/bin/env python3
"""Per-round trace of one run: accuracy and response entropy before and after rebalancing.

    python scripts/rebalance_demo.py --seed 0 --out runs/demo
"""

import argparse

from fcil_sim.harness import RunConfig, benchmark_config, run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", help="JSON config; defaults to the benchmark preset")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="write report.json and rounds.jsonl here")
    args = ap.parse_args()

    cfg = RunConfig.from_json(args.config) if args.config else benchmark_config()
    cfg = cfg.replace(seed=args.seed)
    with_cr = run(cfg)
    without = run(cfg.replace(rebalance=False))

    print(f"{'task':>4} {'rnd':>3} {'acc pre':>8} {'acc post':>8} {'H pre':>7} {'H post':>7}")
    for r in with_cr.rounds:
        print(
            f"{r['task']:>4} {r['round']:>3} {r['global_acc_pre']:>8.4f} {r['global_acc_post']:>8.4f} "
            f"{r['entropy_pre']:>7.4f} {r['entropy_post']:>7.4f}"
        )
    print(f"\nFAA with rebalancing {with_cr.faa:.4f}, without {without.faa:.4f}")
    if args.out:
        print(f"report: {with_cr.write(args.out)}")


if __name__ == "__main__":
    main()
