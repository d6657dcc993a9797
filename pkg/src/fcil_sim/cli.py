"""Command line entry point: ``fcil-sim {run,bias-study,ablation,gen-features,inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .datasets import SyntheticSpec, synth_generate, write_features
from .errors import ConfigError, InputError, NumericalError, PartitionInfeasible
from .harness import (
    RunConfig,
    RunReport,
    run,
    run_ablation,
    run_bias_study,
    write_bias_csv,
    write_faa_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_PARTITION, EXIT_NUMERICAL = 0, 2, 3, 4


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    return cfg.replace(**overrides) if overrides else cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out or cfg.out_dir or ".")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def cmd_run(args) -> int:
    cfg = _load_config(args)
    report = run(cfg)
    path = report.write(_out_dir(args, cfg))
    print(f"FAA {report.faa:.4f}  ->  {path}")
    return EXIT_OK


def cmd_bias_study(args) -> int:
    cfg = _load_config(args)
    try:
        betas = [float(b) for b in args.betas.split(",") if b.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --betas: {e}") from e
    study = run_bias_study(cfg, betas)
    out = _out_dir(args, cfg)
    _write_json(out / "bias_study.json", study)
    write_bias_csv(study, out / "entropy_vs_beta.csv")
    for p in study["points"]:
        print(f"beta {p['beta']:<8g} entropy {p['entropy']:.4f} nats  accuracy {p['accuracy']:.4f}")
    print(f"joint entropy {study['joint_entropy']:.4f} nats")
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = _load_config(args)
    table = run_ablation(cfg)
    out = _out_dir(args, cfg)
    _write_json(out / "ablation.json", table)
    write_faa_csv(table, out / "faa_table.csv")
    for name, row in table["rows"].items():
        print(f"{name:<8} FAA {row['faa']:.4f}")
    return EXIT_OK


def cmd_gen_features(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
        spec = SyntheticSpec(**raw)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise ConfigError(f"cannot read feature spec {args.spec}: {e}") from e
    ds = synth_generate(spec, args.split)
    write_features(ds, args.out)
    print(f"wrote {len(ds)} samples (C={ds.num_classes}, d={ds.dim}) to {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        report = RunReport.load(args.report)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise InputError(f"cannot read report {args.report}: {e}") from e
    except ValueError as e:
        raise InputError(f"inconsistent report {args.report}: {e}") from e
    print(f"version {report.version}  seed {report.seed}")
    print(f"FAA {report.faa:.4f}")
    print(f"{'task':>4} {'round':>5} {'acc':>7} {'H pre':>7} {'H post':>7}  ({report.entropy_unit})")
    for r in report.rounds:
        print(
            f"{r['task']:>4} {r['round']:>5} {r['global_acc_post']:>7.4f} "
            f"{r['entropy_pre']:>7.4f} {r['entropy_post']:>7.4f}"
        )
    c = report.comm
    print(
        f"uplink {c['uplink_bytes']} B  downlink {c['downlink_bytes']} B  "
        f"per client-round {c['mb_per_client_round']:.6f} MB"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcil-sim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per round")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one federated class-incremental run")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bias-study", help="client response entropy and accuracy across betas")
    p.add_argument("--config", required=True)
    p.add_argument("--betas", default="0.5,0.1,0.05")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bias_study)

    p = sub.add_parser("ablation", help="FAA with no / old / current / all-class rebalancing")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("gen-features", help="write a synthetic feature file")
    p.add_argument("--spec", required=True, help="JSON with SyntheticSpec fields")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_gen_features)

    p = sub.add_parser("inspect", help="summarize a report.json")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except PartitionInfeasible as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARTITION
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
