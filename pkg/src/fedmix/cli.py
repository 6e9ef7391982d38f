"""Command line entry point: ``fedmix run | eval | audit-privacy | partition``.

Exit codes: 0 success, 2 invalid configuration or shape mismatch, 3 training diverged.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .data import shards_to_csv
from .federation import DivergenceError
from .metrics import METRICS_HEADER, metrics_csv_line, metrics_to_csv
from .numerics import StructureError
from .posterior import SNAPSHOT_HEADER, ConfigError
from .simulation import AUDIT_HEADER, Simulation, build_shards, privacy_audit, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("fedmix")


def _output_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.output or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = _output_dir(args, cfg)
    sim = Simulation(cfg)

    def progress(m):
        log.info("round %d local_acc=%s global_acc=%s", m.round, m.local_acc, m.global_acc)

    try:
        sim.run(jobs=args.jobs, progress=progress)
    except DivergenceError as exc:
        print(f"error: training diverged in round {exc.round} (shard {exc.shard_id}): {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    (out / "metrics.csv").write_text(metrics_to_csv(sim.metrics))
    if sim.is_fedmix:
        write_csv(out / "phi_snapshots.csv", SNAPSHOT_HEADER, sim.phi_snapshots)
    sim.save_checkpoint(out / "checkpoint")
    last = sim.metrics[-1]
    print(",".join(METRICS_HEADER))
    print(",".join(metrics_csv_line(last)))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else None
    sim = Simulation.from_checkpoint(args.checkpoint, cfg)
    lines = []
    if args.new_client is not None:
        if not 0 <= args.new_client < len(sim.shards):
            raise ConfigError(f"--new-client: no shard {args.new_client}")
        acc = sim.new_client_accuracy(sim.shards[args.new_client], args.gate_epochs)
        lines.append(("new_client_acc", acc))
    else:
        local, excluded = sim.finetuned_local_accuracy(args.finetune_epochs)
        _, glob = sim.accuracies()
        lines += [("local_acc", local), ("global_acc", glob), ("excluded_shards", len(excluded))]
    for k, v in lines:
        print(f"{k}={v!r}")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "eval.csv", ["metric", "value"], [[k, repr(v)] for k, v in lines])
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = _output_dir(args, cfg)
    rows, means = privacy_audit(cfg)
    write_csv(out / "privacy_audit.csv", AUDIT_HEADER, rows)
    for mode, v in means.items():
        print(f"{mode} mean_l1={v!r}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = _output_dir(args, cfg)
    shards, _ = build_shards(cfg)
    (out / "shards.csv").write_text(shards_to_csv(shards))
    print(f"wrote {len(shards)} shards to {out / 'shards.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmix", description="Federated mixture-of-experts simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and write metrics, posterior snapshots and a checkpoint")
    r.add_argument("--config", required=True)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--output")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="defaults to the config stored with the checkpoint")
    e.add_argument("--finetune-epochs", type=int, default=0)
    e.add_argument("--new-client", type=int, help="fit a fresh gate on this shard and report its test accuracy")
    e.add_argument("--gate-epochs", type=int, default=20)
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit-privacy", help="reconstruct label marginals from output-bias updates")
    a.add_argument("--config", required=True)
    a.add_argument("--output")
    a.set_defaults(func=cmd_audit)

    s = sub.add_parser("partition", help="dump the partitioned shards to CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--output")
    s.set_defaults(func=cmd_partition)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, StructureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
