"""Command line entry point: run, report, verify, gen-data."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, apply_overrides, load_config
from .costs import CostReport
from .model import ConfigError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


def _cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    cfg = apply_overrides(cfg, overrides)
    out = run_experiment(cfg)
    last = out.result.records[-1].eval_loss if out.result.records else None
    print(json.dumps({"output_dir": str(out.directory), "rounds": len(out.result.records), "final_eval_loss": last}))
    return EXIT_OK


def _cmd_report(args) -> int:
    merged = CostReport()
    for d in args.runs:
        path = Path(d) / "cost_report.json" if Path(d).is_dir() else Path(d)
        rep = CostReport.from_json(path.read_text())
        for method, row in rep.rows.items():
            key = method if method not in merged.rows else f"{method} ({Path(d).name})"
            merged.rows[key] = row
    sys.stdout.write(merged.to_text())
    if args.json:
        Path(args.json).write_text(merged.to_json() + "\n")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks(args.only or None)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<34} {r.detail}  ({r.seconds:.1f}s)")
    failed = [r.name for r in results if not r.ok]
    if failed:
        _error("VerificationFailed", f"{len(failed)} check(s) failed", checks=failed)
        return EXIT_FAIL
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    from .data import make_synthetic_dataset, partition_data

    ds = make_synthetic_dataset(args.task, args.size, args.seed, seq_len=args.seq_len)
    arrays = {"x": ds.x, "y": ds.y, "groups": ds.groups}
    if args.clients:
        for shard in partition_data(ds, args.clients, args.scheme, args.alpha, args.seed):
            arrays[f"shard_{shard.client}"] = shard.indices
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        np.savez(fh, **arrays)
    print(json.dumps({"out": str(out), "examples": len(ds), **{k: v for k, v in ds.meta.items()}}))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors also go to stderr as one JSON line."""

    def error(self, message):
        self.print_usage(sys.stderr)
        _error("UsageError", message, prog=self.prog)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedcybgd", description="Federated cyclic block training simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", help="YAML experiment config")
    r.add_argument("--seed", type=int)
    r.add_argument("--output-dir")
    r.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, dotted keys allowed")
    r.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="aggregate cost tables across runs")
    rep.add_argument("runs", nargs="+", help="run directories or cost_report.json files")
    rep.add_argument("--json", help="also write the merged table as JSON")
    rep.set_defaults(func=_cmd_report)

    v = sub.add_parser("verify", help="run the built-in invariant and oracle checks")
    v.add_argument("--only", action="append", help="run only the named check (repeatable)")
    v.set_defaults(func=_cmd_verify)

    g = sub.add_parser("gen-data", help="materialize a synthetic dataset as .npz")
    g.add_argument("--task", choices=["char-lm", "cluster-classify"], default="char-lm")
    g.add_argument("--size", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seq-len", type=int, default=16)
    g.add_argument("--clients", type=int, default=0)
    g.add_argument("--scheme", choices=["iid", "dirichlet"], default="iid")
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        _error("ConfigError", "invalid configuration", problems=e.problems)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError) as e:
        _error(type(e).__name__, str(e))
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
