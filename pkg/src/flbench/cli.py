"""Command-line entry point: ``flbench run|partition|report|fixtures``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import parse_config
from .data import SCHEMAS
from .errors import ConfigError, FlbenchError
from .fixtures import write_fixture_csv
from .harness import prepare, report, run_experiment

log = logging.getLogger("flbench")

KIND_ALIASES = {k.lower(): k for k in SCHEMAS}
DEFAULT_FIXTURE_N = {"AI4I2020": 2000, "Scania": 2000, "HardDrive": 2000, "FLADI-like": 4281,
                     "Synthetic": 1000}


def _kind(value: str) -> str:
    try:
        return KIND_ALIASES[value.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown kind {value!r}; choose from {sorted(KIND_ALIASES)}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flbench", description="Deterministic federated learning benchmark harness.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per round")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a YAML config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", type=Path, help="output directory (default: the config's output key)")
    run.add_argument("--jobs", type=int, default=1, help="client threads; results do not depend on it")

    part = sub.add_parser("partition", help="write the client partition plan as JSON")
    part.add_argument("--config", required=True, type=Path)
    part.add_argument("--out", required=True, type=Path)

    rep = sub.add_parser("report", help="pivot result files into a table")
    rep.add_argument("--glob", action="append", dest="globs", help="result file pattern (repeatable)")
    rep.add_argument("--format", choices=("text", "csv"), default="text")
    rep.add_argument("--metric", choices=("fbeta", "fairness"), default="fbeta")

    fix = sub.add_parser("fixtures", help="write a synthetic CSV laid out like a real dataset")
    fix.add_argument("--kind", required=True, type=_kind)
    fix.add_argument("--out", required=True, type=Path, help="CSV path, or a directory")
    fix.add_argument("--n", type=int)
    fix.add_argument("--d", type=int)
    fix.add_argument("--pos-rate", type=float, default=0.2)
    fix.add_argument("--seed", type=int, default=0)
    return p


def _run(args) -> int:
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    cfg = parse_config(args.config)
    res = run_experiment(cfg, args.out, jobs=args.jobs)
    print(f"{cfg.name}: fbeta={res.record['fbeta']:.4f} best_round={res.record['best_round']} "
          f"-> {res.result_path}")
    return 0


def _partition(args) -> int:
    cfg = parse_config(args.config)
    plan = prepare(cfg).plan
    args.out.parent.mkdir(parents=True, exist_ok=True)
    plan.save(args.out)
    print(f"{plan.scheme}: {plan.num_clients} clients, sizes {plan.sizes()} -> {args.out}")
    return 0


def _report(args) -> int:
    sys.stdout.write(report(args.globs or ["results/*.result.json"], args.format, args.metric))
    return 0


def _fixtures(args) -> int:
    out = args.out
    if out.is_dir() or not out.suffix:
        out = out / f"{args.kind.lower()}.csv"
    n = args.n or DEFAULT_FIXTURE_N[args.kind]
    path = write_fixture_csv(out, args.kind, n, args.d, args.pos_rate, args.seed)
    print(path)
    return 0


COMMANDS = {"run": _run, "partition": _partition, "report": _report, "fixtures": _fixtures}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FlbenchError as exc:
        print(f"flbench: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # unexpected failures still map to the generic code
        print(f"flbench: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return FlbenchError.exit_code


if __name__ == "__main__":
    sys.exit(main())
