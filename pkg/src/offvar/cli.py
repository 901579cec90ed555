"""Command-line entry point: ``offvar <subcommand> [flags]``.

Exit codes: 0 success, 1 input error (bad flags, unreadable or invalid data),
2 internal error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .bootstrap import BootstrapConfig, bootstrap_interval
from .bounds import hcove_interval
from .core import Dataset, OffVarError, SeededRng
from .envs import ENVIRONMENTS, load_environment, load_policy, mix_behavior, oracle_moments, sample_dataset
from .estimators import ESTIMATORS
from .harness import METHODS, POINT_METHODS, ExperimentConfig, run_coverage, run_estimator_comparison, table_csv

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2

_SCHEMA = """\
environments: {envs} or a JSON config path
trajectory files: JSON lines, one episode per line:
  {{"steps": [{{"s": 0, "a": 1, "b_prob": 0.5, "r": 1.0}}, ...]}}
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, *, data: bool = False) -> None:
    p.add_argument("--env", default="gridworld", help="environment name or JSON config")
    p.add_argument("--policy", default="near_optimal", help="evaluation policy name or JSON file")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--seed", type=int, default=0)
    if data:
        p.add_argument("--data", required=True, help="trajectory JSONL file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="offvar", description="Off-policy estimates and intervals for the variance of returns.",
                     epilog=_SCHEMA.format(envs=", ".join(ENVIRONMENTS)),
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="sample behavior-policy episodes to JSONL")
    _common(p)
    p.add_argument("--alpha", type=float, default=0.5, help="behavior = alpha*pi + (1-alpha)*uniform")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--out", help="output path (default stdout)")

    p = sub.add_parser("estimate", help="point estimates from a trajectory file")
    _common(p, data=True)
    p.add_argument("--method", nargs="+", choices=POINT_METHODS, default=list(POINT_METHODS))
    p.add_argument("--clip", action=argparse.BooleanOptionalAction, default=False,
                   help="also cap the clipped value at the Popoviciu bound")

    p = sub.add_parser("bound", help="high-confidence concentration interval")
    _common(p, data=True)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--clip", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--strict", action="store_true", help="fail instead of falling back when n < 40")

    p = sub.add_parser("bootstrap", help="percentile bootstrap interval")
    _common(p, data=True)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--bootstrap-b", type=int, default=1000)
    p.add_argument("--method", choices=("double_sampled", "variance_reduced"), default="variance_reduced")
    p.add_argument("--clip", action=argparse.BooleanOptionalAction, default=False)

    p = sub.add_parser("oracle", help="exact moments of the return under the evaluation policy")
    _common(p)

    for name, helptext in (("coverage", "repeated-trial interval coverage"),
                           ("compare", "estimator mean and spread per n")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--alpha", type=float, default=0.5)
        p.add_argument("--n", type=int, nargs="+", default=[50, 200, 1000, 2000, 10000])
        p.add_argument("--trials", type=int, default=100)
        p.add_argument("--delta", type=float, default=0.05)
        p.add_argument("--method", nargs="+", choices=METHODS, default=None)
        p.add_argument("--bootstrap-b", type=int, default=1000)
        p.add_argument("--clip", action=argparse.BooleanOptionalAction, default=False)
        p.add_argument("--out", help="output directory (coverage) or file (compare)")
        p.add_argument("--jobs", type=int, default=1)
        if name == "compare":
            p.add_argument("--exhaustive", action="store_true", help="enumerate every dataset instead of sampling")
    return parser


def _emit(rows: list[dict], fmt: str, out=None) -> None:
    out = out or sys.stdout
    if fmt == "json":
        out.write(json.dumps(rows if len(rows) != 1 else rows[0], indent=1) + "\n")
        return
    w = csv.writer(out, lineterminator="\n")
    w.writerow(list(rows[0]))
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])


def _load(args):
    mdp = load_environment(args.env)
    return mdp, load_policy(mdp, args.policy)


def _iv_row(iv, method) -> dict:
    return {"method": method, "lower": iv.lower, "upper": iv.upper, "delta": iv.delta, "degenerate": iv.degenerate}


def _cmd_simulate(args) -> None:
    mdp, pi = _load(args)
    data = sample_dataset(mdp, mix_behavior(pi, args.alpha), args.n, SeededRng(args.seed))
    if args.out:
        data.to_jsonl(args.out)
    else:
        for t in data.trajectories:
            sys.stdout.write(t.to_json() + "\n")


def _cmd_estimate(args) -> None:
    mdp, pi = _load(args)
    data = Dataset.from_jsonl(args.data, mdp.spec)
    rows = []
    for m in args.method:
        est = ESTIMATORS[m](data, pi, popoviciu=args.clip)
        rows.append({"method": m, "raw": est.raw, "clipped": est.clipped, "n": est.n})
    _emit(rows, args.format)


def _cmd_bound(args) -> None:
    mdp, pi = _load(args)
    data = Dataset.from_jsonl(args.data, mdp.spec)
    iv = hcove_interval(data, pi, args.delta, rng=SeededRng(args.seed), clip=args.clip, strict=args.strict)
    _emit([_iv_row(iv, "hcove_ci")], args.format)


def _cmd_bootstrap(args) -> None:
    mdp, pi = _load(args)
    data = Dataset.from_jsonl(args.data, mdp.spec)
    cfg = BootstrapConfig(args.bootstrap_b, args.delta, args.seed)
    iv = bootstrap_interval(data, pi, cfg, args.method, clip=args.clip)
    _emit([_iv_row(iv, "bootstrap")], args.format)


def _cmd_oracle(args) -> None:
    mdp, pi = _load(args)
    _emit([asdict(oracle_moments(mdp, pi))], args.format)


def _experiment(args) -> ExperimentConfig:
    return ExperimentConfig(env=args.env, policy=args.policy, alpha=args.alpha, n_grid=tuple(args.n),
                            trials=args.trials, delta=args.delta,
                            methods=tuple(args.method) if args.method else
                            (METHODS if args.command == "coverage" else POINT_METHODS),
                            bootstrap_b=args.bootstrap_b, seed=args.seed, clip=args.clip, out=args.out)


def _cmd_coverage(args) -> None:
    report = run_coverage(_experiment(args), jobs=args.jobs)
    sys.stdout.write(report.summary_csv() if args.format == "csv" else json.dumps(report.summary, indent=1) + "\n")


def _cmd_compare(args) -> None:
    table = run_estimator_comparison(_experiment(args), exhaustive=args.exhaustive)
    text = table_csv(table) if args.format == "csv" else json.dumps(table, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


COMMANDS = {"simulate": _cmd_simulate, "estimate": _cmd_estimate, "bound": _cmd_bound,
            "bootstrap": _cmd_bootstrap, "oracle": _cmd_oracle, "coverage": _cmd_coverage,
            "compare": _cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n\n{parser.epilog}")
        return EXIT_INPUT
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INPUT
    try:
        COMMANDS[args.command](args)
    except (OffVarError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        sys.stderr.write(f"offvar {args.command}: error: {exc}\n")
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(f"offvar {args.command}: internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_INTERNAL
    return EXIT_OK
