"""Command-line entry point: run, cost, verify.

Exit codes: 0 success, 1 config error, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

from .costs import CostInputs, analytic_costs, cost_table_csv, format_cost_table
from .errors import ConfigError, InvalidInputs, SplitFedError
from .runner import RunConfig, config_from_values, parse_config_file, run
from .verify import SUITES, run_suite


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file; flags override it")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, dest=f.name, default=None, choices=["0", "1"],
                                help=f"(default {f.default})")
        else:
            parser.add_argument(flag, dest=f.name, default=None, help=f"(default {f.default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitfed")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one training run and write metrics")
    _add_run_flags(run_p)

    cost_p = sub.add_parser("cost", help="print the analytic cost table")
    cost_p.add_argument("--clients", type=int, required=True)
    cost_p.add_argument("--data-size", type=float, required=True)
    cost_p.add_argument("--smashed-size", type=float, required=True)
    cost_p.add_argument("--param-count", type=float, required=True)
    cost_p.add_argument("--client-fraction", type=float, required=True)
    cost_p.add_argument("--train-time", type=float, default=1.0)
    cost_p.add_argument("--wait-time", type=float, default=0.0)
    cost_p.add_argument("--csv", action="store_true", help="emit CSV instead of the aligned table")

    verify_p = sub.add_parser("verify", help="run a verification suite")
    verify_p.add_argument("suite", choices=list(SUITES))
    return parser


def _run_command(args) -> int:
    values = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for f in fields(RunConfig):
        supplied = getattr(args, f.name, None)
        if supplied is not None:
            values[f.name] = supplied
    cfg = config_from_values(values)
    result = run(cfg)
    last = result.rounds[-1]
    print(
        f"{cfg.algo}: {cfg.global_epochs} global epochs, "
        f"final mean train acc {last.mean_train_acc:.4f}, "
        f"test acc {last.mean_test_acc:.4f}; metrics -> {cfg.out}"
    )
    return 0


def _cost_command(args) -> int:
    inputs = CostInputs(
        clients=args.clients,
        data_size=args.data_size,
        smashed_size=args.smashed_size,
        param_count=args.param_count,
        client_fraction=args.client_fraction,
        train_time=args.train_time,
        wait_time=args.wait_time,
    )
    table = analytic_costs(inputs)
    if args.csv:
        print(cost_table_csv(table))
    else:
        print(format_cost_table(inputs, table))
    return 0


def _verify_command(args) -> int:
    passed, lines = run_suite(args.suite)
    for line in lines:
        print(line)
    print(f"suite {args.suite}: {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 3


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _run_command(args)
        if args.command == "cost":
            return _cost_command(args)
        return _verify_command(args)
    except (ConfigError, InvalidInputs) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SplitFedError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
