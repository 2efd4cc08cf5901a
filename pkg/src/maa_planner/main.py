import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

from maa_planner.maa_bench import (fixture_dir, load_suite, make_config, missing_models,
                                   resolve_model, run_suite)
from maa_planner.maa_heuristics import DEFAULT_ABORT_CAP, RevealVariant
from maa_planner.maa_model import ModelError
from maa_planner.maa_parser import load_dpomdp
from maa_planner.maa_records import RunRecord, render
from maa_planner.maa_search import DEFAULT_MEMORY_LIMIT, SearchLimitError, solve
from maa_planner.maa_tree import ExpansionBudgetError
from maa_planner.maa_verify import Check, run_check

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_TIMEOUT = 2
EXIT_LIMIT = 3
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_NO_INPUT = 66


class ArgumentParser(argparse.ArgumentParser):
    "Usage errors exit with 64."

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return value


def setup_logging(debug: bool):
    LOG_LEVEL = "DEBUG" if debug else "INFO"
    # Force debug loggging level when run in VS Code debug mode
    if "PYDEVD_USE_FRAME_EVAL" in os.environ:
        LOG_LEVEL = "DEBUG"
    FORMAT = "[%(filename)s:%(lineno)s %(funcName)s] %(message)s"
    logging.basicConfig(format=FORMAT, level=LOG_LEVEL)

    config = configparser.ConfigParser()
    if config.read('conf/logging_config.toml'):
        for logger_name, level in config["levels"].items():
            logging.getLogger(logger_name).setLevel(level.upper())


def write_output(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


def cmd_solve(args: argparse.Namespace) -> int:
    try:
        config = make_config(
            mode=args.mode, window=args.window, limit=args.limit, heuristic=args.heuristic,
            r=args.r, variant=args.variant, abort_cap=args.abort_cap, pmax=args.pmax,
            cluster_mode=args.cluster_mode, progress=args.progress, time_limit=args.time_limit,
            memory_limit=args.memory_limit, lower_bound=args.lower_bound)
    except ValueError as e:
        log.error("%s", e)
        return EXIT_USAGE
    path = resolve_model(args.model)
    try:
        model = load_dpomdp(path)
        result = solve(model, args.horizon, config)
    except FileNotFoundError as e:
        log.error("%s", e)
        return EXIT_NO_INPUT
    except ModelError as e:
        log.error("%s: %s", path, e)
        return EXIT_DATA
    except (SearchLimitError, ExpansionBudgetError) as e:
        log.error("%s", e)
        return EXIT_LIMIT
    record = RunRecord(model.name, args.horizon, config, result)
    write_output(render([record], args.format), args.out)
    if args.policy_out is not None and result.best_policy is not None:
        result.best_policy.save_to_file(args.policy_out)
    return EXIT_TIMEOUT if result.hit_limit else EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        rows = load_suite(args.suite)
    except FileNotFoundError as e:
        log.error("%s", e)
        return EXIT_NO_INPUT
    except (ValueError, configparser.Error) as e:
        log.error("%s: %s", args.suite, e)
        return EXIT_DATA
    missing = missing_models(rows)
    if missing:
        for path in missing:
            log.error("missing model file %s", path)
        return EXIT_NO_INPUT
    try:
        records = run_suite(rows, jobs=args.jobs, progress=not args.quiet)
    except ModelError as e:
        log.error("%s", e)
        return EXIT_DATA
    write_output(render(records, args.format), args.out)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    if args.all:
        paths = sorted(fixture_dir().glob("*.dpomdp"))
    elif args.model:
        paths = [resolve_model(it) for it in args.model]
    else:
        log.error("verify needs --model or --all")
        return EXIT_USAGE
    checks = [Check(it) for it in args.check] if args.check else list(Check)
    failures = 0
    for path in paths:
        try:
            model = load_dpomdp(path)
        except FileNotFoundError as e:
            log.error("%s", e)
            return EXIT_NO_INPUT
        except ModelError as e:
            log.error("%s: %s", path, e)
            return EXIT_DATA
        for check in checks:
            outcome = run_check(check, model.name, model, args.horizon, args.window, args.seed,
                                args.r, RevealVariant(args.variant))
            print(outcome)
            failures += not outcome.passed
    return EXIT_VERIFY_FAILED if failures else EXIT_OK


def build_parser() -> ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--debug', action='store_true')

    parser = ArgumentParser(prog="maa-planner",
                            description="Policies and upper bounds for finite-horizon Dec-POMDPs")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    cmd = commands.add_parser("solve", parents=[common], help="solve one instance")
    cmd.add_argument("--model", required=True)
    cmd.add_argument("--horizon", type=positive_int, required=True)
    cmd.add_argument("--mode", choices=("policy", "upper"), default="policy")
    cmd.add_argument("--window", type=positive_int)
    cmd.add_argument("--limit", type=positive_int, default=1000)
    cmd.add_argument("--heuristic", choices=("maxr", "mdp", "tr"), default="mdp")
    cmd.add_argument("--r", type=positive_int, default=2)
    cmd.add_argument("--variant", choices=("at_r", "at_r1"), default="at_r1")
    cmd.add_argument("--abort-cap", type=positive_int, default=DEFAULT_ABORT_CAP)
    cmd.add_argument("--pmax", type=float)
    cmd.add_argument("--cluster-mode", choices=("none", "possible", "lossless"),
                     default="lossless")
    cmd.add_argument("--progress", choices=("prog", "uniform"), default="prog")
    cmd.add_argument("--time-limit", type=float)
    cmd.add_argument("--memory-limit", type=positive_int, default=DEFAULT_MEMORY_LIMIT)
    cmd.add_argument("--lower-bound", type=float)
    cmd.add_argument("--format", choices=("json", "csv", "text"), default="json")
    cmd.add_argument("--out", type=Path)
    cmd.add_argument("--policy-out", type=Path)
    cmd.set_defaults(handler=cmd_solve)

    cmd = commands.add_parser("bench", parents=[common], help="run a benchmark suite")
    cmd.add_argument("suite", type=Path)
    cmd.add_argument("--jobs", type=positive_int, default=1)
    cmd.add_argument("--format", choices=("json", "csv", "text"), default="csv")
    cmd.add_argument("--out", type=Path)
    cmd.add_argument("--quiet", action="store_true", help="no progress bar")
    cmd.set_defaults(handler=cmd_bench)

    cmd = commands.add_parser("verify", parents=[common], help="cross-check the solvers")
    cmd.add_argument("--check", action="append", choices=[it.value for it in Check])
    cmd.add_argument("--model", action="append")
    cmd.add_argument("--all", action="store_true")
    cmd.add_argument("--horizon", type=positive_int, default=2)
    cmd.add_argument("--window", type=positive_int)
    cmd.add_argument("--r", type=positive_int, default=2)
    cmd.add_argument("--variant", choices=("at_r", "at_r1"), default="at_r1")
    cmd.add_argument("--seed", type=int, default=0)
    cmd.set_defaults(handler=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.debug)
    return args.handler(args)


if __name__ == '__main__':
    sys.exit(main())
