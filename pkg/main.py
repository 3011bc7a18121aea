import argparse
import logging
import sys

from core.config import parse_config
from core.errors import SelectaFlowError
from core.experiment import emit_rate_fit, run_experiment
from core.metadata import APP_METADATA
from core.schedules import power_schedule, rate_schedule, validate_averaging
from utils.performance import perf_monitor


logger = logging.getLogger("selectaflow")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selectaflow", description=APP_METADATA["description"])
    parser.add_argument("--version", action="version", version=f"{APP_METADATA['name']} {APP_METADATA['version']}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    run_cmd = commands.add_parser("run", help="run the sample paths described by a config file")
    run_cmd.add_argument("config")
    run_cmd.add_argument("--option", action="append", default=[], metavar="SECTION.KEY=VALUE",
                         help="override a config value (repeatable)")
    run_cmd.add_argument("--seed", type=int)
    run_cmd.add_argument("--paths", type=int)
    run_cmd.add_argument("--iterations", type=int)
    run_cmd.add_argument("--wall-clock", metavar="DURATION", help="e.g. 250, 250s, 4m or 00:04:10.000")
    run_cmd.add_argument("--workers", type=int)
    run_cmd.add_argument("--output")
    run_cmd.add_argument("--override-validation", action="store_true")

    fit_cmd = commands.add_parser("fit", help="fit log(gap) against log(k) on an aggregate CSV")
    fit_cmd.add_argument("aggregate")
    fit_cmd.add_argument("--column", default="f_gap_mean")

    validate_cmd = commands.add_parser("validate", help="report the schedule conditions")
    validate_cmd.add_argument("--delta", type=float)
    validate_cmd.add_argument("--a", type=float)
    validate_cmd.add_argument("--b", type=float)
    validate_cmd.add_argument("--gamma0", type=float, default=1.0)
    validate_cmd.add_argument("--lambda0", type=float, default=1.0)
    validate_cmd.add_argument("-r", type=float, default=0.0)
    return parser


def collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    overrides = {}
    for item in args.option:
        key, sep, value = item.partition("=")
        if not sep:
            raise SelectaFlowError(f"--option {item!r} must look like section.key=value.")
        overrides[key.strip()] = value.strip()
    flags = {
        "run.seed": args.seed,
        "run.paths": args.paths,
        "run.workers": args.workers,
        "run.output": args.output,
    }
    overrides.update({key: str(value) for key, value in flags.items() if value is not None})
    # a budget flag replaces whichever budget the file declared
    if args.iterations is not None:
        overrides["run.iterations"] = str(args.iterations)
        overrides["run.wall_clock"] = None
    if args.wall_clock is not None:
        overrides["run.wall_clock"] = args.wall_clock
        overrides["run.iterations"] = None
    return overrides


def command_run(args) -> int:
    overrides = collect_overrides(args)
    removals = [key for key, value in overrides.items() if value is None]
    config = parse_config(
        args.config,
        {key: value for key, value in overrides.items() if value is not None},
        args.override_validation,
        removals,
    )
    result = run_experiment(config)
    logger.info("Wrote results to %s", result.output)
    perf_monitor.summary()
    return result.exit_status


def command_fit(args) -> int:
    slope, intercept = emit_rate_fit(args.aggregate, args.column)
    print(f"slope = {slope:.6g}")
    print(f"intercept = {intercept:.6g}")
    return 0


def command_validate(args) -> int:
    if args.delta is not None:
        schedule = rate_schedule(args.delta, args.gamma0, args.lambda0, args.r)
    elif args.a is not None and args.b is not None:
        schedule = power_schedule(args.gamma0, args.lambda0, args.a, args.b, args.r)
    else:
        raise SelectaFlowError("validate needs --delta or both --a and --b.")
    for report in schedule.reports + (validate_averaging(schedule),):
        print(report.format())
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    handlers = {"run": command_run, "fit": command_fit, "validate": command_validate}
    try:
        return handlers[args.command](args)
    except (SelectaFlowError, FileNotFoundError, ValueError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
