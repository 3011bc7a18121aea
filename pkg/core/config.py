"""
Run configuration files.

A run file is INI-style text with five sections. Keys not listed here are
rejected so typos surface early.

[problem]
    kind            least-squares | hinge | two-stage | synthetic-least-squares
                    | synthetic-hinge | quadratic
    matrix, rhs     dense CSV files (least-squares)
    data            sparse "label idx:val" file (hinge); n_features optional
    file            JSON two-stage problem (two-stage)
    rows, cols, rank, seed                      synthetic-least-squares
    examples, features, density, keywords, seed synthetic-hinge
    weights, center comma lists (quadratic)
    deterministic   use exact subgradients instead of sampled ones

[outer]
    kind            elastic-net | quadratic
    mu_h            elastic-net modulus
    weights, center comma lists (quadratic)

[schedule]
    delta           rate schedule, or a and b for a power schedule
    gamma0, lambda0, r
    override        run even when validation fails

[set]               ignored for two-stage problems (boxes come from the file)
    kind            whole-space | box | ball
    lower, upper    scalars or comma lists (box)
    center, radius  (ball)

[run]
    iterations | wall_clock   exactly one of the two
    paths, seed, workers, output
    checkpoints     geometric, or a comma list of iteration counts
    x0              zero | constant:<c> | path to a vector CSV
    evaluation_subsample      hinge loss reporting subsample size
    f_star, h_star  known optimal values
    reference       auto | none
"""
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from core.errors import ConfigError, ScheduleValidationError
from core.geometry import DistanceGenerator, euclidean
from core.schedules import Schedule, check_initial_product, power_schedule, rate_schedule
from core.timecode import parse_duration


logger = logging.getLogger(__name__)

PROBLEM_KINDS = ("least-squares", "hinge", "two-stage", "synthetic-least-squares", "synthetic-hinge", "quadratic")
OUTER_KINDS = ("elastic-net", "quadratic")
SET_KINDS = ("whole-space", "box", "ball")

ALLOWED_KEYS = {
    "problem": {
        "kind", "matrix", "rhs", "data", "n_features", "file", "rows", "cols", "rank", "seed",
        "examples", "features", "density", "keywords", "weights", "center", "deterministic",
    },
    "outer": {"kind", "mu_h", "weights", "center"},
    "schedule": {"delta", "a", "b", "gamma0", "lambda0", "r", "override"},
    "set": {"kind", "lower", "upper", "center", "radius"},
    "run": {
        "iterations", "wall_clock", "paths", "seed", "workers", "output", "checkpoints", "x0",
        "evaluation_subsample", "f_star", "h_star", "reference",
    },
}
PATH_KEYS = {"matrix", "rhs", "data", "file"}


@dataclass(frozen=True, eq=False)
class ProblemConfig:
    kind: str
    options: dict[str, str]
    deterministic: bool = False

    def path(self, key: str) -> Path:
        try:
            return Path(self.options[key])
        except KeyError as exc:
            raise ConfigError(f"[problem] {key} is required for kind {self.kind}.") from exc


@dataclass(frozen=True, eq=False)
class OuterConfig:
    kind: str
    mu_h: float | None
    weights: np.ndarray | None = None
    center: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class SetConfig:
    kind: str
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    center: np.ndarray | None = None
    radius: float | None = None


@dataclass(frozen=True, eq=False)
class RunConfig:
    problem: ProblemConfig
    outer: OuterConfig
    schedule: Schedule
    feasible_set: SetConfig
    iterations: int | None = None
    wall_clock: float | None = None
    paths: int = 1
    seed: int = 0
    workers: int | None = None
    output: Path = Path("results")
    checkpoints: tuple[int, ...] | None = None
    x0: str = "zero"
    evaluation_subsample: int | None = None
    f_star: float | None = None
    h_star: float | None = None
    reference: str = "auto"
    override_validation: bool = False
    dgf: DistanceGenerator = field(default_factory=euclidean)
    source: Path | None = None


def _floats(text: str) -> np.ndarray:
    try:
        return np.array([float(item) for item in text.replace(";", ",").split(",") if item.strip()])
    except ValueError as exc:
        raise ConfigError(f"Expected a comma-separated list of numbers, got {text!r}.") from exc


def _number(section: configparser.SectionProxy, key: str, cast=float, default=None):
    if key not in section:
        return default
    try:
        return cast(section[key])
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key} = {section[key]!r} is not a valid number.") from exc


def _boolean(section: configparser.SectionProxy, key: str) -> bool:
    try:
        return section.getboolean(key, fallback=False)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key} must be a boolean.") from exc


def apply_overrides(parser: configparser.ConfigParser, overrides: dict[str, str]) -> None:
    """Apply "section.key" = value pairs on top of the file contents."""
    for dotted, value in overrides.items():
        section, sep, key = dotted.partition(".")
        if not sep or not key:
            raise ConfigError(f"Override {dotted!r} must look like section.key.")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))


def _check_keys(parser: configparser.ConfigParser) -> None:
    for section in parser.sections():
        if section not in ALLOWED_KEYS:
            raise ConfigError(f"Unknown section [{section}].")
        unknown = set(parser[section]) - ALLOWED_KEYS[section]
        if unknown:
            raise ConfigError(f"Unknown keys in [{section}]: {', '.join(sorted(unknown))}.")


def _resolve_paths(options: dict[str, str], base: Path) -> dict[str, str]:
    resolved = dict(options)
    for key in PATH_KEYS & set(options):
        path = Path(options[key])
        if not path.is_absolute():
            path = base / path
        if not path.is_file():
            raise FileNotFoundError(f"[problem] {key} file {path} does not exist.")
        resolved[key] = str(path)
    return resolved


def _parse_problem(parser, base: Path) -> ProblemConfig:
    if not parser.has_section("problem"):
        raise ConfigError("Missing [problem] section.")
    section = parser["problem"]
    kind = section.get("kind", "").strip()
    if kind not in PROBLEM_KINDS:
        raise ConfigError(f"[problem] kind must be one of {', '.join(PROBLEM_KINDS)}.")
    required = {"least-squares": ("matrix", "rhs"), "hinge": ("data",), "two-stage": ("file",), "quadratic": ("weights",)}
    for key in required.get(kind, ()):
        if key not in section:
            raise ConfigError(f"[problem] {key} is required for kind {kind}.")
    options = {key: value for key, value in section.items() if key not in ("kind", "deterministic")}
    return ProblemConfig(kind, _resolve_paths(options, base), _boolean(section, "deterministic"))


def _parse_outer(parser, problem_kind: str) -> OuterConfig:
    if problem_kind == "two-stage":
        # c and q_i come from the problem file
        return OuterConfig("two-stage", None)
    section = parser["outer"] if parser.has_section("outer") else None
    kind = section.get("kind", "elastic-net") if section is not None else "elastic-net"
    if kind not in OUTER_KINDS:
        raise ConfigError(f"[outer] kind must be one of {', '.join(OUTER_KINDS)}.")
    if kind == "quadratic":
        if section is None or "weights" not in section:
            raise ConfigError("[outer] weights are required for a quadratic outer objective.")
        weights = _floats(section["weights"])
        center = _floats(section["center"]) if "center" in section else np.zeros_like(weights)
        return OuterConfig(kind, 2.0 * float(weights.min()), weights, center)
    mu_h = _number(section, "mu_h") if section is not None else None
    if mu_h is None:
        raise ConfigError("[outer] mu_h is required for the elastic-net objective.")
    if not mu_h > 0:
        raise ConfigError("[outer] mu_h must be positive.")
    return OuterConfig(kind, mu_h)


def _parse_schedule(parser, override: bool) -> Schedule:
    if not parser.has_section("schedule"):
        raise ConfigError("Missing [schedule] section.")
    section = parser["schedule"]
    gamma0 = _number(section, "gamma0", default=1.0)
    lambda0 = _number(section, "lambda0", default=1.0)
    r = _number(section, "r", default=0.0)
    has_delta = "delta" in section
    has_power = "a" in section or "b" in section
    if has_delta == has_power:
        raise ConfigError("[schedule] needs either delta or both a and b.")
    try:
        if has_delta:
            schedule = rate_schedule(_number(section, "delta"), gamma0, lambda0, r)
        else:
            if "a" not in section or "b" not in section:
                raise ConfigError("[schedule] needs both a and b.")
            schedule = power_schedule(gamma0, lambda0, _number(section, "a"), _number(section, "b"), r)
    except ScheduleValidationError as exc:
        raise ConfigError(f"Invalid schedule: {exc}") from exc
    if _boolean(section, "override") or override:
        schedule = replace(schedule, override=True)
    convergence, recursive = schedule.reports
    if not convergence.passed:
        if not schedule.override:
            raise ConfigError(f"Schedule fails the convergence conditions:\n{convergence.format()}")
        logger.warning("Schedule fails the convergence conditions; continuing under override.\n%s",
                       convergence.format())
    if not recursive.passed:
        logger.info("Recursive-bound diagnostics do not apply to this schedule.\n%s", recursive.format())
    return schedule


def _parse_set(parser, problem_kind: str) -> SetConfig:
    if problem_kind == "two-stage":
        if parser.has_section("set"):
            logger.warning("[set] is ignored for two-stage problems; boxes come from the problem file.")
        return SetConfig("box")
    if not parser.has_section("set"):
        return SetConfig("whole-space")
    section = parser["set"]
    kind = section.get("kind", "whole-space")
    if kind not in SET_KINDS:
        raise ConfigError(f"[set] kind must be one of {', '.join(SET_KINDS)}.")
    if kind == "box":
        if "lower" not in section or "upper" not in section:
            raise ConfigError("[set] box needs lower and upper.")
        return SetConfig(kind, lower=_floats(section["lower"]), upper=_floats(section["upper"]))
    if kind == "ball":
        if "radius" not in section:
            raise ConfigError("[set] ball needs a radius.")
        center = _floats(section["center"]) if "center" in section else None
        return SetConfig(kind, center=center, radius=_number(section, "radius"))
    return SetConfig(kind)


def parse_config(
    path: str | Path,
    overrides: dict[str, str] | None = None,
    override_validation: bool = False,
    removals: list[str] | None = None,
) -> RunConfig:
    file_path = Path(path)
    if not file_path.is_file():
        raise FileNotFoundError(f"Config file {file_path} does not exist.")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(file_path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"Config file {file_path} is malformed: {exc}") from exc
    apply_overrides(parser, overrides or {})
    for dotted in removals or ():
        section, _, key = dotted.partition(".")
        if parser.has_section(section):
            parser.remove_option(section, key)
    _check_keys(parser)

    problem = _parse_problem(parser, file_path.parent)
    outer = _parse_outer(parser, problem.kind)
    schedule = _parse_schedule(parser, override_validation)
    feasible_set = _parse_set(parser, problem.kind)
    run = parser["run"] if parser.has_section("run") else parser[configparser.DEFAULTSECT]

    iterations = _number(run, "iterations", int)
    wall_clock = None
    if "wall_clock" in run:
        try:
            wall_clock = parse_duration(run["wall_clock"])
        except ValueError as exc:
            raise ConfigError(f"[run] wall_clock: {exc}") from exc
    if (iterations is None) == (wall_clock is None):
        raise ConfigError("[run] needs exactly one of iterations and wall_clock.")
    if iterations is not None and iterations < 1:
        raise ConfigError("[run] iterations must be at least 1.")
    paths = _number(run, "paths", int, 1)
    if paths < 1:
        raise ConfigError("[run] paths must be at least 1.")

    checkpoints = None
    if run.get("checkpoints", "geometric").strip() != "geometric":
        checkpoints = tuple(int(k) for k in _floats(run["checkpoints"]))
    x0 = run.get("x0", "zero").strip()
    if x0 != "zero" and not x0.startswith("constant:"):
        x0_path = Path(x0) if Path(x0).is_absolute() else file_path.parent / x0
        if not x0_path.is_file():
            raise FileNotFoundError(f"[run] x0 file {x0_path} does not exist.")
        x0 = str(x0_path)
    reference = run.get("reference", "auto")
    if reference not in ("auto", "none"):
        raise ConfigError("[run] reference must be auto or none.")
    output = Path(run.get("output", "results"))
    if not output.is_absolute():
        output = file_path.parent / output

    config = RunConfig(
        problem=problem,
        outer=outer,
        schedule=schedule,
        feasible_set=feasible_set,
        iterations=iterations,
        wall_clock=wall_clock,
        paths=paths,
        seed=_number(run, "seed", int, 0),
        workers=_number(run, "workers", int),
        output=output,
        checkpoints=checkpoints,
        x0=x0,
        evaluation_subsample=_number(run, "evaluation_subsample", int),
        f_star=_number(run, "f_star"),
        h_star=_number(run, "h_star"),
        reference=reference,
        override_validation=schedule.override,
        source=file_path,
    )
    check_run_precondition(config)
    return config


def check_run_precondition(config: RunConfig) -> None:
    """Refuse gamma0 * lambda0 > L_omega / mu_h unless validation is overridden."""
    s = config.schedule
    if config.outer.mu_h is None:
        return
    if check_initial_product(s, config.dgf.lipschitz, config.outer.mu_h):
        return
    message = (
        f"gamma0 * lambda0 = {s.gamma0 * s.lambda0:g} exceeds "
        f"L_omega / mu_h = {config.dgf.lipschitz / config.outer.mu_h:g}."
    )
    if config.override_validation:
        logger.warning("%s Continuing because validation is overridden.", message)
        return
    raise ConfigError(message)
