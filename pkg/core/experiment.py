"""
Experiment harness: builds the problem a RunConfig describes, runs the seeded
sample paths (in a process pool when more than one worker is available),
writes per-path traces, the aggregate table, plot data and a summary.
"""
from __future__ import annotations

import logging
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from core import data_io, synthetic, twostage
from core.config import RunConfig, SetConfig
from core.errors import ConfigError
from core.geometry import FeasibleSet, ball, box, whole_space
from core.metadata import APP_METADATA
from core.oracles import (
    BilevelProblem, HingeOracle, LeastSquaresOracle, SampleSource, StochasticOracle,
    make_elastic_net, make_problem, make_quadratic, mean_hinge_loss,
)
from core.reference import (
    enumerate_two_stage, solve_bilevel_bruteforce, solve_inner, solve_selection_least_squares,
)
from core.solver import run
from core.timecode import format_elapsed
from utils.performance import available_workers, perf_monitor


logger = logging.getLogger(__name__)

SELECTION_QP_MAX_DIMENSION = 200
BRUTEFORCE_MAX_DIMENSION = 3
BRUTEFORCE_STEPS = 200
TWO_STAGE_GRID_RESOLUTION = 0.05
MIN_FIT_POINTS = 4


@dataclass(eq=False)
class ExperimentSetup:
    problem: BilevelProblem
    x0: np.ndarray
    compiled: twostage.CompiledBilevel | None = None

    @property
    def feasible_set(self) -> FeasibleSet:
        return self.problem.feasible_set


@dataclass(frozen=True)
class References:
    f_star: float | None
    h_star: float | None
    f_source: str
    h_source: str


@dataclass(eq=False)
class PathResult:
    index: int
    seed: int
    trace: pd.DataFrame | None = None
    x_bar: np.ndarray | None = None
    iterations: int = 0
    stopped_by: str = ""
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass(eq=False)
class ExperimentResult:
    exit_status: int
    output: Path
    summary: dict
    aggregate: pd.DataFrame
    paths: list[PathResult] = field(default_factory=list)


def build_feasible_set(set_config: SetConfig, dimension: int) -> FeasibleSet:
    if set_config.kind == "box":
        return box(set_config.lower, set_config.upper, dimension)
    if set_config.kind == "ball":
        center = np.zeros(dimension) if set_config.center is None else set_config.center
        return ball(np.broadcast_to(center, (dimension,)), set_config.radius)
    return whole_space(dimension)


def build_inner(config: RunConfig) -> StochasticOracle:
    problem = config.problem
    options = problem.options
    try:
        if problem.kind == "least-squares":
            return LeastSquaresOracle(data_io.load_dense_matrix(problem.path("matrix")), data_io.load_vector(problem.path("rhs")))
        if problem.kind == "synthetic-least-squares":
            A, b = synthetic.make_rank_deficient_least_squares(
                int(options.get("rows", 20)), int(options.get("cols", 5)),
                int(options.get("rank", 3)), int(options.get("seed", 0)),
            )
            return LeastSquaresOracle(A, b)
        if problem.kind == "hinge":
            n_features = int(options["n_features"]) if "n_features" in options else None
            return HingeOracle(*data_io.load_sparse_labeled(problem.path("data"), n_features))
        if problem.kind == "synthetic-hinge":
            A, labels = synthetic.make_sparse_classification(
                int(options.get("examples", 5000)), int(options.get("features", 1000)),
                float(options.get("density", 0.01)), int(options.get("keywords", 10)),
                int(options.get("seed", 0)),
            )
            return HingeOracle(A, labels)
        if problem.kind == "quadratic":
            weights = np.array([float(v) for v in options["weights"].split(",")])
            center = np.array([float(v) for v in options["center"].split(",")]) if "center" in options else None
            return make_quadratic(weights, center)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"Cannot build the {problem.kind} problem: {exc}") from exc
    raise ConfigError(f"Problem kind {problem.kind} has no single inner oracle.")


def build_outer(config: RunConfig, dimension: int) -> StochasticOracle:
    outer = config.outer
    if outer.kind == "quadratic":
        weights = np.broadcast_to(outer.weights, (dimension,))
        return make_quadratic(weights, np.broadcast_to(outer.center, (dimension,)))
    return make_elastic_net(outer.mu_h, dimension)


def resolve_x0(policy: str, dimension: int) -> np.ndarray:
    if policy == "zero":
        return np.zeros(dimension)
    if policy.startswith("constant:"):
        try:
            return np.full(dimension, float(policy.split(":", 1)[1]))
        except ValueError as exc:
            raise ConfigError(f"Invalid x0 policy {policy!r}.") from exc
    x0 = data_io.load_vector(policy)
    if x0.size != dimension:
        raise ConfigError(f"x0 file has {x0.size} entries, expected {dimension}.")
    return x0


def build_problem(config: RunConfig) -> ExperimentSetup:
    perf_monitor.start_timing("load problem")
    deterministic = config.problem.deterministic
    if config.problem.kind == "two-stage":
        compiled = twostage.compile(twostage.load_two_stage(config.problem.path("file")), deterministic)
        setup = ExperimentSetup(compiled.problem, resolve_x0(config.x0, compiled.dimension), compiled)
    else:
        inner = build_inner(config)
        dimension = inner.dimension
        feasible_set = build_feasible_set(config.feasible_set, dimension)
        outer = build_outer(config, dimension)
        problem = make_problem(inner, outer, feasible_set, name=config.problem.kind, deterministic=deterministic)
        setup = ExperimentSetup(problem, resolve_x0(config.x0, dimension))
    perf_monitor.end_timing("load problem", f"- dimension {setup.problem.dimension}")
    return setup


def compute_references(config: RunConfig, setup: ExperimentSetup) -> References:
    """Config values first, then reference solves, then declared lower bounds."""
    f_star, f_source = config.f_star, "config" if config.f_star is not None else ""
    h_star, h_source = config.h_star, "config" if config.h_star is not None else ""
    if f_star is not None and h_star is not None:
        return References(f_star, h_star, f_source, h_source)

    problem = setup.problem
    solved_f = solved_h = None
    method = ""
    if config.reference == "auto":
        perf_monitor.start_timing("reference solve")
        solved_f, solved_h, method = _reference_solve(config, setup)
        perf_monitor.end_timing("reference solve", f"- {method or 'none'}")

    if f_star is None:
        if solved_f is not None:
            f_star, f_source = solved_f, method
        elif problem.inner.lower_bound is not None:
            f_star, f_source = problem.inner.lower_bound, "lower-bound"
        else:
            f_source = "unavailable"
    if h_star is None:
        if solved_h is not None:
            h_star, h_source = solved_h, method
        elif problem.outer.lower_bound is not None:
            h_star, h_source = problem.outer.lower_bound, "lower-bound"
        else:
            h_source = "unavailable"
    return References(f_star, h_star, f_source, h_source)


def _reference_solve(config: RunConfig, setup: ExperimentSetup):
    problem = setup.problem
    feasible_set = problem.feasible_set
    if setup.compiled is not None:
        spec = setup.compiled.spec
        if setup.compiled.dimension <= BRUTEFORCE_MAX_DIMENSION:
            grid = enumerate_two_stage(spec, TWO_STAGE_GRID_RESOLUTION)
            return 0.0, grid.value, "grid-enumeration"
        return None, None, ""
    inner = problem.inner
    if (
        isinstance(inner, LeastSquaresOracle)
        and config.outer.kind == "elastic-net"
        and problem.dimension <= SELECTION_QP_MAX_DIMENSION
        and feasible_set.kind.value in ("box", "whole-space")
    ):
        solution = solve_selection_least_squares(inner.A, inner.b, config.outer.mu_h, feasible_set)
        return solution.f_star, solution.h_star if solution.success else None, "selection-qp"
    if problem.dimension <= BRUTEFORCE_MAX_DIMENSION and feasible_set.is_compact:
        lower, upper = feasible_set.bounding_box()
        resolution = float(np.max(upper - lower)) / BRUTEFORCE_STEPS
        result = solve_bilevel_bruteforce(problem, feasible_set, resolution)
        return result.f_star, result.h_star, "brute-force"
    if isinstance(inner, LeastSquaresOracle):
        return solve_inner(problem).value, None, "least-squares"
    return None, None, ""


# Worker processes receive the setup once through the pool initializer.
_WORKER_CONTEXT: dict = {}


def _init_worker(config: RunConfig, setup: ExperimentSetup, references: References):
    _WORKER_CONTEXT["config"] = config
    _WORKER_CONTEXT["setup"] = setup
    _WORKER_CONTEXT["references"] = references


def run_path(index: int) -> PathResult:
    """One seeded sample path; failures are captured instead of raised."""
    config = _WORKER_CONTEXT["config"]
    setup = _WORKER_CONTEXT["setup"]
    references = _WORKER_CONTEXT["references"]
    seed = config.seed + index
    try:
        report = run(
            setup.problem, config.dgf, setup.feasible_set, config.schedule, setup.x0,
            config.iterations, SampleSource(seed), config.checkpoints,
            wall_clock=config.wall_clock, override=config.override_validation,
        )
    except Exception as exc:
        logger.error("Sample path %d (seed %d) failed: %s", index, seed, exc)
        return PathResult(index, seed, error=f"{type(exc).__name__}: {exc}")
    frame = report.to_frame()
    trace = pd.DataFrame({
        "k": frame["k"],
        "gamma": frame["gamma"],
        "lambda": frame["lambda"],
        "f_gap": _gap(frame["f_value"], references.f_star),
        "h_gap": _gap(frame["h_value"], references.h_star),
        "elapsed_ms": frame["elapsed_ms"],
    })
    return PathResult(index, seed, trace, report.x_bar, report.iterations, report.stopped_by)


def _gap(values: pd.Series, reference: float | None) -> pd.Series:
    if reference is None:
        return pd.Series(np.nan, index=values.index)
    return (values - reference).abs()


def aggregate_traces(traces: list[pd.DataFrame]) -> pd.DataFrame:
    """Mean and standard error of the gaps per checkpoint across paths."""
    if not traces:
        return pd.DataFrame(columns=data_io.AGGREGATE_HEADER)
    stacked = pd.concat(traces, ignore_index=True)
    grouped = stacked.groupby("k", sort=True)
    counts = grouped.size()
    frame = pd.DataFrame({
        "k": counts.index,
        "f_gap_mean": grouped["f_gap"].mean().to_numpy(),
        "f_gap_se": (grouped["f_gap"].std(ddof=1).fillna(0.0) / np.sqrt(counts)).to_numpy(),
        "h_gap_mean": grouped["h_gap"].mean().to_numpy(),
        "h_gap_se": (grouped["h_gap"].std(ddof=1).fillna(0.0) / np.sqrt(counts)).to_numpy(),
        "paths": counts.to_numpy(),
    })
    return frame.reset_index(drop=True)


def _execute_paths(config: RunConfig, setup: ExperimentSetup, references: References) -> list[PathResult]:
    workers = min(config.workers or available_workers(), config.paths)
    if workers <= 1:
        _init_worker(config, setup, references)
        return [run_path(index) for index in range(config.paths)]
    with mp.Pool(workers, initializer=_init_worker, initargs=(config, setup, references)) as pool:
        return pool.map(run_path, range(config.paths))


def run_experiment(config: RunConfig) -> ExperimentResult:
    output = Path(config.output)
    output.mkdir(parents=True, exist_ok=True)
    setup = build_problem(config)
    references = compute_references(config, setup)
    logger.info(
        "f* = %s (%s), h* = %s (%s)",
        references.f_star, references.f_source, references.h_star, references.h_source,
    )

    perf_monitor.start_timing("sample paths")
    results = _execute_paths(config, setup, references)
    paths_seconds = perf_monitor.end_timing("sample paths", f"- {config.paths} paths")

    completed = [result for result in results if not result.failed]
    for result in completed:
        data_io.write_trace(result.trace, output / f"path_{result.index:03d}.csv")
    aggregate = aggregate_traces([result.trace for result in completed])
    data_io.write_aggregate(aggregate, output / "aggregate.csv")
    data_io.write_plot_data(aggregate["k"], aggregate["f_gap_mean"], output / "f_gap.dat")
    data_io.write_plot_data(aggregate["k"], aggregate["h_gap_mean"], output / "h_gap.dat")

    summary = _summary(config, setup, references, results, aggregate)
    summary["elapsed"] = format_elapsed(paths_seconds)
    data_io.write_summary(summary, output / "summary.txt")
    failed = len(results) - len(completed)
    if failed:
        logger.warning("%d of %d sample paths failed; see summary.txt.", failed, len(results))
    return ExperimentResult(0 if failed == 0 else 1, output, summary, aggregate, results)


def _summary(config, setup, references, results, aggregate) -> dict:
    s = config.schedule
    completed = [result for result in results if not result.failed]
    summary = {
        "application": APP_METADATA["name"],
        "version": APP_METADATA["version"],
        "problem": config.problem.kind,
        "dimension": setup.problem.dimension,
        "feasible_set": setup.feasible_set.describe(),
        "mu_h": setup.problem.mu_h,
        "deterministic": setup.problem.deterministic,
        "gamma0": s.gamma0,
        "lambda0": s.lambda0,
        "a": s.a,
        "b": s.b,
        "r": s.r,
        "delta": "" if s.delta is None else s.delta,
    }
    for report in s.reports:
        summary[f"validation.{report.name.split(' ')[0]}"] = "pass" if report.passed else "fail"
    summary.update({
        "seed": config.seed,
        "paths": config.paths,
        "completed_paths": len(completed),
        "failed_paths": ",".join(str(result.index) for result in results if result.failed),
        "iterations": config.iterations if config.iterations is not None else "",
        "wall_clock_s": config.wall_clock if config.wall_clock is not None else "",
        "f_star": "" if references.f_star is None else float(references.f_star),
        "f_star_source": references.f_source,
        "h_star": "" if references.h_star is None else float(references.h_star),
        "h_star_source": references.h_source,
    })
    if not aggregate.empty:
        summary["final_k"] = int(aggregate["k"].iloc[-1])
        summary["final_f_gap_mean"] = float(aggregate["f_gap_mean"].iloc[-1])
        summary["final_h_gap_mean"] = float(aggregate["h_gap_mean"].iloc[-1])
    if isinstance(setup.problem.inner, HingeOracle) and completed:
        losses = [
            mean_hinge_loss(setup.problem.inner, result.x_bar, config.evaluation_subsample, config.seed + result.index)
            for result in completed
        ]
        summary["hinge_loss_mean"] = float(np.mean(losses))
    for result in results:
        if result.failed:
            summary[f"error.path_{result.index:03d}"] = result.error
    return summary


def emit_rate_fit(aggregate: pd.DataFrame | str | Path, column: str = "f_gap_mean") -> tuple[float, float]:
    """Least-squares fit of log(gap) against log(k) over the tail half of the checkpoints."""
    frame = aggregate if isinstance(aggregate, pd.DataFrame) else data_io.read_aggregate(aggregate)
    if column not in frame.columns:
        raise ValueError(f"Aggregate has no column {column!r}.")
    ks = frame["k"].to_numpy(dtype=np.float64)
    gaps = frame[column].to_numpy(dtype=np.float64)
    usable = (ks > 0) & np.isfinite(gaps) & (gaps > 0)
    ks, gaps = ks[usable], gaps[usable]
    if ks.size < MIN_FIT_POINTS:
        raise ValueError(f"Need at least {MIN_FIT_POINTS} checkpoints with positive gaps, found {ks.size}.")
    tail = ks.size // 2
    slope, intercept = np.polyfit(np.log(ks[tail:]), np.log(gaps[tail:]), 1)
    return float(slope), float(intercept)
