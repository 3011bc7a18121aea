"""
Iteratively regularized stochastic mirror descent.

One step draws xi_k then xi~_k, moves along gamma_k (g_F + lambda_k g_H) through
the prox mapping and folds x_{k+1} into the running weighted average with
weight gamma_{k+1} ** r. The values of the schedule at index k drive step k.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from core.errors import DimensionMismatchError, InfeasiblePointError, check_dimension
from core.geometry import DistanceGenerator, FeasibleSet, project, prox_map
from core.oracles import BilevelProblem, SampleSource, sample_subgrad_f, sample_subgrad_h
from core.schedules import Schedule, require_runnable
from utils.numba_funcs import neumaier_add, update_weighted_average, weighted_history_average


logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["k", "gamma", "lambda", "f_value", "h_value", "elapsed_ms"]


@dataclass
class SolverState:
    k: int
    x: np.ndarray
    x_bar: np.ndarray
    weight_sum: float
    compensation: float = 0.0
    samples: int = 0
    history: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def total_weight(self) -> float:
        """S_k with the compensation term folded in."""
        return self.weight_sum + self.compensation


@dataclass(frozen=True)
class TraceRow:
    k: int
    gamma: float
    lam: float
    f_value: float
    h_value: float
    elapsed_ms: float


@dataclass(eq=False)
class RunReport:
    x_bar: np.ndarray
    rows: list[TraceRow]
    seed: int | None
    schedule: Schedule
    iterations: int
    samples: int
    stopped_by: str = "iterations"
    elapsed_ms: float = 0.0
    history: list[np.ndarray] | None = field(default=None, repr=False)

    def to_frame(self) -> pd.DataFrame:
        records = [
            (row.k, row.gamma, row.lam, row.f_value, row.h_value, row.elapsed_ms)
            for row in self.rows
        ]
        return pd.DataFrame.from_records(records, columns=TRACE_COLUMNS)


def geometric_checkpoints(iterations: int) -> list[int]:
    """1, 2, 4, ... up to ``iterations``, always ending at ``iterations``."""
    points = []
    k = 1
    while k < iterations:
        points.append(k)
        k *= 2
    points.append(iterations)
    return points


def init(
    x0,
    feasible_set: FeasibleSet,
    s: Schedule,
    l_omega: float | None = None,
    mu_h: float | None = None,
    override: bool = False,
    capture_history: bool = False,
) -> SolverState:
    x = np.array(x0, dtype=np.float64).ravel()
    check_dimension(x, feasible_set.dimension, "x0")
    if l_omega is not None and mu_h is not None:
        require_runnable(s, l_omega, mu_h, override)
    if not feasible_set.contains(x):
        logger.warning("Initial point lies outside %s; starting from its projection.", feasible_set.describe())
        x = project(feasible_set, x)
    return SolverState(
        k=0,
        x=x,
        x_bar=x.copy(),
        weight_sum=s.averaging_weight(0),
        history=[x.copy()] if capture_history else None,
    )


def step(
    state: SolverState,
    p: BilevelProblem,
    dgf: DistanceGenerator,
    feasible_set: FeasibleSet,
    s: Schedule,
    src: SampleSource,
) -> SolverState:
    k = state.k
    gamma = float(s.gamma(k))
    lam = float(s.lam(k))
    g_f = sample_subgrad_f(p, state.x, src)
    g_h = sample_subgrad_h(p, state.x, src)
    x_next = prox_map(dgf, feasible_set, state.x, gamma * (g_f + lam * g_h))

    weight = s.averaging_weight(k + 1)
    weight_sum, compensation = neumaier_add(state.weight_sum, state.compensation, weight)
    x_bar = update_weighted_average(state.x_bar, x_next, weight, weight_sum + compensation)

    history = state.history
    if history is not None:
        history.append(x_next.copy())
    return SolverState(
        k=k + 1,
        x=x_next,
        x_bar=x_bar,
        weight_sum=weight_sum,
        compensation=compensation,
        samples=state.samples + 2,
        history=history,
    )


def run(
    p: BilevelProblem,
    dgf: DistanceGenerator,
    feasible_set: FeasibleSet,
    s: Schedule,
    x0,
    iterations: int | None,
    src: SampleSource,
    checkpoints: Sequence[int] | None = None,
    *,
    wall_clock: float | None = None,
    evaluate: bool = True,
    capture_history: bool = False,
    override: bool = False,
    observer: Callable[[SolverState], None] | None = None,
    check_feasibility: bool = False,
) -> RunReport:
    """Run the iteration for ``iterations`` steps or until ``wall_clock`` seconds elapse."""
    if iterations is None and wall_clock is None:
        raise ValueError("Either an iteration budget or a wall-clock budget is required.")
    if iterations is not None and iterations < 1:
        raise ValueError("Iteration budget must be at least 1.")
    if dgf.dimension is not None and dgf.dimension != feasible_set.dimension:
        raise DimensionMismatchError(
            f"Distance generator has dimension {dgf.dimension}, feasible set {feasible_set.dimension}."
        )

    state = init(x0, feasible_set, s, dgf.lipschitz, p.mu_h, override, capture_history)
    if iterations is not None:
        marks = sorted(set(checkpoints)) if checkpoints is not None else geometric_checkpoints(iterations)
        marks = [k for k in marks if 1 <= k <= iterations]
    else:
        marks = sorted(set(checkpoints)) if checkpoints is not None else None
    pending = list(marks) if marks is not None else None
    next_geometric = 1

    rows: list[TraceRow] = []
    started = time.perf_counter()
    stopped_by = "iterations"

    def record(current: SolverState):
        f_value = p.inner.exact_value(current.x_bar) if evaluate else float("nan")
        h_value = p.outer.exact_value(current.x_bar) if evaluate else float("nan")
        rows.append(TraceRow(
            k=current.k,
            gamma=float(s.gamma(current.k)),
            lam=float(s.lam(current.k)),
            f_value=float(f_value),
            h_value=float(h_value),
            elapsed_ms=(time.perf_counter() - started) * 1000.0,
        ))

    while iterations is None or state.k < iterations:
        if wall_clock is not None and time.perf_counter() - started >= wall_clock:
            stopped_by = "wall-clock"
            break
        state = step(state, p, dgf, feasible_set, s, src)
        if check_feasibility and not feasible_set.contains(state.x):
            raise InfeasiblePointError(f"Iterate left the feasible set at k = {state.k}.")
        if observer is not None:
            observer(state)
        if pending is not None:
            if pending and state.k == pending[0]:
                pending.pop(0)
                record(state)
        elif state.k == next_geometric:
            next_geometric *= 2
            record(state)

    if not rows or rows[-1].k != state.k:
        if state.k > 0:
            record(state)

    report = RunReport(
        x_bar=state.x_bar,
        rows=rows,
        seed=src.seed,
        schedule=s,
        iterations=state.k,
        samples=state.samples,
        stopped_by=stopped_by,
        elapsed_ms=(time.perf_counter() - started) * 1000.0,
        history=state.history,
    )
    logger.debug("Run finished after %d iterations (%s).", state.k, stopped_by)
    return report


def closed_form_average(history: Sequence[np.ndarray], s: Schedule, k: int) -> np.ndarray:
    """sum_t eta_{t,k} x_t with eta_{t,k} proportional to gamma_t ** r, computed directly."""
    if k < 0 or k >= len(history):
        raise ValueError("History must hold x_0 through x_k.")
    rows = np.asarray(history[: k + 1], dtype=np.float64)
    weights = np.power(s.gamma(np.arange(k + 1)), s.r)
    return weighted_history_average(rows, weights)
