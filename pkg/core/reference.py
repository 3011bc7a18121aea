"""
Independent baselines: certified solves of the regularized problem, the inner
optimal value, brute-force bilevel optima for small dimensions, and the
diagnostics that compare solver output against the regularization-path and
recursive bounds.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import optimize

from core.errors import CertificateError, ScheduleValidationError
from core.geometry import DistanceGenerator, FeasibleSet, SetKind, bregman_distance, project
from core.oracles import BilevelProblem, LeastSquaresOracle, SampleSource
from core.schedules import Schedule, validate_assumption4
from core.solver import SolverState, run
from core.twostage import TwoStageSpec
from utils.performance import perf_monitor


logger = logging.getLogger(__name__)

ANALYTIC_TOLERANCE = 1e-8
DATA_TOLERANCE = 1e-5
SCAN_LIMIT = 1_000_000
RHO_CANDIDATES = tuple(np.round(np.arange(0.1, 1.0, 0.1), 1))
MAX_BRUTEFORCE_DIMENSION = 3
FEASIBILITY_TOLERANCE = 1e-9
REPORT_COLUMNS = ["k", "lhs", "rhs", "margin", "pass"]


@dataclass(frozen=True)
class Certificate:
    gap_bound: float
    tolerance: float
    iterations: int
    certified: bool


@dataclass(frozen=True, eq=False)
class RegularizedSolution:
    lam: float
    x: np.ndarray
    value: float
    certificate: Certificate
    modulus: float

    @property
    def solution_tolerance(self) -> float:
        """Bound on ||x - x*_lambda|| implied by the certified objective gap."""
        return float(np.sqrt(2.0 * max(self.certificate.gap_bound, 0.0) / self.modulus))


@dataclass(frozen=True, eq=False)
class InnerSolution:
    x: np.ndarray
    value: float
    certificate: Certificate
    method: str


@dataclass(frozen=True, eq=False)
class BruteForceSolution:
    x: np.ndarray
    h_star: float
    f_star: float
    slack: float
    resolution: float
    candidates: int


@dataclass(frozen=True, eq=False)
class SelectionSolution:
    x: np.ndarray
    f_star: float
    h_star: float
    success: bool
    message: str = ""


@dataclass(frozen=True, eq=False)
class TwoStageGridSolution:
    z: np.ndarray
    ys: list[np.ndarray]
    x: np.ndarray
    value: float
    resolution: float


@dataclass(frozen=True)
class TheoreticalBound:
    tau: float
    b1: float
    rho: float
    k1: int
    k2: int
    k_bar: int
    M: float
    M_h: float | None

    def rhs(self, s: Schedule, k) -> np.ndarray:
        return s.gamma(k) / s.lam(k) * self.tau


@dataclass(eq=False)
class BoundReport:
    """Per-k comparison rows with columns k, lhs, rhs, margin, pass."""

    name: str
    rows: list[tuple[int, float, float, float, bool]] = field(default_factory=list)
    tainted: bool = False
    required_fraction: float = 1.0
    notes: list[str] = field(default_factory=list)

    def add(self, k: int, lhs: float, rhs: float, slack: float = 0.0):
        margin = rhs + slack - lhs
        self.rows.append((int(k), float(lhs), float(rhs), float(margin), bool(margin >= 0.0)))

    @property
    def pass_fraction(self) -> float:
        if not self.rows:
            return 1.0
        return sum(row[4] for row in self.rows) / len(self.rows)

    @property
    def passed(self) -> bool:
        return not self.tainted and self.pass_fraction >= self.required_fraction

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.rows, columns=REPORT_COLUMNS)

    def write_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def _strong_convexity_lower_bound(feasible_set, x, value, g, modulus):
    """min over the set of value + <g, y - x> + modulus/2 ||y - x||^2."""
    y = project(feasible_set, x - g / modulus)
    d = y - x
    return value + float(g @ d) + 0.5 * modulus * float(d @ d)


def solve_regularized(
    p: BilevelProblem,
    lam: float,
    budget: int = 200_000,
    tol: float = ANALYTIC_TOLERANCE,
    x0=None,
) -> RegularizedSolution:
    """Projected subgradient descent on f + lam * h with stepsize 2 / (mu (k + 2))."""
    if not lam > 0:
        raise ValueError("Regularization weight lambda must be positive.")
    feasible_set = p.feasible_set
    inner, outer = p.inner, p.outer
    modulus = p.mu_h * lam + inner.strong_convexity
    max_step = np.inf
    if inner.smoothness is not None and outer.smoothness is not None:
        max_step = 1.0 / (inner.smoothness + lam * outer.smoothness)

    x = project(feasible_set, np.zeros(p.dimension) if x0 is None else np.asarray(x0, dtype=np.float64))
    best_x, best_value, lower = x, np.inf, -np.inf
    iterations = 0
    for k in range(budget):
        iterations = k + 1
        value = inner.exact_value(x) + lam * outer.exact_value(x)
        g = inner.exact_subgradient(x) + lam * outer.exact_subgradient(x)
        if value < best_value:
            best_x, best_value = x, value
        lower = max(lower, _strong_convexity_lower_bound(feasible_set, x, value, g, modulus))
        if best_value - lower <= tol:
            break
        x = project(feasible_set, x - min(2.0 / (modulus * (k + 2)), max_step) * g)

    gap = max(best_value - lower, 0.0)
    certificate = Certificate(gap, tol, iterations, gap <= tol)
    if not certificate.certified:
        logger.warning("Regularized solve at lambda = %g stopped with gap %.3g > %.3g.", lam, gap, tol)
    return RegularizedSolution(lam, best_x, float(best_value), certificate, modulus)


def solve_inner(
    p: BilevelProblem,
    budget: int = 200_000,
    tol: float = DATA_TOLERANCE,
    strict: bool = False,
) -> InnerSolution:
    """f* by least squares (when applicable) or averaged projected subgradient descent."""
    inner, feasible_set = p.inner, p.feasible_set
    if isinstance(inner, LeastSquaresOracle):
        solution = _least_squares_inner(inner, feasible_set, tol)
    else:
        solution = _subgradient_inner(p, budget, tol)
    if not solution.certificate.certified:
        message = f"Inner solve stopped with gap {solution.certificate.gap_bound:.3g} > {tol:.3g}."
        if strict:
            raise CertificateError(message)
        logger.warning(message)
    return solution


def _least_squares_inner(inner: LeastSquaresOracle, feasible_set: FeasibleSet, tol: float) -> InnerSolution:
    A = inner.A.toarray() if inner.sparse else inner.A
    if feasible_set.kind is SetKind.BOX:
        result = optimize.lsq_linear(A, inner.b, bounds=(feasible_set.lower, feasible_set.upper), tol=1e-12)
        x = result.x
        method = "bounded-least-squares"
    else:
        x = np.linalg.lstsq(A, inner.b, rcond=None)[0]
        method = "normal-equations"
        if not feasible_set.contains(x):
            return _projected_gradient_inner(inner, feasible_set, tol)
    value = inner.exact_value(x)
    g = inner.exact_subgradient(x)
    if feasible_set.is_compact:
        gap = float(g @ x) - feasible_set.linear_minimum(g)
    else:
        gap = float(np.linalg.norm(g))
    gap = max(gap, 0.0)
    return InnerSolution(x, value, Certificate(gap, tol, 1, gap <= tol), method)


def _projected_gradient_inner(inner, feasible_set, tol, budget: int = 200_000) -> InnerSolution:
    step_size = 1.0 / inner.smoothness
    x = project(feasible_set, np.zeros(inner.dimension))
    gap = np.inf
    k = 0
    for k in range(budget):
        g = inner.exact_subgradient(x)
        gap = float(g @ x) - feasible_set.linear_minimum(g)
        if gap <= tol:
            break
        x = project(feasible_set, x - step_size * g)
    return InnerSolution(x, inner.exact_value(x), Certificate(max(gap, 0.0), tol, k + 1, gap <= tol), "projected-gradient")


def _subgradient_inner(p: BilevelProblem, budget: int, tol: float) -> InnerSolution:
    inner, feasible_set = p.inner, p.feasible_set
    radius = feasible_set.diameter_bound
    scale = 1.0
    if radius is not None and p.c_f:
        scale = 2.0 * radius / p.c_f
    x = project(feasible_set, np.zeros(p.dimension))
    average = x.copy()
    best_x, best_value = x, np.inf
    lower = -np.inf if inner.lower_bound is None else inner.lower_bound
    k = 0
    for k in range(budget):
        candidate = average if inner.exact_value(average) < inner.exact_value(x) else x
        value = inner.exact_value(candidate)
        g = inner.exact_subgradient(candidate)
        if value < best_value:
            best_x, best_value = candidate, value
        if feasible_set.is_compact:
            lower = max(lower, value + feasible_set.linear_minimum(g) - float(g @ candidate))
        if best_value - lower <= tol:
            break
        x = project(feasible_set, x - scale / np.sqrt(k + 1.0) * inner.exact_subgradient(x))
        average += (x - average) / (k + 2.0)
    gap = max(best_value - lower, 0.0)
    return InnerSolution(best_x, float(best_value), Certificate(gap, tol, k + 1, gap <= tol), "averaged-subgradient")


def _grid(feasible_set: FeasibleSet, resolution: float) -> np.ndarray:
    lower, upper = feasible_set.bounding_box()
    axes = [
        np.linspace(lo, hi, int(round((hi - lo) / resolution)) + 1)
        for lo, hi in zip(lower, upper)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([axis.ravel() for axis in mesh], axis=1)
    if feasible_set.kind is SetKind.BALL:
        inside = np.linalg.norm(points - feasible_set.center, axis=1) <= feasible_set.radius + FEASIBILITY_TOLERANCE
        points = points[inside]
    return points


def solve_bilevel_bruteforce(p: BilevelProblem, feasible_set: FeasibleSet, resolution: float) -> BruteForceSolution:
    """Grid enumeration: keep near-minimizers of f, return the h-minimizer among them."""
    if feasible_set.dimension > MAX_BRUTEFORCE_DIMENSION:
        raise ValueError(f"Brute force supports dimension <= {MAX_BRUTEFORCE_DIMENSION}.")
    if not feasible_set.is_compact:
        raise ValueError("Brute force needs a compact feasible set.")
    if not resolution > 0:
        raise ValueError("Grid resolution must be positive.")
    points = _grid(feasible_set, resolution)
    f_values = p.inner.values_at(points)
    lipschitz = p.c_f
    if lipschitz is None:
        sample = points[:: max(1, len(points) // 2000)]
        lipschitz = max(float(np.linalg.norm(p.inner.exact_subgradient(point))) for point in sample)
    slack = lipschitz * resolution * np.sqrt(feasible_set.dimension) / 2.0
    f_min = float(f_values.min())
    keep = f_values <= f_min + slack
    candidates = points[keep]
    h_values = p.outer.values_at(candidates)
    best = int(np.argmin(h_values))
    return BruteForceSolution(
        x=candidates[best].copy(),
        h_star=float(h_values[best]),
        f_star=f_min,
        slack=float(slack),
        resolution=float(resolution),
        candidates=int(keep.sum()),
    )


def solve_selection_least_squares(A, b, mu_h: float, feasible_set: FeasibleSet | None = None) -> SelectionSolution:
    """min (mu_h/2)||x||^2 + ||x||_1 over argmin ||Ax - b||^2, as a quadratic program in split variables."""
    A = np.atleast_2d(np.asarray(A.toarray() if hasattr(A, "toarray") else A, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64).ravel()
    n = A.shape[1]
    if feasible_set is not None and feasible_set.kind is SetKind.BOX:
        x_f = optimize.lsq_linear(A, b, bounds=(feasible_set.lower, feasible_set.upper), tol=1e-12).x
        upper_u = np.maximum(feasible_set.upper, 0.0)
        upper_v = np.maximum(-feasible_set.lower, 0.0)
    elif feasible_set is None or feasible_set.kind is SetKind.WHOLE_SPACE:
        x_f = np.linalg.lstsq(A, b, rcond=None)[0]
        upper_u = upper_v = np.full(n, np.inf)
    else:
        raise ValueError("Selection quadratic program supports box or whole-space sets.")
    residual = A @ x_f - b
    f_star = float(residual @ residual)

    # optimal set is {x : V_r^T x = V_r^T x_f} intersected with the set
    _, singular, vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(singular > singular[0] * 1e-10)) if singular.size else 0
    basis = vt[:rank]
    target = basis @ x_f

    def objective(w):
        x = w[:n] - w[n:]
        return 0.5 * mu_h * float(x @ x) + float(np.sum(w))

    def gradient(w):
        x = w[:n] - w[n:]
        return np.concatenate([mu_h * x + 1.0, -mu_h * x + 1.0])

    constraint = {
        "type": "eq",
        "fun": lambda w: basis @ (w[:n] - w[n:]) - target,
        "jac": lambda w: np.hstack([basis, -basis]),
    }
    start = np.concatenate([np.maximum(x_f, 0.0), np.maximum(-x_f, 0.0)])
    bounds = [(0.0, u) for u in upper_u] + [(0.0, v) for v in upper_v]
    result = optimize.minimize(
        objective, start, jac=gradient, bounds=bounds, constraints=[constraint],
        method="SLSQP", options={"maxiter": 1000, "ftol": 1e-12},
    )
    x = result.x[:n] - result.x[n:]
    h_star = 0.5 * mu_h * float(x @ x) + float(np.sum(np.abs(x)))
    if not result.success:
        logger.warning("Selection quadratic program did not converge: %s", result.message)
    return SelectionSolution(x, f_star, h_star, bool(result.success), str(result.message))


def enumerate_two_stage(spec: TwoStageSpec, resolution: float) -> TwoStageGridSolution:
    """Grid optimum of c(z) + sum_i p_i q_i(y_i) subject to the original constraints."""
    spec.validate()
    n, m, count = spec.first_stage_dimension, spec.second_stage_dimension, spec.scenario_count
    if n + m * count > MAX_BRUTEFORCE_DIMENSION:
        raise ValueError(f"Grid enumeration supports stacked dimension <= {MAX_BRUTEFORCE_DIMENSION}.")
    lower = np.concatenate([spec.z_lower] + [spec.y_lower] * count)
    upper = np.concatenate([spec.z_upper] + [spec.y_upper] * count)
    axes = [np.linspace(lo, hi, int(round((hi - lo) / resolution)) + 1) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([axis.ravel() for axis in mesh], axis=1)
    z = points[:, :n]
    feasible = np.ones(len(points), dtype=bool)
    objective = spec.first_stage_cost.value_batch(z)
    for u in spec.first_stage_constraints:
        feasible &= u.value_batch(z) <= FEASIBILITY_TOLERANCE
    constraints = spec.recourse_constraints or [[] for _ in range(count)]
    for i in range(count):
        y = points[:, n + i * m : n + (i + 1) * m]
        objective = objective + spec.probabilities[i] * spec.recourse_costs[i].value_batch(y)
        for t_j, w_ij in zip(spec.linking, constraints[i]):
            feasible &= t_j.value_batch(z) + w_ij.value_batch(y) <= FEASIBILITY_TOLERANCE
    if not feasible.any():
        raise ValueError("No grid point satisfies the two-stage constraints.")
    objective = np.where(feasible, objective, np.inf)
    best = int(np.argmin(objective))
    x = points[best].copy()
    ys = [x[n + i * m : n + (i + 1) * m] for i in range(count)]
    return TwoStageGridSolution(x[:n], ys, x, float(objective[best]), float(resolution))


def theoretical_bound(
    p: BilevelProblem,
    dgf: DistanceGenerator,
    s: Schedule,
    scan_limit: int = SCAN_LIMIT,
) -> TheoreticalBound:
    """tau with B_1, rho, k_1, k_2 found by scanning k <= scan_limit; rho minimizes tau."""
    M = p.feasible_set.diameter_bound
    if M is None:
        raise ValueError("The recursive bound needs a compact feasible set (finite M).")
    if p.c_f is None or p.c_h is None:
        raise ValueError("The recursive bound needs verified subgradient bounds C_F and C_H.")
    L, mu_omega, mu_h = dgf.lipschitz, dgf.mu, p.mu_h
    k = np.arange(1, scan_limit + 1, dtype=np.float64)
    gamma, lam = s.gamma(k), s.lam(k)
    gamma_prev, lam_prev = s.gamma(k - 1), s.lam(k - 1)
    k1 = 1
    b1 = float(np.max((lam_prev / lam - 1.0) ** 2 / (gamma ** 3 * lam)))

    best = None
    for rho in RHO_CANDIDATES:
        holds = gamma_prev / lam_prev <= gamma / lam * (1.0 + rho * mu_h / (2.0 * L) * gamma * lam)
        violations = np.flatnonzero(~holds)
        k2 = 1 if violations.size == 0 else int(k[violations[-1]]) + 1
        if k2 > scan_limit:
            continue
        k_bar = max(k1, k2)
        gamma_bar, lam_bar = float(s.gamma(k_bar - 1)), float(s.lam(k_bar - 1))
        first = 2.0 * L * M ** 2 * lam_bar / gamma_bar
        numerator = 2.0 * p.c_h ** 2 * L ** 3 * b1 + 4.0 * p.c_f ** 2 * mu_h ** 3 + 4.0 * p.c_h ** 2 * mu_h ** 3 * lam_bar ** 2
        second = 2.0 * L * numerator / (mu_omega * mu_h ** 4 * (1.0 - rho))
        tau = max(first, second)
        if best is None or tau < best.tau:
            best = TheoreticalBound(tau, b1, float(rho), k1, k2, k_bar, M, p.m_h)
    if best is None:
        raise ScheduleValidationError(f"The rho condition still fails at k = {scan_limit}; no k_bar within the scan.")
    return best


def path_bound_check(
    p: BilevelProblem,
    s: Schedule,
    K: int,
    tol: float = ANALYTIC_TOLERANCE,
    budget: int = 200_000,
) -> BoundReport:
    """||x*_{lambda_k} - x*_{lambda_{k-1}}|| <= C_H / mu_h |1 - lambda_{k-1} / lambda_k| for k = 1..K."""
    if p.c_h is None:
        raise ValueError("The path bound needs a verified C_H.")
    report = BoundReport("regularization-path bound")
    if K < 1:
        return report
    perf_monitor.start_timing("path_bound_check")
    solutions = [solve_regularized(p, float(s.lam(k)), budget, tol) for k in range(K + 1)]
    perf_monitor.end_timing("path_bound_check")
    if not all(solution.certificate.certified for solution in solutions):
        report.tainted = True
        report.notes.append("At least one regularized solve failed its certificate.")
    for k in range(1, K + 1):
        current, previous = solutions[k], solutions[k - 1]
        lhs = float(np.linalg.norm(current.x - previous.x))
        rhs = p.c_h / p.mu_h * abs(1.0 - previous.lam / current.lam)
        slack = 2.0 * (current.solution_tolerance + previous.solution_tolerance)
        report.add(k, lhs, rhs, slack)
    return report


def _checked_indices(k_bar: int, K: int, count: int) -> list[int]:
    if k_bar > K:
        return []
    indices = np.unique(np.round(np.geomspace(k_bar, K, num=count)).astype(int))
    return [int(k) for k in indices if k_bar <= k <= K]


def recursion_bound_check(
    p: BilevelProblem,
    dgf: DistanceGenerator,
    feasible_set: FeasibleSet,
    s: Schedule,
    paths: int,
    K: int,
    seed: int = 0,
    x0=None,
    checks: int = 25,
    tol: float = ANALYTIC_TOLERANCE,
    scan_limit: int = SCAN_LIMIT,
) -> BoundReport:
    """Monte Carlo E[D(x_{k+1}, x*_{lambda_k})] against (gamma_k / lambda_k) tau for k >= k_bar."""
    validation = validate_assumption4(s)
    if not validation.passed:
        raise ScheduleValidationError(validation.format())
    if paths < 1:
        raise ValueError("At least one sample path is required.")
    bound = theoretical_bound(p, dgf, s, scan_limit)
    report = BoundReport(
        "recursive bound",
        required_fraction=1.0 if p.deterministic else 0.95,
    )
    report.notes.append(f"tau = {bound.tau:.6g}, B1 = {bound.b1:.6g}, rho = {bound.rho:g}, k_bar = {bound.k_bar}")
    indices = _checked_indices(bound.k_bar, K, checks)
    if not indices:
        report.notes.append("No checked k at or beyond k_bar.")
        return report

    references = {k: solve_regularized(p, float(s.lam(k)), tol=tol) for k in indices}
    if not all(solution.certificate.certified for solution in references.values()):
        report.tainted = True
        report.notes.append("At least one regularized solve failed its certificate.")
    watch = {k + 1: k for k in indices}
    distances = {k: [] for k in indices}

    def observer(state: SolverState):
        k = watch.get(state.k)
        if k is not None:
            distances[k].append(bregman_distance(dgf, state.x, references[k].x))

    start = x0
    if start is None:
        lower, upper = feasible_set.bounding_box()
        start = project(feasible_set, upper)
    for path in range(paths):
        run(
            p, dgf, feasible_set, s, start, max(indices) + 1, SampleSource(seed + path),
            checkpoints=[], evaluate=False, observer=observer,
        )
    for k in indices:
        report.add(k, float(np.mean(distances[k])), float(bound.rhs(s, k)))
    return report
