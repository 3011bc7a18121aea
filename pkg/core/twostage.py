"""
Scenario-based two-stage stochastic programs compiled into the bilevel form.

The first-stage decision z and one recourse vector y_i per scenario are stacked
as x = (z, y_1, ..., y_N). The inner objective is the penalty

    F(x, xi_i) = sum_j max{0, t_j(z) + w_ij(y_i)} + sum_l max{0, u_l(z)}

and the outer objective is H(x, xi_i) = c(z) + q_i(y_i). Both are sampled with
the scenario probabilities, so E[H] = c(z) + sum_i p_i q_i(y_i).

Scenario indices are 0-based throughout this module. The compiler cannot check
relatively complete recourse (every z in Z admits a feasible y_i); problems that
violate it compile fine but have a positive inner optimum.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from core.errors import ConfigError, DimensionMismatchError, check_dimension
from core.geometry import FeasibleSet, box
from core.oracles import BilevelProblem, StochasticOracle, make_problem


logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-9


class ConvexHandle:
    """A convex piece with a value and one subgradient."""

    dimension: int
    strong_convexity: float = 0.0

    def value(self, v: np.ndarray) -> float:
        raise NotImplementedError

    def subgradient(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value_batch(self, points: np.ndarray) -> np.ndarray:
        return np.array([self.value(point) for point in points])

    def subgradient_bound(self, radius: float) -> float | None:
        return None

    def value_bound(self, radius: float) -> float | None:
        return None


class AffineHandle(ConvexHandle):
    def __init__(self, coef, constant: float = 0.0):
        self.coef = np.atleast_1d(np.asarray(coef, dtype=np.float64))
        self.constant = float(constant)
        self.dimension = self.coef.size

    def value(self, v):
        return float(self.coef @ v) + self.constant

    def subgradient(self, v):
        return self.coef.copy()

    def value_batch(self, points):
        return np.asarray(points) @ self.coef + self.constant

    def subgradient_bound(self, radius):
        return float(np.linalg.norm(self.coef))

    def value_bound(self, radius):
        return float(np.linalg.norm(self.coef)) * radius + abs(self.constant)


class QuadraticHandle(ConvexHandle):
    """0.5 v^T Q v + linear^T v + constant with Q symmetric positive semidefinite."""

    def __init__(self, Q, linear=None, constant: float = 0.0):
        matrix = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        if matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatchError("Quadratic handle needs a square matrix.")
        matrix = 0.5 * (matrix + matrix.T)
        eigenvalues = np.linalg.eigvalsh(matrix)
        if eigenvalues[0] < -1e-12:
            raise ValueError("Quadratic handle matrix must be positive semidefinite.")
        self.Q = matrix
        self.dimension = matrix.shape[0]
        self.linear = np.zeros(self.dimension) if linear is None else np.atleast_1d(np.asarray(linear, dtype=np.float64))
        check_dimension(self.linear, self.dimension, "linear")
        self.constant = float(constant)
        self.strong_convexity = max(float(eigenvalues[0]), 0.0)
        self._spectral = float(eigenvalues[-1])

    def value(self, v):
        return 0.5 * float(v @ self.Q @ v) + float(self.linear @ v) + self.constant

    def subgradient(self, v):
        return self.Q @ v + self.linear

    def value_batch(self, points):
        points = np.asarray(points)
        return 0.5 * np.einsum("ij,jk,ik->i", points, self.Q, points) + points @ self.linear + self.constant

    def subgradient_bound(self, radius):
        return self._spectral * radius + float(np.linalg.norm(self.linear))

    def value_bound(self, radius):
        return 0.5 * self._spectral * radius ** 2 + float(np.linalg.norm(self.linear)) * radius + abs(self.constant)


class CallableHandle(ConvexHandle):
    """User-supplied value and subgradient callables; convexity is the caller's promise."""

    def __init__(
        self,
        dimension: int,
        value_fn: Callable[[np.ndarray], float],
        subgradient_fn: Callable[[np.ndarray], np.ndarray],
        strong_convexity: float = 0.0,
        lipschitz: float | None = None,
    ):
        self.dimension = int(dimension)
        self._value_fn = value_fn
        self._subgradient_fn = subgradient_fn
        self.strong_convexity = float(strong_convexity)
        self.lipschitz = None if lipschitz is None else float(lipschitz)

    def value(self, v):
        return float(self._value_fn(v))

    def subgradient(self, v):
        g = np.asarray(self._subgradient_fn(v), dtype=np.float64)
        check_dimension(g, self.dimension, "subgradient")
        return g

    def subgradient_bound(self, radius):
        # a global Lipschitz constant bounds subgradients on any radius
        return self.lipschitz


@dataclass(eq=False)
class TwoStageSpec:
    z_lower: np.ndarray
    z_upper: np.ndarray
    y_lower: np.ndarray
    y_upper: np.ndarray
    probabilities: np.ndarray
    first_stage_cost: ConvexHandle
    recourse_costs: list[ConvexHandle]
    first_stage_constraints: list[ConvexHandle] = field(default_factory=list)
    linking: list[ConvexHandle] = field(default_factory=list)
    recourse_constraints: list[list[ConvexHandle]] | None = None
    scenarios: list | None = None
    name: str = "two-stage"

    @property
    def first_stage_dimension(self) -> int:
        return int(np.size(self.z_lower))

    @property
    def second_stage_dimension(self) -> int:
        return int(np.size(self.y_lower))

    @property
    def scenario_count(self) -> int:
        return int(np.size(self.probabilities))

    def validate(self) -> None:
        probs = np.asarray(self.probabilities, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 1:
            raise ValueError("At least one scenario probability is required.")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > PROBABILITY_TOLERANCE:
            raise ValueError("Scenario probabilities must be non-negative and sum to 1.")
        n, m, count = self.first_stage_dimension, self.second_stage_dimension, probs.size
        if len(self.recourse_costs) != count:
            raise DimensionMismatchError("Need exactly one recourse cost per scenario.")
        if self.first_stage_cost.dimension != n:
            raise DimensionMismatchError("First-stage cost dimension does not match z.")
        for handle in list(self.first_stage_constraints) + list(self.linking):
            if handle.dimension != n:
                raise DimensionMismatchError("First-stage constraint dimension does not match z.")
        for handle in self.recourse_costs:
            if handle.dimension != m:
                raise DimensionMismatchError("Recourse cost dimension does not match y.")
        constraints = self.recourse_constraints or [[] for _ in range(count)]
        if len(constraints) != count:
            raise DimensionMismatchError("Need one recourse constraint list per scenario.")
        for row in constraints:
            if len(row) != len(self.linking):
                raise DimensionMismatchError("Each scenario needs one w_j per linking term t_j.")
            for handle in row:
                if handle.dimension != m:
                    raise DimensionMismatchError("Recourse constraint dimension does not match y.")


class _StackedOracle(StochasticOracle):
    def __init__(self, spec: TwoStageSpec):
        n, m, count = spec.first_stage_dimension, spec.second_stage_dimension, spec.scenario_count
        super().__init__(n + m * count, probabilities=spec.probabilities)
        self.spec = spec
        self.support_size = count
        self.n = n
        self.m = m

    def check_scenario(self, i: int) -> None:
        if not 0 <= i < self.support_size:
            raise IndexError(f"Scenario index {i} out of range [0, {self.support_size}).")

    def blocks(self, x: np.ndarray, i: int) -> tuple[np.ndarray, np.ndarray]:
        start = self.n + i * self.m
        return x[: self.n], x[start : start + self.m]

    def scatter(self, i: int, g_z: np.ndarray, g_y: np.ndarray) -> np.ndarray:
        out = np.zeros(self.dimension)
        out[: self.n] = g_z
        start = self.n + i * self.m
        out[start : start + self.m] = g_y
        return out


class PenaltyOracle(_StackedOracle):
    """Unweighted constraint-violation penalty per scenario."""

    lower_bound = 0.0

    def __init__(self, spec: TwoStageSpec):
        super().__init__(spec)
        self.constraints = spec.recourse_constraints or [[] for _ in range(spec.scenario_count)]

    def scenario_value(self, x, i):
        self.check_scenario(i)
        z, y = self.blocks(x, i)
        total = 0.0
        for t_j, w_ij in zip(self.spec.linking, self.constraints[i]):
            total += max(0.0, t_j.value(z) + w_ij.value(y))
        for u in self.spec.first_stage_constraints:
            total += max(0.0, u.value(z))
        return total

    def scenario_subgradient(self, x, i):
        self.check_scenario(i)
        z, y = self.blocks(x, i)
        g_z = np.zeros(self.n)
        g_y = np.zeros(self.m)
        for t_j, w_ij in zip(self.spec.linking, self.constraints[i]):
            if t_j.value(z) + w_ij.value(y) > 0.0:
                g_z += t_j.subgradient(z)
                g_y += w_ij.subgradient(y)
        for u in self.spec.first_stage_constraints:
            if u.value(z) > 0.0:
                g_z += u.subgradient(z)
        return self.scatter(i, g_z, g_y)

    def subgradient_bound(self, radius):
        if radius is None:
            return None
        total = 0.0
        handles = list(self.spec.first_stage_constraints) + list(self.spec.linking)
        worst_row = 0.0
        for row in self.constraints:
            bounds = [handle.subgradient_bound(radius) for handle in row]
            if any(bound is None for bound in bounds):
                return None
            worst_row = max(worst_row, sum(bounds))
        for handle in handles:
            bound = handle.subgradient_bound(radius)
            if bound is None:
                return None
            total += bound
        return total + worst_row


class RecourseObjectiveOracle(_StackedOracle):
    """H(x, xi_i) = c(z) + q_i(y_i)."""

    def __init__(self, spec: TwoStageSpec):
        super().__init__(spec)
        probs = np.asarray(spec.probabilities, dtype=np.float64)
        moduli = [spec.first_stage_cost.strong_convexity]
        moduli += [p_i * q.strong_convexity for p_i, q in zip(probs, spec.recourse_costs)]
        self.strong_convexity = float(min(moduli))

    def scenario_value(self, x, i):
        self.check_scenario(i)
        z, y = self.blocks(x, i)
        return self.spec.first_stage_cost.value(z) + self.spec.recourse_costs[i].value(y)

    def scenario_subgradient(self, x, i):
        self.check_scenario(i)
        z, y = self.blocks(x, i)
        return self.scatter(i, self.spec.first_stage_cost.subgradient(z), self.spec.recourse_costs[i].subgradient(y))

    def subgradient_bound(self, radius):
        if radius is None:
            return None
        first = self.spec.first_stage_cost.subgradient_bound(radius)
        second = [q.subgradient_bound(radius) for q in self.spec.recourse_costs]
        if first is None or any(bound is None for bound in second):
            return None
        return first + max(second)

    def value_bound(self, radius):
        if radius is None:
            return None
        first = self.spec.first_stage_cost.value_bound(radius)
        second = [q.value_bound(radius) for q in self.spec.recourse_costs]
        if first is None or any(bound is None for bound in second):
            return None
        return first + max(second)


@dataclass(frozen=True, eq=False)
class CompiledBilevel:
    spec: TwoStageSpec
    inner: PenaltyOracle
    outer: RecourseObjectiveOracle
    feasible_set: FeasibleSet
    problem: BilevelProblem

    @property
    def dimension(self) -> int:
        return self.feasible_set.dimension

    def split(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """(z, [y_1, ..., y_N]) views of a stacked vector."""
        n, m = self.spec.first_stage_dimension, self.spec.second_stage_dimension
        return x[:n], [x[n + i * m : n + (i + 1) * m] for i in range(self.spec.scenario_count)]


def compile(spec: TwoStageSpec, deterministic: bool = False) -> CompiledBilevel:
    spec.validate()
    count = spec.scenario_count
    lower = np.concatenate([np.asarray(spec.z_lower, dtype=np.float64)] + [np.asarray(spec.y_lower, dtype=np.float64)] * count)
    upper = np.concatenate([np.asarray(spec.z_upper, dtype=np.float64)] + [np.asarray(spec.y_upper, dtype=np.float64)] * count)
    feasible_set = box(lower, upper)
    inner = PenaltyOracle(spec)
    outer = RecourseObjectiveOracle(spec)
    problem = make_problem(inner, outer, feasible_set, name=spec.name, deterministic=deterministic)
    logger.info(
        "Compiled %s: %d scenarios, stacked dimension %d, mu_h = %g.",
        spec.name, count, feasible_set.dimension, problem.mu_h,
    )
    return CompiledBilevel(spec, inner, outer, feasible_set, problem)


def _stacked(c: CompiledBilevel, x) -> np.ndarray:
    vector = np.asarray(x, dtype=np.float64)
    check_dimension(vector, c.dimension)
    return vector


def eval_F(c: CompiledBilevel, x, i: int) -> float:
    return c.inner.scenario_value(_stacked(c, x), i)


def eval_H(c: CompiledBilevel, x, i: int) -> float:
    return c.outer.scenario_value(_stacked(c, x), i)


def subgrad_F(c: CompiledBilevel, x, i: int) -> np.ndarray:
    return c.inner.scenario_subgradient(_stacked(c, x), i)


def subgrad_H(c: CompiledBilevel, x, i: int) -> np.ndarray:
    return c.outer.scenario_subgradient(_stacked(c, x), i)


def handle_from_dict(entry: dict, dimension: int) -> ConvexHandle:
    kind = entry.get("type")
    if kind == "affine":
        handle = AffineHandle(entry.get("coef", [0.0] * dimension), entry.get("constant", 0.0))
    elif kind == "quadratic":
        handle = QuadraticHandle(entry["Q"], entry.get("linear"), entry.get("constant", 0.0))
    else:
        raise ConfigError(f"Unknown handle type {kind!r}; expected 'affine' or 'quadratic'.")
    if handle.dimension != dimension:
        raise ConfigError(f"Handle has dimension {handle.dimension}, expected {dimension}.")
    return handle


def spec_from_dict(data: dict, name: str = "two-stage") -> TwoStageSpec:
    try:
        first = data["first_stage"]
        second = data["second_stage"]
        scenarios = data["scenarios"]
    except KeyError as exc:
        raise ConfigError(f"Two-stage file is missing section {exc.args[0]!r}.") from exc
    n = int(first["dimension"])
    m = int(second["dimension"])
    z_lower = np.broadcast_to(np.asarray(first["lower"], dtype=np.float64), (n,)).copy()
    z_upper = np.broadcast_to(np.asarray(first["upper"], dtype=np.float64), (n,)).copy()
    y_lower = np.broadcast_to(np.asarray(second["lower"], dtype=np.float64), (m,)).copy()
    y_upper = np.broadcast_to(np.asarray(second["upper"], dtype=np.float64), (m,)).copy()
    if not scenarios:
        raise ConfigError("Two-stage file must list at least one scenario.")
    return TwoStageSpec(
        z_lower=z_lower,
        z_upper=z_upper,
        y_lower=y_lower,
        y_upper=y_upper,
        probabilities=np.array([float(row["probability"]) for row in scenarios]),
        first_stage_cost=handle_from_dict(first["cost"], n),
        first_stage_constraints=[handle_from_dict(entry, n) for entry in first.get("constraints", [])],
        linking=[handle_from_dict(entry, n) for entry in first.get("linking", [])],
        recourse_costs=[handle_from_dict(row["cost"], m) for row in scenarios],
        recourse_constraints=[[handle_from_dict(entry, m) for entry in row.get("constraints", [])] for row in scenarios],
        scenarios=[row.get("xi") for row in scenarios],
        name=data.get("name", name),
    )


def load_two_stage(path: str | Path) -> TwoStageSpec:
    """Read a JSON two-stage problem file."""
    file_path = Path(path)
    try:
        data = json.loads(file_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Two-stage file {file_path} is not valid JSON.") from exc
    return spec_from_dict(data, name=file_path.stem)


def original_objective(spec: TwoStageSpec, z: np.ndarray, ys: Sequence[np.ndarray]) -> float:
    """c(z) + sum_i p_i q_i(y_i)."""
    total = spec.first_stage_cost.value(z)
    for p_i, q_i, y_i in zip(spec.probabilities, spec.recourse_costs, ys):
        total += p_i * q_i.value(y_i)
    return float(total)
