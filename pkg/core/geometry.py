"""
Distance-generating functions, Bregman distances and prox mappings.

Only the Euclidean generator omega(x) = 0.5 * ||x||_2^2 ships. The solver talks
to a generator exclusively through ``omega``, ``gradient``, ``mu`` and ``lipschitz``,
so entropy-type generators can be registered later without touching it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from core.errors import DimensionMismatchError, InfeasiblePointError, check_dimension
from utils.numba_funcs import clip_to_box, project_to_ball


logger = logging.getLogger(__name__)

MEMBERSHIP_TOLERANCE = 1e-9


class GeneratorKind(str, Enum):
    EUCLIDEAN_HALF_SQUARE = "euclidean-half-square"


class SetKind(str, Enum):
    WHOLE_SPACE = "whole-space"
    BOX = "box"
    BALL = "ball"


@dataclass(frozen=True)
class DistanceGenerator:
    kind: GeneratorKind = GeneratorKind.EUCLIDEAN_HALF_SQUARE
    mu: float = 1.0
    lipschitz: float = 1.0
    primal_norm: str = "l2"
    dual_norm: str = "l2"
    dimension: int | None = None

    def __post_init__(self):
        if not 0.0 < self.mu <= self.lipschitz:
            raise ValueError("Distance generator needs 0 < mu_omega <= L_omega.")
        if self.dimension is not None and self.dimension < 1:
            raise ValueError("Distance generator dimension must be positive.")

    def omega(self, x: np.ndarray) -> float:
        if self.kind is GeneratorKind.EUCLIDEAN_HALF_SQUARE:
            return 0.5 * float(np.dot(x, x))
        raise NotImplementedError(f"Unsupported generator {self.kind.value}.")

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if self.kind is GeneratorKind.EUCLIDEAN_HALF_SQUARE:
            return np.array(x, dtype=np.float64, copy=True)
        raise NotImplementedError(f"Unsupported generator {self.kind.value}.")


def euclidean(dimension: int | None = None) -> DistanceGenerator:
    """Half squared l2 norm; a generator built with a dimension rejects other sizes."""
    return DistanceGenerator(dimension=dimension)


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    kind: SetKind
    dimension: int
    lower: np.ndarray | None = field(default=None, repr=False)
    upper: np.ndarray | None = field(default=None, repr=False)
    center: np.ndarray | None = field(default=None, repr=False)
    radius: float | None = None

    @property
    def diameter_bound(self) -> float | None:
        """M = sup ||x||_2 over the set, or None for the whole space."""
        if self.kind is SetKind.BOX:
            corner = np.maximum(np.abs(self.lower), np.abs(self.upper))
            return float(np.linalg.norm(corner))
        if self.kind is SetKind.BALL:
            return float(np.linalg.norm(self.center)) + float(self.radius)
        return None

    @property
    def is_compact(self) -> bool:
        return self.kind is not SetKind.WHOLE_SPACE

    def contains(self, x: np.ndarray, tol: float = MEMBERSHIP_TOLERANCE) -> bool:
        if self.kind is SetKind.BOX:
            return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))
        if self.kind is SetKind.BALL:
            return float(np.linalg.norm(x - self.center)) <= self.radius + tol
        return bool(np.all(np.isfinite(x)))

    def linear_minimum(self, g: np.ndarray) -> float:
        """min over the set of <g, y>; -inf on the whole space unless g = 0."""
        if self.kind is SetKind.BOX:
            return float(np.sum(np.minimum(g * self.lower, g * self.upper)))
        if self.kind is SetKind.BALL:
            return float(np.dot(g, self.center) - self.radius * np.linalg.norm(g))
        return 0.0 if not np.any(g) else -np.inf

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind is SetKind.BOX:
            return self.lower.copy(), self.upper.copy()
        if self.kind is SetKind.BALL:
            return self.center - self.radius, self.center + self.radius
        raise ValueError("The whole space has no bounding box.")

    def describe(self) -> str:
        if self.kind is SetKind.BOX:
            return f"box[{self.lower.min():g}, {self.upper.max():g}]^{self.dimension}"
        if self.kind is SetKind.BALL:
            return f"ball(radius={self.radius:g}) in R^{self.dimension}"
        return f"R^{self.dimension}"


def whole_space(dimension: int) -> FeasibleSet:
    if dimension < 1:
        raise ValueError("Dimension must be positive.")
    return FeasibleSet(SetKind.WHOLE_SPACE, int(dimension))


def box(lower, upper, dimension: int | None = None) -> FeasibleSet:
    """Box set; scalar bounds are broadcast when ``dimension`` is given."""
    lower_arr = np.atleast_1d(np.asarray(lower, dtype=np.float64))
    upper_arr = np.atleast_1d(np.asarray(upper, dtype=np.float64))
    if dimension is not None:
        lower_arr = np.broadcast_to(lower_arr, (dimension,)).copy()
        upper_arr = np.broadcast_to(upper_arr, (dimension,)).copy()
    if lower_arr.shape != upper_arr.shape:
        raise DimensionMismatchError("Box bounds must have the same dimension.")
    if np.any(lower_arr > upper_arr):
        raise ValueError("Box lower bound must not exceed the upper bound.")
    return FeasibleSet(SetKind.BOX, lower_arr.size, lower=lower_arr, upper=upper_arr)


def ball(center, radius: float) -> FeasibleSet:
    center_arr = np.atleast_1d(np.asarray(center, dtype=np.float64)).copy()
    if not radius > 0:
        raise ValueError("Ball radius must be positive.")
    return FeasibleSet(SetKind.BALL, center_arr.size, center=center_arr, radius=float(radius))


def _as_vector(x, dimension: int, name: str = "x") -> np.ndarray:
    vector = np.asarray(x, dtype=np.float64)
    if vector.ndim != 1:
        vector = np.atleast_1d(vector).ravel()
    check_dimension(vector, dimension, name)
    return vector


def _generator_vector(dgf: DistanceGenerator, x, name: str = "x") -> np.ndarray:
    vector = np.asarray(x, dtype=np.float64)
    if dgf.dimension is not None:
        vector = _as_vector(vector, dgf.dimension, name)
    return vector


def omega_value(dgf: DistanceGenerator, x, dimension: int | None = None) -> float:
    vector = _generator_vector(dgf, x)
    if dimension is not None:
        check_dimension(vector, dimension)
    return dgf.omega(vector)


def grad_omega(dgf: DistanceGenerator, x) -> np.ndarray:
    return dgf.gradient(_generator_vector(dgf, x))


def bregman_distance(dgf: DistanceGenerator, x, y) -> float:
    """D(x, y) = omega(y) - omega(x) - <grad omega(x), y - x>."""
    x_arr = _generator_vector(dgf, x)
    y_arr = _as_vector(y, x_arr.size, "y")
    value = dgf.omega(y_arr) - dgf.omega(x_arr) - float(np.dot(dgf.gradient(x_arr), y_arr - x_arr))
    # rounding can push the difference slightly below zero
    return max(value, 0.0)


def project(feasible_set: FeasibleSet, x) -> np.ndarray:
    vector = _as_vector(x, feasible_set.dimension)
    if feasible_set.kind is SetKind.BOX:
        return clip_to_box(vector, feasible_set.lower, feasible_set.upper)
    if feasible_set.kind is SetKind.BALL:
        return project_to_ball(vector, feasible_set.center, feasible_set.radius)
    return vector.copy()


def prox_map(dgf: DistanceGenerator, feasible_set: FeasibleSet, x, y) -> np.ndarray:
    """argmin over the set of <y, z> + D(x, z)."""
    x_arr = _as_vector(x, feasible_set.dimension)
    y_arr = _as_vector(y, feasible_set.dimension, "y")
    if not feasible_set.contains(x_arr):
        raise InfeasiblePointError("Prox center x lies outside the feasible set.")
    if dgf.kind is GeneratorKind.EUCLIDEAN_HALF_SQUARE:
        return project(feasible_set, x_arr - y_arr)
    raise NotImplementedError(f"No prox mapping for generator {dgf.kind.value}.")
