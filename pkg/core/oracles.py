"""
Stochastic first-order oracles for the inner objective f = E[F(., xi)] and the
outer objective h = E[H(., xi)].

Kinks are broken the same way everywhere: sign(0) = 0 for the l1 term and the
max{0, t} branch contributes a zero subgradient when t == 0 exactly. With this
rule the probability-weighted average of the scenario subgradients equals the
exact subgradient returned by ``exact_subgradient``.
"""
from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from core.errors import DimensionMismatchError, UnsupportedOracleError, check_dimension
from core.geometry import FeasibleSet
from utils.numba_funcs import csr_row_dot, elastic_net_subgradient, hinge_row_subgradient


logger = logging.getLogger(__name__)

SAMPLE_BLOCK_SIZE = 8192


class SampleSource:
    """Seeded uniform stream; every iteration consumes two draws (xi_k, then xi~_k)."""

    def __init__(self, seed: int, block_size: int = SAMPLE_BLOCK_SIZE):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._block_size = int(block_size)
        self._block = np.empty(0)
        self._position = 0
        self.draws = 0

    def next_uniform(self) -> float:
        if self._position >= self._block.size:
            self._block = self._rng.random(self._block_size)
            self._position = 0
        value = self._block[self._position]
        self._position += 1
        self.draws += 1
        return float(value)


class StochasticOracle(ABC):
    """Value / subgradient oracle for E[G(x, xi)] over a finite scenario set.

    ``support_size`` is None for deterministic closed-form oracles.
    """

    dimension: int
    support_size: int | None = None
    strong_convexity: float = 0.0
    smoothness: float | None = None
    lower_bound: float | None = None

    def __init__(self, dimension: int, probabilities=None):
        self.dimension = int(dimension)
        self.probabilities = None
        self._cumulative = None
        if probabilities is not None:
            probs = np.asarray(probabilities, dtype=np.float64)
            self.probabilities = probs
            self._cumulative = np.cumsum(probs)

    @property
    def is_deterministic(self) -> bool:
        return self.support_size is None

    def scenario_index(self, u: float) -> int:
        size = self.support_size
        if size is None:
            return 0
        if self._cumulative is None:
            return min(int(u * size), size - 1)
        return min(int(np.searchsorted(self._cumulative, u, side="right")), size - 1)

    def scenario_weight(self, i: int) -> float:
        if self.probabilities is not None:
            return float(self.probabilities[i])
        return 1.0 / self.support_size

    @abstractmethod
    def scenario_value(self, x: np.ndarray, i: int) -> float:
        ...

    @abstractmethod
    def scenario_subgradient(self, x: np.ndarray, i: int) -> np.ndarray:
        ...

    def exact_value(self, x: np.ndarray) -> float:
        if self.support_size is None:
            raise UnsupportedOracleError("Oracle has no finite support to average over.")
        return float(sum(self.scenario_weight(i) * self.scenario_value(x, i) for i in range(self.support_size)))

    def exact_subgradient(self, x: np.ndarray) -> np.ndarray:
        if self.support_size is None:
            raise UnsupportedOracleError("Oracle has no finite support to average over.")
        total = np.zeros(self.dimension)
        for i in range(self.support_size):
            total += self.scenario_weight(i) * self.scenario_subgradient(x, i)
        return total

    def sample_subgradient(self, x: np.ndarray, u: float, exact: bool = False) -> np.ndarray:
        if exact or self.support_size is None:
            return self.exact_subgradient(x)
        return self.scenario_subgradient(x, self.scenario_index(u))

    def values_at(self, points: np.ndarray) -> np.ndarray:
        return np.array([self.exact_value(point) for point in points])

    def subgradient_bound(self, radius: float | None) -> float | None:
        """Upper bound on ||g(x, xi)||_2 over ||x|| <= radius; None when unknown."""
        return None

    def value_bound(self, radius: float | None) -> float | None:
        return None


class DeterministicOracle(StochasticOracle):
    support_size = None

    @abstractmethod
    def value(self, x: np.ndarray) -> float:
        ...

    @abstractmethod
    def subgradient(self, x: np.ndarray) -> np.ndarray:
        ...

    def scenario_value(self, x, i):
        return self.value(x)

    def scenario_subgradient(self, x, i):
        return self.subgradient(x)

    def exact_value(self, x):
        return self.value(x)

    def exact_subgradient(self, x):
        return self.subgradient(x)


class LeastSquaresOracle(StochasticOracle):
    """f(x) = ||Ax - b||^2 with scenarios F(x, xi_i) = m (a_i^T x - b_i)^2, rows drawn uniformly."""

    lower_bound = 0.0

    def __init__(self, A, b):
        matrix = sp.csr_matrix(A, dtype=np.float64) if sp.issparse(A) else np.atleast_2d(np.asarray(A, dtype=np.float64))
        rhs = np.atleast_1d(np.asarray(b, dtype=np.float64)).ravel()
        rows, cols = matrix.shape
        if rhs.size != rows:
            raise DimensionMismatchError(f"b has length {rhs.size}, expected {rows} (rows of A).")
        super().__init__(cols)
        self.A = matrix
        self.b = rhs
        self.support_size = rows
        self.sparse = sp.issparse(matrix)
        if self.sparse:
            self._row_norms = np.sqrt(np.asarray(matrix.multiply(matrix).sum(axis=1)).ravel())
            self.smoothness = 2.0 * float(sp.linalg.norm(matrix)) ** 2
        else:
            self._row_norms = np.linalg.norm(matrix, axis=1)
            self.smoothness = 2.0 * float(np.linalg.norm(matrix, 2)) ** 2

    def _residual(self, x, i):
        if self.sparse:
            A = self.A
            return csr_row_dot(A.indptr, A.indices, A.data, i, x) - self.b[i]
        return float(self.A[i] @ x) - self.b[i]

    def scenario_value(self, x, i):
        return self.support_size * self._residual(x, i) ** 2

    def scenario_subgradient(self, x, i):
        scale = 2.0 * self.support_size * self._residual(x, i)
        if self.sparse:
            out = np.zeros(self.dimension)
            start, stop = self.A.indptr[i], self.A.indptr[i + 1]
            out[self.A.indices[start:stop]] = scale * self.A.data[start:stop]
            return out
        return scale * self.A[i]

    def residual(self, x):
        return self.A @ x - self.b

    def exact_value(self, x):
        r = self.residual(x)
        return float(r @ r)

    def exact_subgradient(self, x):
        return 2.0 * np.asarray(self.A.T @ self.residual(x)).ravel()

    def values_at(self, points):
        residuals = np.asarray(self.A @ np.asarray(points).T).T - self.b
        return np.einsum("ij,ij->i", residuals, residuals)

    def subgradient_bound(self, radius):
        if radius is None:
            return None
        m = self.support_size
        return float(np.max(2.0 * m * self._row_norms * (self._row_norms * radius + np.abs(self.b))))


class HingeOracle(StochasticOracle):
    """f(x) = mean_i max{0, 1 - b_i <x, a_i>}, examples drawn uniformly."""

    lower_bound = 0.0

    def __init__(self, A, labels):
        matrix = sp.csr_matrix(A, dtype=np.float64)
        labels_arr = np.asarray(labels, dtype=np.float64).ravel()
        if matrix.shape[0] == 0:
            raise ValueError("Hinge data must contain at least one example.")
        if labels_arr.size != matrix.shape[0]:
            raise DimensionMismatchError("Need exactly one label per example.")
        if not np.all(np.isin(labels_arr, (-1.0, 1.0))):
            raise ValueError("Hinge labels must be -1 or +1.")
        super().__init__(matrix.shape[1])
        matrix.sort_indices()
        self.A = matrix
        self.labels = labels_arr
        self.support_size = matrix.shape[0]
        self._row_norms = np.sqrt(np.asarray(matrix.multiply(matrix).sum(axis=1)).ravel())

    def margins(self, x):
        return self.labels * np.asarray(self.A @ x).ravel()

    def losses(self, x):
        return np.maximum(0.0, 1.0 - self.margins(x))

    def scenario_value(self, x, i):
        A = self.A
        margin = self.labels[i] * csr_row_dot(A.indptr, A.indices, A.data, i, x)
        return max(0.0, 1.0 - margin)

    def scenario_subgradient(self, x, i):
        A = self.A
        return hinge_row_subgradient(A.indptr, A.indices, A.data, i, self.labels[i], x)

    def exact_value(self, x):
        return float(np.mean(self.losses(x)))

    def exact_subgradient(self, x):
        active = (1.0 - self.margins(x) > 0.0).astype(np.float64)
        return -np.asarray(self.A.T @ (active * self.labels)).ravel() / self.support_size

    def values_at(self, points):
        margins = self.labels[:, None] * np.asarray(self.A @ np.asarray(points).T)
        return np.mean(np.maximum(0.0, 1.0 - margins), axis=0)

    def subgradient_bound(self, radius):
        return float(np.max(self._row_norms))


class ElasticNetOracle(DeterministicOracle):
    """h(x) = (mu/2) ||x||_2^2 + ||x||_1."""

    lower_bound = 0.0

    def __init__(self, mu: float, dimension: int):
        if not mu > 0:
            raise ValueError("Elastic-net modulus mu_h must be positive.")
        super().__init__(dimension)
        self.mu = float(mu)
        self.strong_convexity = self.mu
        self.smoothness = self.mu

    def value(self, x):
        return 0.5 * self.mu * float(x @ x) + float(np.sum(np.abs(x)))

    def subgradient(self, x):
        return elastic_net_subgradient(np.asarray(x, dtype=np.float64), self.mu)

    def values_at(self, points):
        points = np.asarray(points)
        return 0.5 * self.mu * np.einsum("ij,ij->i", points, points) + np.sum(np.abs(points), axis=1)

    def subgradient_bound(self, radius):
        if radius is None:
            return None
        return self.mu * radius + np.sqrt(self.dimension)

    def value_bound(self, radius):
        if radius is None:
            return None
        return 0.5 * self.mu * radius ** 2 + np.sqrt(self.dimension) * radius


class QuadraticOracle(DeterministicOracle):
    """Separable quadratic sum_j w_j (x_j - c_j)^2 with w_j >= 0."""

    lower_bound = 0.0

    def __init__(self, weights, center):
        weights_arr = np.atleast_1d(np.asarray(weights, dtype=np.float64))
        center_arr = np.atleast_1d(np.asarray(center, dtype=np.float64))
        if weights_arr.shape != center_arr.shape:
            raise DimensionMismatchError("Quadratic weights and center must have the same dimension.")
        if np.any(weights_arr < 0):
            raise ValueError("Quadratic weights must be non-negative.")
        super().__init__(weights_arr.size)
        self.weights = weights_arr
        self.center = center_arr
        self.strong_convexity = 2.0 * float(weights_arr.min())
        self.smoothness = 2.0 * float(weights_arr.max())

    def value(self, x):
        d = x - self.center
        return float(np.sum(self.weights * d * d))

    def subgradient(self, x):
        return 2.0 * self.weights * (x - self.center)

    def values_at(self, points):
        d = np.asarray(points) - self.center
        return np.sum(self.weights * d * d, axis=1)

    def subgradient_bound(self, radius):
        if radius is None:
            return None
        return 2.0 * float(self.weights.max()) * (radius + float(np.linalg.norm(self.center)))

    def value_bound(self, radius):
        if radius is None:
            return None
        return float(self.weights.max()) * (radius + float(np.linalg.norm(self.center))) ** 2


@dataclass(frozen=True, eq=False)
class BilevelProblem:
    inner: StochasticOracle
    outer: StochasticOracle
    feasible_set: FeasibleSet
    mu_h: float
    c_f: float | None
    c_h: float | None
    m_h: float | None
    name: str = "problem"
    deterministic: bool = False

    @property
    def dimension(self) -> int:
        return self.feasible_set.dimension

    @property
    def bounds_verified(self) -> bool:
        return self.c_f is not None and self.c_h is not None


def make_problem(
    inner: StochasticOracle,
    outer: StochasticOracle,
    feasible_set: FeasibleSet,
    name: str = "problem",
    deterministic: bool = False,
) -> BilevelProblem:
    """Pair the oracles and derive mu_h, C_F, C_H and M_h from them and the set's M."""
    if inner.dimension != feasible_set.dimension or outer.dimension != feasible_set.dimension:
        raise DimensionMismatchError(
            f"Oracle dimensions ({inner.dimension}, {outer.dimension}) do not match "
            f"the feasible set ({feasible_set.dimension})."
        )
    mu_h = float(outer.strong_convexity)
    if not mu_h > 0:
        raise ValueError("Outer objective must be strongly convex (mu_h > 0).")
    radius = feasible_set.diameter_bound
    c_f = inner.subgradient_bound(radius)
    c_h = outer.subgradient_bound(radius)
    if c_f is None or c_h is None:
        logger.warning(
            "Subgradient bounds for %s are unverified on %s; bound diagnostics are disabled.",
            name, feasible_set.describe(),
        )
    return BilevelProblem(
        inner=inner,
        outer=outer,
        feasible_set=feasible_set,
        mu_h=mu_h,
        c_f=c_f,
        c_h=c_h,
        m_h=outer.value_bound(radius),
        name=name,
        deterministic=deterministic,
    )


def make_least_squares(A, b) -> LeastSquaresOracle:
    return LeastSquaresOracle(A, b)


def make_hinge_elm(data) -> HingeOracle:
    """Hinge oracle from a list of (a, b) pairs; a may be sparse, a dict {index: value} or dense."""
    pairs = list(data)
    if not pairs:
        raise ValueError("Hinge data must contain at least one example.")
    rows = []
    labels = []
    for a, label in pairs:
        if label not in (-1, 1):
            raise ValueError(f"Invalid label {label!r}; expected -1 or +1.")
        if isinstance(a, dict):
            size = max(a) + 1 if a else 0
            row = sp.csr_matrix((list(a.values()), ([0] * len(a), list(a.keys()))), shape=(1, size))
        else:
            row = sp.csr_matrix(np.atleast_2d(a.toarray() if sp.issparse(a) else np.asarray(a, dtype=np.float64)))
        rows.append(row)
        labels.append(label)
    width = max(row.shape[1] for row in rows)
    rows = [sp.csr_matrix((row.data, row.indices, row.indptr), shape=(1, width)) for row in rows]
    return HingeOracle(sp.vstack(rows, format="csr"), labels)


def make_elastic_net(mu_h: float, n: int) -> ElasticNetOracle:
    return ElasticNetOracle(mu_h, n)


def make_quadratic(weights, center=None) -> QuadraticOracle:
    weights_arr = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    if center is None:
        center = np.zeros_like(weights_arr)
    return QuadraticOracle(weights_arr, center)


def sample_subgrad_f(p: BilevelProblem, x: np.ndarray, src: SampleSource) -> np.ndarray:
    check_dimension(x, p.dimension)
    return p.inner.sample_subgradient(x, src.next_uniform(), exact=p.deterministic)


def sample_subgrad_h(p: BilevelProblem, x: np.ndarray, src: SampleSource) -> np.ndarray:
    check_dimension(x, p.dimension)
    return p.outer.sample_subgradient(x, src.next_uniform(), exact=p.deterministic)


def exact_f(p: BilevelProblem, x: np.ndarray) -> float:
    return p.inner.exact_value(np.asarray(x, dtype=np.float64))


def exact_h(p: BilevelProblem, x: np.ndarray) -> float:
    return p.outer.exact_value(np.asarray(x, dtype=np.float64))


def mean_hinge_loss(oracle: HingeOracle, x: np.ndarray, subsample: int | None = None, seed: int = 0) -> float:
    """Average hinge loss, optionally over a seeded subsample of the examples."""
    losses = oracle.losses(np.asarray(x, dtype=np.float64))
    if subsample is None or subsample >= losses.size:
        return float(np.mean(losses))
    rows = np.random.default_rng(seed).choice(losses.size, size=subsample, replace=False)
    return float(np.mean(losses[rows]))
