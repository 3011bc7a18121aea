"""
Power-law stepsize / regularization schedules and their validators.

gamma_k = gamma0 / (k + 1) ** a, lambda_k = lambda0 / (k + 1) ** b, averaging
weights proportional to gamma_k ** r.

The validators check the sufficient power-law conditions rather than the raw
series conditions; ``diagnostic_probe`` evaluates partial sums of the raw series
numerically. Note that the rate schedule (a = 0.5 + 0.5 delta, b = 0.5 - delta)
passes the convergence conditions but always fails the recursive-bound
conditions, because 3a + b = 2 + 0.5 delta. Regime choice is left to the caller.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from core.errors import ScheduleValidationError
from utils.numba_funcs import power_law


logger = logging.getLogger(__name__)

DIAGNOSTIC_HORIZON = 1_000_000


@dataclass(frozen=True)
class Condition:
    label: str
    inequality: str
    passed: bool


@dataclass(frozen=True)
class ValidationReport:
    name: str
    conditions: tuple[Condition, ...]

    @property
    def passed(self) -> bool:
        return all(condition.passed for condition in self.conditions)

    def failures(self) -> list[Condition]:
        return [condition for condition in self.conditions if not condition.passed]

    def format(self) -> str:
        lines = [f"{self.name}: {'PASS' if self.passed else 'FAIL'}"]
        for condition in self.conditions:
            mark = "ok " if condition.passed else "BAD"
            lines.append(f"  [{mark}] {condition.label}: {condition.inequality}")
        return "\n".join(lines)


@dataclass(frozen=True)
class Schedule:
    gamma0: float
    lambda0: float
    a: float
    b: float
    r: float = 0.0
    delta: float | None = None
    override: bool = False
    reports: tuple[ValidationReport, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise ScheduleValidationError("gamma0 must be positive.")
        if not self.lambda0 > 0:
            raise ScheduleValidationError("lambda0 must be positive.")
        if not self.r < 1:
            raise ScheduleValidationError("Averaging exponent r must be below 1.")

    def gamma(self, k):
        return power_law(self.gamma0, self.a, k)

    def lam(self, k):
        return power_law(self.lambda0, self.b, k)

    def averaging_weight(self, k) -> float:
        return float(self.gamma(k) ** self.r)

    def with_reports(self) -> "Schedule":
        """Copy carrying the cached validation reports."""
        reports = (validate_assumption3(self), validate_assumption4(self))
        return replace(self, reports=reports)


def schedule_at(s: Schedule, k: int) -> tuple[float, float]:
    if k < 0:
        raise ValueError("Iteration index must be non-negative.")
    return float(s.gamma(k)), float(s.lam(k))


def validate_assumption3(s: Schedule) -> ValidationReport:
    a, b = s.a, s.b
    conditions = (
        Condition("a > 0", f"{a:g} > 0", a > 0),
        Condition("b > 0", f"{b:g} > 0", b > 0),
        Condition("a > b", f"{a:g} > {b:g}", a > b),
        Condition("a > 0.5", f"{a:g} > 0.5", a > 0.5),
        Condition("a + b < 1", f"{a + b:g} < 1", a + b < 1),
    )
    return ValidationReport("convergence conditions (power law)", conditions)


def validate_assumption4(s: Schedule) -> ValidationReport:
    a, b = s.a, s.b
    conditions = (
        Condition("a > 0", f"{a:g} > 0", a > 0),
        Condition("b > 0", f"{b:g} > 0", b > 0),
        Condition("a > b", f"{a:g} > {b:g}", a > b),
        Condition("a + b < 1", f"{a + b:g} < 1", a + b < 1),
        Condition("3a + b < 2", f"{3 * a + b:g} < 2", 3 * a + b < 2),
    )
    return ValidationReport("recursive-bound conditions (power law)", conditions)


def validate_averaging(s: Schedule) -> ValidationReport:
    conditions = (
        Condition("r < 1", f"{s.r:g} < 1", s.r < 1),
        Condition("a * r <= 1", f"{s.a * s.r:g} <= 1", s.a * s.r <= 1),
    )
    return ValidationReport("averaging conditions", conditions)


def rate_schedule(delta: float, gamma0: float = 1.0, lambda0: float = 1.0, r: float = 0.0) -> Schedule:
    """gamma_k = gamma0 / (k+1)^(0.5 + 0.5 delta), lambda_k = lambda0 / (k+1)^(0.5 - delta)."""
    if not 0.0 < delta < 0.5:
        raise ScheduleValidationError("delta must lie strictly between 0 and 0.5.")
    schedule = Schedule(
        gamma0=gamma0,
        lambda0=lambda0,
        a=0.5 + 0.5 * delta,
        b=0.5 - delta,
        r=r,
        delta=delta,
    )
    return schedule.with_reports()


def power_schedule(gamma0: float, lambda0: float, a: float, b: float, r: float = 0.0) -> Schedule:
    return Schedule(gamma0=gamma0, lambda0=lambda0, a=a, b=b, r=r).with_reports()


def constant_schedule(gamma0: float, lambda0: float) -> Schedule:
    return Schedule(gamma0=gamma0, lambda0=lambda0, a=0.0, b=0.0, override=True)


def check_initial_product(s: Schedule, l_omega: float, mu_h: float) -> bool:
    if l_omega <= 0 or mu_h <= 0:
        raise ValueError("L_omega and mu_h must be positive.")
    return s.gamma0 * s.lambda0 <= l_omega / mu_h


def require_runnable(s: Schedule, l_omega: float, mu_h: float, override: bool = False) -> None:
    """Raise unless the initial product holds or an override is in effect."""
    if check_initial_product(s, l_omega, mu_h):
        return
    message = (
        f"gamma0 * lambda0 = {s.gamma0 * s.lambda0:g} exceeds L_omega / mu_h = {l_omega / mu_h:g}."
    )
    if override or s.override:
        logger.warning("%s Continuing because validation is overridden.", message)
        return
    raise ScheduleValidationError(message)


@dataclass(frozen=True)
class SeriesProbe:
    horizon: int
    sum_gamma_lambda: float
    sum_drift_ratio: float
    sum_gamma_squared: float
    tail_drift_limit: float
    tail_gamma_over_lambda: float


def diagnostic_probe(s: Schedule, horizon: int = DIAGNOSTIC_HORIZON) -> SeriesProbe:
    """Partial sums and tail values of the raw series conditions up to ``horizon``."""
    k = np.arange(horizon + 1, dtype=np.float64)
    gamma = s.gamma(k)
    lam = s.lam(k)
    lam_prev = np.concatenate(([lam[0]], lam[:-1]))
    drift = (lam_prev / lam - 1.0) ** 2
    return SeriesProbe(
        horizon=horizon,
        sum_gamma_lambda=float(np.sum(gamma * lam)),
        sum_drift_ratio=float(np.sum(drift / (gamma * lam))),
        sum_gamma_squared=float(np.sum(gamma ** 2)),
        tail_drift_limit=float(drift[-1] / (gamma[-1] ** 2 * lam[-1] ** 2)),
        tail_gamma_over_lambda=float(gamma[-1] / lam[-1]),
    )
