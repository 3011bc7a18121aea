from __future__ import annotations


class SelectaFlowError(Exception):
    """Base class for every error raised by SelectaFlow."""


class DimensionMismatchError(SelectaFlowError, ValueError):
    pass


class InfeasiblePointError(SelectaFlowError, ValueError):
    """A point that must lie in the feasible set does not."""


class ScheduleValidationError(SelectaFlowError, ValueError):
    pass


class CertificateError(SelectaFlowError, ValueError):
    """A reference solve could not certify its accuracy."""


class ConfigError(SelectaFlowError, ValueError):
    pass


class UnsupportedOracleError(SelectaFlowError, NotImplementedError):
    """The oracle cannot provide the requested quantity (e.g. an exact expectation)."""


def check_dimension(vector, expected: int, name: str = "x") -> None:
    size = len(vector)
    if size != expected:
        raise DimensionMismatchError(f"{name} has dimension {size}, expected {expected}.")
