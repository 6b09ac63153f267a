"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class WeightedExpertsError(Exception):
    exit_code = 1


class ShapeError(WeightedExpertsError, ValueError):
    exit_code = 3


class NonFiniteError(WeightedExpertsError, FloatingPointError):
    exit_code = 4


class DivergenceError(WeightedExpertsError, RuntimeError):
    exit_code = 4


class DataError(WeightedExpertsError, ValueError):
    exit_code = 3


class PolicyError(WeightedExpertsError, PermissionError):
    """Raised when an operation would move pixel data across a site boundary."""

    exit_code = 3


class ConfigError(WeightedExpertsError, ValueError):
    exit_code = 2
