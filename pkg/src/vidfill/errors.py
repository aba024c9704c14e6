"""Exception types shared across the engine.

The CLI maps these onto its exit-status contract: ConfigError -> 2,
InputError -> 3, NumericError -> 4. Everything else is a plain bug.
"""


class NumericError(ArithmeticError):
    """A kernel produced or received non-finite values."""


class StateError(RuntimeError):
    """An operation ran before its required state was prepared
    (e.g. guided attention without a populated key/value cache)."""


class UndefinedMetricError(ValueError):
    """A metric was requested on a domain where it has no value
    (empty out-of-mask region, zero-norm feature vector)."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class InputError(ValueError):
    """Missing or malformed input files."""
