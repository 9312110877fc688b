"""Exception types shared across the package.

The CLI maps these onto exit codes: :class:`DataError` -> 2,
:class:`NumericError` -> 3.
"""


class TractFusionError(Exception):
    """Base class for all package errors."""


class DataError(TractFusionError, ValueError):
    """Input data failed validation (bad shapes, NaN, out-of-grid, ...)."""


class ShapeError(DataError):
    """A layer or model received arrays of the wrong shape."""


class NumericError(TractFusionError, ArithmeticError):
    """Training diverged or produced non-finite values."""
