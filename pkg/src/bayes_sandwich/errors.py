"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: data problems exit with 2, numerical
failures with 3.
"""


class BrseError(Exception):
    """Base class for all package errors."""


class DataError(BrseError, ValueError):
    """Input data are malformed, inconsistent with the model, or empty."""


class NumericalError(BrseError, ArithmeticError):
    """A computation left its numerically valid domain.

    Raised for singular or badly conditioned matrices, overflowing linear
    predictors, and optimizer non-convergence.
    """


class ConvergenceError(NumericalError):
    """An iterative fit did not reach its tolerance."""
