"""Exception hierarchy shared by all modules.

The split matters for the batch front end: input problems exit with code 2,
numerical failures (singular loci, overflow, positivity loss) with code 3,
tolerance failures with code 1.
"""


class IasurfError(Exception):
    """Base class for package errors."""


class InputError(IasurfError, ValueError):
    """Malformed arguments, configs or files."""


class GridMismatchError(InputError):
    """Fields combined in one operation must share the grid exactly."""


class NumericalError(IasurfError, RuntimeError):
    """Computation failed for a numerical reason (exit code 3)."""


class SingularityError(NumericalError):
    """Singular locus hit: vanishing denominator, p <= 0, P(f) <= 0, r0 <= 0."""


class IntegrationOverflowError(NumericalError):
    """Linear-system integration produced non-finite state."""


class ConsistencyError(NumericalError):
    """An identity that should hold numerically was violated (a_y != b_x,
    r0 not in the solution space, closure defect above tolerance)."""


class ToleranceError(IasurfError):
    """Residual norms exceeded the acceptance tolerance (exit code 1)."""
