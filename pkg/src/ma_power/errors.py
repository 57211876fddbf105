"""Exception hierarchy shared by the solvers, the harness and the tool surfaces."""


class MaPowerError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(MaPowerError, ValueError):
    """Rejected input: bad grid geometry, dimension mismatch, inconsistent fixings."""


class StructuralInfeasibleError(MaPowerError):
    """No placement of the elements satisfies the geometric constraints."""


class BudgetExceededError(MaPowerError):
    """An enumeration would exceed its configured budget."""


class ResultFileError(MaPowerError):
    """A result file is missing, malformed or inconsistent with its config echo."""
