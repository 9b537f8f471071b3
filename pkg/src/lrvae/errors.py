"""Exception types shared across the package."""


class LrVaeError(Exception):
    """Base class for all package errors."""


class DimensionError(LrVaeError, ValueError):
    """Tensor or array shapes do not conform."""


class ValidationError(LrVaeError, ValueError):
    """Inputs violate a documented precondition."""


class ContractError(LrVaeError, RuntimeError):
    """An API was used outside its contract (e.g. backward on a non-scalar)."""


class NumericalError(LrVaeError, ArithmeticError):
    """A loss or gradient became non-finite."""
