"""Exception types raised across the package."""


class PancakeError(Exception):
    pass


class DegenerateInputError(PancakeError, ValueError):
    """Input is degenerate, e.g. a zero-norm quaternion."""


class DegenerateCovarianceError(PancakeError, ValueError):
    pass


class ConfigurationError(PancakeError, ValueError):
    pass


class InsufficientPointsError(PancakeError, ValueError):
    pass


class NoReliableNormalError(PancakeError, LookupError):
    pass


class ContractViolation(PancakeError, ValueError):
    """Arguments do not satisfy the caller/callee contract (shapes, ordering)."""


class NumericalError(PancakeError, FloatingPointError):
    pass
