"""Exception hierarchy."""


class SigmakError(Exception):
    """Base class for all package errors."""


class DimensionError(SigmakError, ValueError):
    """Matrix size, cone level, or grid dimension mismatch."""


class ConeViolation(SigmakError, ValueError):
    """A matrix required to lie in the Garding cone does not."""


class GridError(SigmakError, ValueError):
    """Increment not grid aligned, region too thin, or grid too small."""


class DomainError(SigmakError, ValueError):
    """Evaluation outside the admissible (x, z, xi) set."""


class ThresholdError(SigmakError, ValueError):
    """An exponent lies at or below the threshold its estimate requires."""


class ConfigError(SigmakError, ValueError):
    """Malformed problem or suite configuration."""


class SolverError(SigmakError, RuntimeError):
    """Base class for Newton solver failures."""


class InadmissibleInit(SolverError):
    pass


class LineSearchExhausted(SolverError):
    pass


class LinearSolveFailure(SolverError):
    pass


class MaxIterations(SolverError):
    pass
