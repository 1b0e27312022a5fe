"""Exception hierarchy.

Every domain failure raised by the package derives from :class:`ChronoError`
so the command line front end can map it to exit code 2 in one place.
"""


class ChronoError(Exception):
    """Base class for all domain and validation errors."""


class NonConvergence(ChronoError):
    def __init__(self, max_iter, residual):
        super().__init__(f"no convergence after {max_iter} iterations (residual {residual:.3e})")
        self.max_iter = max_iter
        self.residual = residual


class SingularInnovation(ChronoError):
    pass


class UnstableCoefficient(ChronoError):
    pass


class NotPsd(ChronoError):
    pass


class InvalidTau(ChronoError, ValueError):
    pass


class Disconnected(ChronoError):
    pass


class TooManyReceivers(ChronoError):
    pass


class BadIndex(ChronoError, IndexError):
    pass


class DimensionMismatch(ChronoError, ValueError):
    pass


class NoStabilizingGainFound(ChronoError):
    pass


class Infeasible(ChronoError):
    pass


class NoFeasiblePoint(ChronoError):
    pass


class WeightsNotNormalized(ChronoError, ValueError):
    pass


class SeriesTooShort(ChronoError, ValueError):
    pass


class NonIntegerWindow(ChronoError, ValueError):
    pass


class GainModeMismatch(ChronoError):
    pass


class ConfigError(ChronoError):
    pass
