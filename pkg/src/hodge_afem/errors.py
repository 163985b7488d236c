"""Exception types raised across the package."""


class HodgeAfemError(Exception):
    """Base class for all errors raised by hodge_afem."""


class GeometryError(HodgeAfemError):
    pass


class OutsideTube(GeometryError):
    """A point lies outside the tubular neighbourhood of the surface."""


class DegenerateTriangle(GeometryError):
    pass


class UnsupportedDegree(HodgeAfemError):
    pass


class UnknownSurface(HodgeAfemError):
    pass


class UnknownPreset(HodgeAfemError):
    pass


class DifferentRoot(HodgeAfemError):
    """Two meshes do not descend from the same initial triangulation."""


class NotNested(HodgeAfemError):
    pass


class SolveFailure(HodgeAfemError):
    pass


class SingularSystem(SolveFailure):
    pass


class UnknownCase(HodgeAfemError):
    pass


class ZeroEstimator(HodgeAfemError):
    """Raised by marking when every indicator vanishes; callers treat it as convergence."""


class BudgetExceeded(HodgeAfemError):
    pass


class MissingError(HodgeAfemError):
    pass


class InsufficientData(HodgeAfemError):
    pass


class ConfigError(HodgeAfemError):
    """Invalid run configuration. ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
