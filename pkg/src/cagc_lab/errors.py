"""Exception hierarchy shared by all modules."""


class CagcLabError(Exception):
    """Base class for all library errors."""


class AllInfinite(CagcLabError):
    """Input function has no finite value anywhere."""


class NotLowerSemicontinuous(CagcLabError):
    """Boundary data violates lower semicontinuity or segment convexity."""


class RegionOutsideDomain(CagcLabError):
    """Requested node region leaves the effective domain interior."""


class SegmentLeavesDomain(CagcLabError):
    """Probe segment is not contained in the closed effective domain."""


class StencilOutOfDomain(CagcLabError):
    """A full finite-difference stencil does not fit at the node."""


class NonConvexBoundaryData(CagcLabError):
    """Dirichlet data is not convex along straight boundary segments."""


class NoConvergence(CagcLabError):
    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class DomainTooSmall(CagcLabError):
    """Fewer than 8x8 interior grid nodes."""


class DegenerateCone(CagcLabError):
    """Cone section is degenerate or does not contain the origin."""


class DegenerateHull(CagcLabError):
    """Convex hull of the finite boundary samples has empty interior."""


class DegenerateHessian(CagcLabError):
    def __init__(self, message, nodes=None):
        super().__init__(message)
        self.nodes = nodes if nodes is not None else []


class NegativeMetric(CagcLabError):
    def __init__(self, message, nodes=None):
        super().__init__(message)
        self.nodes = nodes if nodes is not None else []


class NotContained(CagcLabError):
    """First domain is not geometrically contained in the second."""


class NotBoundaryPoint(CagcLabError):
    """Query point is not on the boundary of the effective domain."""


class PointOutsideDomain(CagcLabError):
    """Closed-form support function queried outside the domain closure."""


class NonPositive(CagcLabError):
    """Parameter that must be positive is not."""


class InsufficientResolution(CagcLabError):
    """Grid too coarse for the requested diagnostic."""


class MonotonicityViolation(CagcLabError):
    """Foliation family failed the strict monotonicity requirement."""


class ConfigError(CagcLabError):
    """Malformed or schema-invalid scenario configuration."""
