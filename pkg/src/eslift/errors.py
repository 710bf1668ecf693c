"""Exception types shared across the package."""


class EsliftError(Exception):
    """Base class for all package-specific errors."""


class AntipodalPointError(EsliftError):
    """Log map requested at (or numerically at) the cut locus of SO(3)."""


class OutOfDomainError(EsliftError):
    """Interval exponential left the open unit interval."""


class NonFiniteError(EsliftError):
    """An input vector contains NaN or infinity."""


class NonPositiveGammaError(EsliftError):
    """Regularisation weight must be strictly positive."""


class SamplingTooSmallError(EsliftError):
    """Sampling set too small for the requested support size."""


class DegenerateLossesError(EsliftError):
    """Loss values cannot separate a support (estimated gamma is zero)."""


class SupportTooSpreadError(EsliftError):
    """Measure support leaves the geodesic ball where averaging is convex."""


class NotPositiveDefiniteError(EsliftError):
    """A bilinear form that must be positive definite is not."""


class MissingAssetError(EsliftError):
    """A bundled data asset could not be found."""


class DegenerateAlignmentError(EsliftError):
    """Rotation alignment cross-covariance is rank deficient."""


class ZeroVolumeError(EsliftError):
    """Reference volume has zero norm, regularisation weights undefined."""


class NonPositiveSigmaError(EsliftError):
    """Estimated noise level is not strictly positive."""


class EmptyRunError(EsliftError):
    """Summary requested for an empty collection of results."""


class MemoryBudgetError(EsliftError):
    """Monolithic evaluation would exceed the configured memory budget."""
