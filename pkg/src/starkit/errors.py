"""Exception types shared across the package."""


class StarkitError(Exception):
    """Base class for all starkit errors."""


class NonFiniteInput(StarkitError):
    """An input array contains NaN or Inf."""


class CenterOutOfBounds(StarkitError):
    """A requested Gaussian center lies outside the grid."""


class GridMismatch(StarkitError):
    """Two heatmaps that must share a grid do not."""


class DegenerateDistribution(StarkitError):
    """The unbiased covariance denominator V1 - V2/V1 is (near) zero.

    Happens for delta-like heatmaps, where V1 = V2 = 1 and the
    Bessel-corrected estimator is undefined.
    """


class LandmarkOutOfBounds(StarkitError):
    """A contour landmark violates the required border margin."""


class NonFiniteLoss(StarkitError):
    """Training produced a NaN/Inf loss."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class ShapeMismatch(StarkitError):
    """Two annotations have different landmark counts."""


class ZeroNormalizer(StarkitError):
    """The NME normalizing distance is not positive."""


class EmptyInput(StarkitError):
    """An operation received an empty list."""


class ConfigError(StarkitError):
    """A run configuration is malformed (unknown key, bad value, bad type)."""
