"""Weighted PCA of a discrete heatmap: mean, covariance, 2x2 eigen-decomposition.

The covariance of the cell coordinates under the heatmap weights comes in a
biased form (divide by V1 = sum h_i) and a Bessel-corrected unbiased form
(divide by V1 - V2/V1 with V2 = sum h_i^2); the unbiased one is the default
everywhere downstream. The eigen-decomposition is the closed form for a
symmetric 2x2 matrix, with a deterministic basis for the degenerate case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDistribution
from .heatmap import DiscreteHeatmap, soft_argmax

# Unbiased-covariance denominator below this is treated as degenerate.
EPS_DEN = 1e-8
# Eigengap below this makes eigenvector derivatives unusable (they blow up
# as 1/(lambda1 - lambda2)); exported for the gradient module.
EPS_GAP = 1e-8

DET_TOL = 1e-9
ORTHO_TOL = 1e-12


@dataclass(frozen=True)
class WeightSums:
    """V1 = sum of weights, V2 = sum of squared weights."""

    v1_sum: float
    v2_sum: float

    def __post_init__(self):
        if not 0 < self.v2_sum <= self.v1_sum + 1e-15:
            raise ValueError(f"need 0 < V2 <= V1, got V1={self.v1_sum}, V2={self.v2_sum}")


@dataclass(frozen=True)
class Covariance2:
    """Symmetric 2x2 covariance stored as the three scalars xx, xy, yy (px^2)."""

    xx: float
    xy: float
    yy: float

    def __post_init__(self):
        if self.xx < 0 or self.yy < 0 or self.xx * self.yy - self.xy**2 < -DET_TOL:
            raise ValueError(f"not positive semidefinite: xx={self.xx}, xy={self.xy}, yy={self.yy}")

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.xx, self.xy], [self.xy, self.yy]])


@dataclass(frozen=True)
class EigenPair2:
    """Ordered eigenpairs of a Covariance2: lambda1 >= lambda2 >= 0.

    Eigenvectors are orthonormal with the first nonzero component of each
    made positive, so the basis is unique and platform-independent.
    """

    lambda1: float
    v1: np.ndarray
    lambda2: float
    v2: np.ndarray

    def __post_init__(self):
        if not (self.lambda1 >= self.lambda2 >= 0):
            raise ValueError(f"need lambda1 >= lambda2 >= 0, got {self.lambda1}, {self.lambda2}")
        for name, v in (("v1", self.v1), ("v2", self.v2)):
            v = np.asarray(v, dtype=float)
            if abs(np.linalg.norm(v) - 1.0) > ORTHO_TOL:
                raise ValueError(f"{name} is not unit length: {v}")
            if v[0] < 0 or (v[0] == 0 and v[1] < 0):
                raise ValueError(f"{name} violates the sign convention: {v}")
            object.__setattr__(self, name, v)
        if abs(float(np.dot(self.v1, self.v2))) > ORTHO_TOL:
            raise ValueError("eigenvectors are not orthogonal")


def weight_sums(h: DiscreteHeatmap) -> WeightSums:
    """Exact V1 and V2 of the heatmap weights."""
    p = h.probs
    return WeightSums(v1_sum=float(p.sum()), v2_sum=float((p * p).sum()))


def _scatter(h: DiscreteHeatmap, mu) -> tuple[float, float, float]:
    dx = h.grid.x_coords() - float(mu[0])
    dy = h.grid.y_coords() - float(mu[1])
    p = h.probs
    return (
        float(np.sum(p * dx * dx)),
        float(np.sum(p * dx * dy)),
        float(np.sum(p * dy * dy)),
    )


def covariance_biased(h: DiscreteHeatmap, mu) -> Covariance2:
    """Weighted covariance sum_i h_i (y_i - mu)(y_i - mu)^T / V1.

    `mu` must be soft_argmax(h); it is caller-supplied to avoid recomputing it.
    """
    sxx, sxy, syy = _scatter(h, mu)
    v1 = float(h.probs.sum())
    return Covariance2(xx=sxx / v1, xy=sxy / v1, yy=syy / v1)


def covariance_unbiased(h: DiscreteHeatmap, mu) -> Covariance2:
    """Bessel-corrected weighted covariance: scatter / (V1 - V2/V1).

    Raises DegenerateDistribution when the denominator falls below EPS_DEN,
    which happens for delta-like heatmaps (V1 = V2 = 1 makes it exactly 0).
    Flooring for downstream division lives in the loss layer instead, so the
    failure is visible where it originates.
    """
    sxx, sxy, syy = _scatter(h, mu)
    ws = weight_sums(h)
    den = ws.v1_sum - ws.v2_sum / ws.v1_sum
    if den < EPS_DEN:
        raise DegenerateDistribution(
            f"unbiased covariance denominator V1 - V2/V1 = {den!r} < {EPS_DEN} "
            "(delta-like heatmap)"
        )
    return Covariance2(xx=sxx / den, xy=sxy / den, yy=syy / den)


def _sign_normalized(v: np.ndarray) -> np.ndarray:
    if v[0] < 0 or (v[0] == 0 and v[1] < 0):
        return -v
    return v


def eigen2x2(sigma: Covariance2) -> EigenPair2:
    """Closed-form eigen-decomposition of a symmetric PSD 2x2 matrix.

    Eigenvalues are m +/- sqrt(((xx-yy)/2)^2 + xy^2) with m = (xx+yy)/2
    (the stable equivalent of m +/- sqrt(m^2 - det)); tiny negatives from
    roundoff are clamped to 0. For xy == 0 the basis is axis-aligned, and
    the tie lambda1 == lambda2 resolves to v1=(1,0), v2=(0,1).
    """
    xx, xy, yy = sigma.xx, sigma.xy, sigma.yy
    mean = 0.5 * (xx + yy)
    radius = float(np.hypot(0.5 * (xx - yy), xy))
    lam1 = max(mean + radius, 0.0)
    lam2 = max(mean - radius, 0.0)
    if xy == 0.0:
        v1 = np.array([1.0, 0.0]) if xx >= yy else np.array([0.0, 1.0])
    else:
        v1 = np.array([xy, lam1 - xx])
        v1 = _sign_normalized(v1 / np.hypot(v1[0], v1[1]))
    v2 = _sign_normalized(np.array([-v1[1], v1[0]]))
    return EigenPair2(lambda1=lam1, v1=v1, lambda2=lam2, v2=v2)


def anisotropy_ratio(e: EigenPair2, floor: float = 1e-5) -> float:
    """Elliptical eccentricity lambda1/lambda2, with both eigenvalues floored.

    The floor (px^2) keeps the ratio finite for needle-thin distributions
    and pins it to 1 for the all-zero case; 1e-5 matches the loss layer's
    eigenvalue floor. Always >= 1.
    """
    return max(e.lambda1, floor) / max(e.lambda2, floor)
