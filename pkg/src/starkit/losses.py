"""Distance functions, the adaptive anisotropy-scaled loss, and its companions.

The core objective projects the prediction error onto the heatmap's principal
axes and scales each projection by 1/sqrt(lambda), so error along a direction
the distribution is already spread in (an ambiguous direction) counts less.
Two restriction modes keep the model from gaming this by inflating the
eigenvalues: a value penalty (lambda1+lambda2)/2, or detaching the eigen
quantities from the gradient. A Jensen-Shannon term toward an isotropic
Gaussian target is available as an optional distribution regularizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch
from .heatmap import DiscreteHeatmap, render_gaussian, soft_argmax
from .moments import Covariance2, EigenPair2, covariance_unbiased, eigen2x2


# ---------------------------------------------------------------------------
# distance kinds

@dataclass(frozen=True)
class L1:
    pass


@dataclass(frozen=True)
class L2:
    pass


@dataclass(frozen=True)
class SmoothL1:
    s: float = 0.01

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("s must be positive")


@dataclass(frozen=True)
class Wing:
    omega: float = 10.0
    epsilon: float = 2.0

    def __post_init__(self):
        if not (self.omega > 0 and self.epsilon > 0):
            raise ValueError("omega and epsilon must be positive")


DistanceKind = L1 | L2 | SmoothL1 | Wing


def scalar_distance(kind: DistanceKind, x: float) -> float:
    """d(x) for one scalar. Even, zero at zero, nondecreasing in |x|.

    L1: |x|. L2: x^2. SmoothL1: 0.5 x^2/s below the threshold s, |x| - 0.5 s
    above. Wing: omega*ln(1+|x|/eps) below omega, linear with matched offset
    above.
    """
    a = abs(x)
    if isinstance(kind, L1):
        return a
    if isinstance(kind, L2):
        return x * x
    if isinstance(kind, SmoothL1):
        return 0.5 * x * x / kind.s if a < kind.s else a - 0.5 * kind.s
    if isinstance(kind, Wing):
        if a < kind.omega:
            return kind.omega * math.log1p(a / kind.epsilon)
        c = kind.omega - kind.omega * math.log1p(kind.omega / kind.epsilon)
        return a - c
    raise TypeError(f"unknown distance kind {kind!r}")


def scalar_distance_deriv(kind: DistanceKind, x: float) -> float:
    """d'(x), with the subgradient at the L1/Wing kink fixed to 0."""
    if isinstance(kind, L1):
        return 0.0 if x == 0 else math.copysign(1.0, x)
    if isinstance(kind, L2):
        return 2.0 * x
    if isinstance(kind, SmoothL1):
        return x / kind.s if abs(x) < kind.s else math.copysign(1.0, x)
    if isinstance(kind, Wing):
        if x == 0:
            return 0.0
        a = abs(x)
        if a < kind.omega:
            return math.copysign(kind.omega / (kind.epsilon + a), x)
        return math.copysign(1.0, x)
    raise TypeError(f"unknown distance kind {kind!r}")


# ---------------------------------------------------------------------------
# restriction modes

@dataclass(frozen=True)
class ValueRestriction:
    """Add w * (lambda1 + lambda2)/2 to the objective."""

    w: float = 1.0

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("w must be nonnegative")


@dataclass(frozen=True)
class DetachRestriction:
    """Treat eigenvalues/eigenvectors as constants when differentiating."""


@dataclass(frozen=True)
class NoRestriction:
    """No guard at all; exists to reproduce the eigenvalue-inflation pathology."""


RestrictionMode = ValueRestriction | DetachRestriction | NoRestriction


@dataclass(frozen=True)
class LossConfig:
    distance: DistanceKind = field(default_factory=SmoothL1)
    restriction: RestrictionMode = field(default_factory=ValueRestriction)
    dr_weight: float = 0.0
    dr_sigma: float = 1.0
    lambda_floor: float = 1e-5

    def __post_init__(self):
        if self.dr_weight < 0:
            raise ValueError("dr_weight must be nonnegative")
        if not self.dr_sigma > 0:
            raise ValueError("dr_sigma must be positive")
        if not self.lambda_floor > 0:
            raise ValueError("lambda_floor must be positive")


# ---------------------------------------------------------------------------
# loss terms

def regression_loss(mu, y_t, kind: DistanceKind) -> float:
    """Coordinate-wise baseline: d(e_x) + d(e_y) with e = y_t - mu."""
    ex = float(y_t[0]) - float(mu[0])
    ey = float(y_t[1]) - float(mu[1])
    return scalar_distance(kind, ex) + scalar_distance(kind, ey)


def star_core(mu, eig: EigenPair2, y_t, kind: DistanceKind, lambda_floor: float) -> float:
    """Anisotropy-scaled error: sum_k d(v_k . e) / sqrt(max(lambda_k, floor))."""
    e = np.array([float(y_t[0]) - float(mu[0]), float(y_t[1]) - float(mu[1])])
    p1 = float(np.dot(eig.v1, e))
    p2 = float(np.dot(eig.v2, e))
    l1 = max(eig.lambda1, lambda_floor)
    l2 = max(eig.lambda2, lambda_floor)
    return scalar_distance(kind, p1) / math.sqrt(l1) + scalar_distance(kind, p2) / math.sqrt(l2)


def value_restriction(eig: EigenPair2) -> float:
    """(lambda1 + lambda2)/2, on the raw (un-floored) eigenvalues."""
    return 0.5 * (eig.lambda1 + eig.lambda2)


def js_regularizer(h: DiscreteHeatmap, target: DiscreteHeatmap) -> float:
    """Jensen-Shannon divergence between two heatmaps on the same grid.

    Natural log, 0*log(0/.) = 0 convention; the value lies in [0, ln 2].
    """
    if h.grid != target.grid:
        raise GridMismatch(f"grids differ: {h.grid} vs {target.grid}")
    p = h.probs
    q = target.probs
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_pm = np.where(p > 0, p * np.log(p / m), 0.0)
        kl_qm = np.where(q > 0, q * np.log(q / m), 0.0)
    return float(0.5 * kl_pm.sum() + 0.5 * kl_qm.sum())


def mahalanobis_loss(mu, sigma: Covariance2, y_t, lambda_floor: float = 1e-5) -> float:
    """(y_t - mu)^T Sigma^{-1} (y_t - mu), inverted through the eigen-factorization.

    Eigenvalues are floored so the inverse always exists.
    """
    eig = eigen2x2(sigma)
    e = np.array([float(y_t[0]) - float(mu[0]), float(y_t[1]) - float(mu[1])])
    p1 = float(np.dot(eig.v1, e))
    p2 = float(np.dot(eig.v2, e))
    return p1 * p1 / max(eig.lambda1, lambda_floor) + p2 * p2 / max(eig.lambda2, lambda_floor)


def heatmap_objective(h: DiscreteHeatmap, y_t, cfg: LossConfig) -> tuple[float, dict]:
    """Full objective for one already-normalized heatmap.

    Returns (loss, parts) where parts has the 'star', 'restriction' and 'dr'
    components; restriction is 0 unless the mode is ValueRestriction, dr is 0
    unless dr_weight > 0. Propagates DegenerateDistribution from the moments.
    """
    mu = soft_argmax(h)
    sigma = covariance_unbiased(h, mu)
    eig = eigen2x2(sigma)
    star = star_core(mu, eig, y_t, cfg.distance, cfg.lambda_floor)
    restriction = 0.0
    if isinstance(cfg.restriction, ValueRestriction):
        restriction = cfg.restriction.w * value_restriction(eig)
    dr = 0.0
    if cfg.dr_weight > 0:
        target = render_gaussian(h.grid, y_t, cfg.dr_sigma)
        dr = cfg.dr_weight * js_regularizer(h, target)
    return star + restriction + dr, {"star": star, "restriction": restriction, "dr": dr}


def total_objective(logits: np.ndarray, y_t, cfg: LossConfig) -> tuple[float, dict]:
    """Objective evaluated from raw logits (softmax-normalized, temperature 1).

    Accepts a single (H, W) logits matrix with a length-2 target, or a
    stacked (B, H, W) batch with (B, 2) targets, in which case the loss and
    every part are arithmetic means over the batch in index order.
    """
    from .heatmap import softmax_normalize

    z = np.asarray(logits, dtype=float)
    if z.ndim == 2:
        return heatmap_objective(softmax_normalize(z), y_t, cfg)
    if z.ndim != 3:
        raise ValueError(f"logits must be (H, W) or (B, H, W), got shape {z.shape}")
    targets = np.asarray(y_t, dtype=float)
    if targets.shape != (z.shape[0], 2):
        raise ValueError(f"targets shape {targets.shape} does not match batch {z.shape[0]}")
    total = 0.0
    parts = {"star": 0.0, "restriction": 0.0, "dr": 0.0}
    for b in range(z.shape[0]):
        loss_b, parts_b = heatmap_objective(softmax_normalize(z[b]), targets[b], cfg)
        total += loss_b
        for k in parts:
            parts[k] += parts_b[k]
    n = z.shape[0]
    return total / n, {k: v / n for k, v in parts.items()}
