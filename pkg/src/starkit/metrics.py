"""Landmark evaluation metrics: NME, failure rate, CED curve, and AUC.

NME per image is the mean over landmarks of the euclidean error divided by
a normalizing distance (inter-ocular, inter-pupil, or a constant). FR and
AUC summarize the NME distribution against a threshold; the CED integral
behind AUC is computed exactly from the step function's breakpoints, so the
export resolution never affects the reported area.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, ShapeMismatch, ZeroNormalizer


@dataclass(frozen=True)
class Annotation:
    """One image's landmarks as an (N, 2) array of (x, y) pixels, N >= 2."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError(f"points must be (N, 2) with N >= 2, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain NaN/Inf")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Normalizer:
    """How to compute the NME denominator from the ground truth.

    kind 'inter_ocular' and 'inter_pupil' both measure the distance between
    two configured landmark indices (datasets disagree only on which two);
    'constant' uses a fixed pixel value.
    """

    kind: str = "constant"
    i: int = 0
    j: int = 1
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("inter_ocular", "inter_pupil", "constant"):
            raise ValueError(f"unknown normalizer kind {self.kind!r}")
        if self.kind == "constant" and not self.value > 0:
            raise ValueError("constant normalizer must be positive")

    def distance(self, gt: Annotation) -> float:
        if self.kind == "constant":
            return self.value
        n = len(gt)
        if not (0 <= self.i < n and 0 <= self.j < n):
            raise ValueError(f"normalizer indices ({self.i}, {self.j}) out of range for N={n}")
        return float(np.linalg.norm(gt.points[self.i] - gt.points[self.j]))


@dataclass(frozen=True)
class MetricReport:
    nme_per_image: list
    mean_nme: float
    fr: float
    auc: float
    ced: list

    def to_dict(self) -> dict:
        return {
            "nme_per_image": list(self.nme_per_image),
            "mean_nme": self.mean_nme,
            "fr": self.fr,
            "auc": self.auc,
            "ced": [[t, f] for t, f in self.ced],
        }


def nme(pred: Annotation, gt: Annotation, norm: Normalizer) -> float:
    """(1/N) sum_k ||pred_k - gt_k|| / D with D taken from the ground truth."""
    if len(pred) != len(gt):
        raise ShapeMismatch(f"landmark counts differ: {len(pred)} vs {len(gt)}")
    d = norm.distance(gt)
    if d <= 0:
        raise ZeroNormalizer(f"normalizing distance {d!r} is not positive")
    errors = np.linalg.norm(pred.points - gt.points, axis=1)
    return float(errors.mean() / d)


def fr(nmes, threshold: float = 0.10) -> float:
    """Failure rate: the fraction of images with NME strictly above threshold."""
    arr = np.asarray(list(nmes), dtype=float)
    if arr.size == 0:
        raise EmptyInput("empty NME list")
    return float(np.count_nonzero(arr > threshold) / arr.size)


def _exact_ced_area(arr: np.ndarray, threshold: float) -> float:
    """Integral over [0, threshold] of F(t) = fraction of entries <= t."""
    n = arr.size
    breaks = np.unique(arr[(arr > 0) & (arr <= threshold)])
    area = 0.0
    prev_t = 0.0
    frac = float(np.count_nonzero(arr <= 0.0)) / n
    for b in breaks:
        area += frac * (b - prev_t)
        prev_t = float(b)
        frac = float(np.count_nonzero(arr <= b)) / n
    area += frac * (threshold - prev_t)
    return area


def auc(nmes, threshold: float = 0.10, resolution: int = 1000) -> float:
    """Area under the cumulative error curve up to threshold, normalized by it.

    Exact (breakpoint-based) integration of the empirical step function;
    `resolution` only matters for the exported curve, never the area.
    """
    arr = np.asarray(list(nmes), dtype=float)
    if arr.size == 0:
        raise EmptyInput("empty NME list")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    return _exact_ced_area(arr, threshold) / threshold


def ced(nmes, threshold: float = 0.10, resolution: int = 1000) -> list[tuple[float, float]]:
    """Sampled cumulative curve as (t, fraction of images with NME <= t) points.

    A uniform grid of `resolution` points over [0, threshold] is merged with
    both sides of every jump of the empirical step function, so trapezoidal
    integration of the returned polyline reproduces the exact area.
    """
    arr = np.asarray(list(nmes), dtype=float)
    if arr.size == 0:
        raise EmptyInput("empty NME list")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    n = arr.size
    ts = list(np.linspace(0.0, threshold, resolution))
    jumps = np.unique(arr[(arr > 0) & (arr <= threshold)])
    points = []
    for t in ts:
        points.append((float(t), float(np.count_nonzero(arr <= t)) / n))
    for b in jumps:
        before = float(np.count_nonzero(arr < b)) / n
        at = float(np.count_nonzero(arr <= b)) / n
        points.append((float(b), before))
        points.append((float(b), at))
    points.sort()
    return points


def evaluate(
    preds: list[Annotation],
    gts: list[Annotation],
    norm: Normalizer,
    threshold: float = 0.10,
    resolution: int = 1000,
) -> MetricReport:
    """Full report over a list of images."""
    if len(preds) != len(gts):
        raise ShapeMismatch(f"image counts differ: {len(preds)} vs {len(gts)}")
    if not preds:
        raise EmptyInput("no images")
    nmes = [nme(p, g, norm) for p, g in zip(preds, gts)]
    return MetricReport(
        nme_per_image=nmes,
        mean_nme=float(np.mean(nmes)),
        fr=fr(nmes, threshold),
        auc=auc(nmes, threshold, resolution),
        ced=ced(nmes, threshold, resolution),
    )


def read_annotations(path) -> list[Annotation]:
    """Parse annotation JSON: {"points": [[x, y], ...]} or a list of such objects."""
    with open(path) as f:
        doc = json.load(f)
    if isinstance(doc, dict):
        doc = [doc]
    if not isinstance(doc, list):
        raise ValueError("annotation file must hold an object or a list of objects")
    out = []
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict) or "points" not in entry:
            raise ValueError(f"annotation {i} is missing the 'points' key")
        out.append(Annotation(np.array(entry["points"], dtype=float)))
    return out


def write_annotations(annotations: list[Annotation], path) -> None:
    doc = [{"points": a.points.tolist()} for a in annotations]
    with open(path, "w") as f:
        json.dump(doc if len(doc) != 1 else doc[0], f)
