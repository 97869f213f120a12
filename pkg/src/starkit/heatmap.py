"""Discrete 2-D probability distributions on a pixel grid.

A heatmap is a nonnegative H x W array summing to 1 and is interpreted as
the distribution of a predicted landmark over grid cells. Cell (row r,
col c) sits at coordinate (x=c, y=r), zero-based, in pixel units; arrays
are row-major throughout.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import CenterOutOfBounds, NonFiniteInput

SUM_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """Pixel lattice of at least 2x2 cells."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def num_cells(self) -> int:
        return self.width * self.height

    def x_coords(self) -> np.ndarray:
        """Column index of every cell, as an (H, W) float array."""
        return _coord_arrays(self.width, self.height)[0]

    def y_coords(self) -> np.ndarray:
        """Row index of every cell, as an (H, W) float array."""
        return _coord_arrays(self.width, self.height)[1]

    def contains(self, point) -> bool:
        x, y = float(point[0]), float(point[1])
        return 0.0 <= x <= self.width - 1 and 0.0 <= y <= self.height - 1


@functools.lru_cache(maxsize=32)
def _coord_arrays(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    xs.flags.writeable = False
    ys.flags.writeable = False
    return xs, ys


@dataclass(frozen=True)
class DiscreteHeatmap:
    """A probability distribution over the cells of a grid.

    Invariants checked at construction: entries are finite and >= 0, and
    the total mass is 1 within SUM_TOL. The stored array is read-only.
    """

    grid: Grid
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.shape != self.grid.shape:
            raise ValueError(f"probs shape {probs.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(probs)):
            raise NonFiniteInput("heatmap contains NaN/Inf")
        if np.any(probs < 0):
            raise ValueError("heatmap contains negative mass")
        total = float(probs.sum())
        if abs(total - 1.0) > SUM_TOL:
            raise ValueError(f"heatmap mass {total!r} is not 1 within {SUM_TOL}")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)


def softmax_normalize(logits: np.ndarray, temperature: float = 1.0) -> DiscreteHeatmap:
    """Normalize raw scores into a heatmap via a max-shifted softmax.

    probs[i] = exp(logits[i]/T) / sum_j exp(logits[j]/T). The maximum is
    subtracted before exponentiation so arbitrarily large scores cannot
    overflow.
    """
    z = np.asarray(logits, dtype=float)
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[1] < 2:
        raise ValueError(f"logits must be an HxW matrix with H,W >= 2, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("logits contain NaN/Inf")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scaled = z / temperature
    e = np.exp(scaled - scaled.max())
    probs = e / e.sum()
    return DiscreteHeatmap(Grid(width=z.shape[1], height=z.shape[0]), probs)


def soft_argmax(h: DiscreteHeatmap) -> np.ndarray:
    """Expected coordinate under the heatmap: mu = sum_i h_i * y_i.

    Returns a length-2 array (x, y) in pixels; always inside the grid.
    """
    xs = h.grid.x_coords()
    ys = h.grid.y_coords()
    return np.array([float(np.sum(h.probs * xs)), float(np.sum(h.probs * ys))])


def render_gaussian(grid: Grid, center, sigma: float) -> DiscreteHeatmap:
    """Isotropic Gaussian mass exp(-|y_i - center|^2 / (2 sigma^2)), renormalized.

    The full grid is evaluated (no truncation window); grids here are small
    enough that exactness is cheaper than a tolerance knob.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cx, cy = float(center[0]), float(center[1])
    if not grid.contains((cx, cy)):
        raise CenterOutOfBounds(
            f"center ({cx}, {cy}) outside [0, {grid.width - 1}] x [0, {grid.height - 1}]"
        )
    dx = grid.x_coords() - cx
    dy = grid.y_coords() - cy
    mass = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    return DiscreteHeatmap(grid, mass / mass.sum())


def write_heatmap_csv(h: DiscreteHeatmap, path) -> None:
    """Write the CSV interchange form: a 'H,W' header, then H rows of W floats."""
    with open(path, "w") as f:
        f.write(f"{h.grid.height},{h.grid.width}\n")
        for row in h.probs:
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_heatmap_csv(path) -> DiscreteHeatmap:
    """Parse the CSV interchange form back into a heatmap.

    Raises ValueError on any malformed content (bad header, ragged rows,
    non-numeric cells) and propagates invariant violations.
    """
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines:
        raise ValueError("empty heatmap file")
    header = lines[0].split(",")
    if len(header) != 2:
        raise ValueError(f"header must be 'H,W', got {lines[0]!r}")
    try:
        height, width = int(header[0]), int(header[1])
    except ValueError as exc:
        raise ValueError(f"non-integer header {lines[0]!r}") from exc
    if len(lines) - 1 != height:
        raise ValueError(f"expected {height} data rows, found {len(lines) - 1}")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != width:
            raise ValueError(f"expected {width} columns, found {len(cells)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise ValueError(f"non-numeric cell in row {ln!r}") from exc
    return DiscreteHeatmap(Grid(width=width, height=height), np.array(rows))
