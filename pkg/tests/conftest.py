import numpy as np
import pytest

from starkit.heatmap import DiscreteHeatmap, Grid, softmax_normalize


def random_heatmap(rng: np.random.Generator, height=8, width=8, scale=2.0) -> DiscreteHeatmap:
    """Generic positive heatmap: softmax of scaled normal logits."""
    return softmax_normalize(scale * rng.standard_normal((height, width)))


def delta_heatmap(grid: Grid, row: int, col: int) -> DiscreteHeatmap:
    probs = np.zeros(grid.shape)
    probs[row, col] = 1.0
    return DiscreteHeatmap(grid, probs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
