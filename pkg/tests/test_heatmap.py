import math

import numpy as np
import pytest

from starkit.errors import CenterOutOfBounds, NonFiniteInput
from starkit.heatmap import (
    DiscreteHeatmap,
    Grid,
    read_heatmap_csv,
    render_gaussian,
    soft_argmax,
    softmax_normalize,
    write_heatmap_csv,
)

from conftest import delta_heatmap, random_heatmap


def brute_force_softmax(logits, temperature):
    """Independent elementwise exp/sum evaluation (no max shift)."""
    h, w = logits.shape
    out = np.zeros((h, w))
    total = 0.0
    for r in range(h):
        for c in range(w):
            out[r, c] = math.exp(logits[r, c] / temperature)
            total += out[r, c]
    return out / total


def brute_force_gaussian(grid, center, sigma):
    out = np.zeros(grid.shape)
    for r in range(grid.height):
        for c in range(grid.width):
            d2 = (c - center[0]) ** 2 + (r - center[1]) ** 2
            out[r, c] = math.exp(-d2 / (2 * sigma**2))
    return out / out.sum()


class TestGrid:
    def test_rejects_tiny_grids(self):
        with pytest.raises(ValueError):
            Grid(width=1, height=8)
        with pytest.raises(ValueError):
            Grid(width=8, height=1)

    def test_coordinate_convention(self):
        g = Grid(width=3, height=2)
        # cell (row r, col c) has x = c, y = r
        assert g.x_coords()[1, 2] == 2.0
        assert g.y_coords()[1, 2] == 1.0
        assert g.shape == (2, 3)


class TestHeatmapInvariants:
    def test_rejects_negative_mass(self):
        probs = np.full((2, 2), 0.5)
        probs[0, 0] = -0.5
        with pytest.raises(ValueError):
            DiscreteHeatmap(Grid(2, 2), probs)

    def test_rejects_bad_total(self):
        with pytest.raises(ValueError):
            DiscreteHeatmap(Grid(2, 2), np.full((2, 2), 0.3))

    def test_probs_are_immutable(self):
        h = delta_heatmap(Grid(2, 2), 0, 0)
        with pytest.raises(ValueError):
            h.probs[0, 0] = 0.5


class TestSoftmaxNormalize:
    def test_uniform_from_zero_logits(self):
        h = softmax_normalize(np.zeros((2, 2)))
        np.testing.assert_allclose(h.probs, 0.25)

    def test_saturation(self):
        logits = np.zeros((4, 4))
        logits[0, 0] = 1000.0
        h = softmax_normalize(logits)
        assert h.probs[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert np.all(h.probs.ravel()[1:] <= 1e-12)

    def test_matches_brute_force(self, rng):
        logits = rng.standard_normal((8, 8))
        h = softmax_normalize(logits)
        np.testing.assert_allclose(h.probs, brute_force_softmax(logits, 1.0), atol=1e-12)

    def test_temperature(self, rng):
        logits = rng.standard_normal((5, 5))
        h = softmax_normalize(logits, temperature=2.5)
        np.testing.assert_allclose(h.probs, brute_force_softmax(logits, 2.5), atol=1e-12)

    def test_shift_invariance(self, rng):
        logits = rng.standard_normal((6, 6))
        a = softmax_normalize(logits)
        b = softmax_normalize(logits + 17.3)
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)

    def test_rejects_nonfinite(self):
        logits = np.zeros((3, 3))
        logits[1, 1] = np.nan
        with pytest.raises(NonFiniteInput):
            softmax_normalize(logits)
        logits[1, 1] = np.inf
        with pytest.raises(NonFiniteInput):
            softmax_normalize(logits)

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            softmax_normalize(np.zeros((3, 3)), temperature=0.0)

    def test_output_normalized(self, rng):
        for _ in range(20):
            h = random_heatmap(rng)
            assert abs(h.probs.sum() - 1.0) <= 1e-9


class TestSoftArgmax:
    def test_delta(self):
        h = delta_heatmap(Grid(8, 8), row=2, col=3)
        np.testing.assert_allclose(soft_argmax(h), [3.0, 2.0])

    def test_uniform_2x2(self):
        h = softmax_normalize(np.zeros((2, 2)))
        np.testing.assert_allclose(soft_argmax(h), [0.5, 0.5])

    def test_two_point_average(self):
        probs = np.zeros((4, 4))
        probs[0, 0] = 0.5
        probs[0, 3] = 0.5
        h = DiscreteHeatmap(Grid(4, 4), probs)
        np.testing.assert_allclose(soft_argmax(h), [1.5, 0.0])

    def test_linearity_of_convex_mixtures(self, rng):
        g = Grid(8, 8)
        for _ in range(10):
            h1 = random_heatmap(rng)
            h2 = random_heatmap(rng)
            alpha = rng.uniform()
            mix = DiscreteHeatmap(g, alpha * h1.probs + (1 - alpha) * h2.probs)
            expected = alpha * soft_argmax(h1) + (1 - alpha) * soft_argmax(h2)
            np.testing.assert_allclose(soft_argmax(mix), expected, atol=1e-12)

    def test_stays_inside_grid(self, rng):
        for _ in range(50):
            h = random_heatmap(rng, 5, 9)
            x, y = soft_argmax(h)
            assert 0 <= x <= 8 and 0 <= y <= 4


class TestRenderGaussian:
    def test_symmetric_about_center(self):
        g = Grid(9, 9)
        h = render_gaussian(g, (4.0, 4.0), sigma=1.7)
        np.testing.assert_allclose(h.probs, np.rot90(h.probs, 2), atol=1e-15)
        assert np.unravel_index(np.argmax(h.probs), g.shape) == (4, 4)

    def test_concentration_limit(self):
        h = render_gaussian(Grid(8, 8), (4.0, 4.0), sigma=0.1)
        assert h.probs[4, 4] > 0.999

    def test_matches_brute_force(self):
        g = Grid(8, 8)
        h = render_gaussian(g, (3.5, 2.0), sigma=1.0)
        np.testing.assert_allclose(h.probs, brute_force_gaussian(g, (3.5, 2.0), 1.0), atol=1e-12)

    def test_decode_recovers_lattice_center(self):
        # sigma=1 with >= 6 sigma of margin on every side
        g = Grid(15, 15)
        h = render_gaussian(g, (7.0, 7.0), sigma=1.0)
        np.testing.assert_allclose(soft_argmax(h), [7.0, 7.0], atol=1e-6)

    def test_center_out_of_bounds(self):
        g = Grid(8, 8)
        with pytest.raises(CenterOutOfBounds):
            render_gaussian(g, (8.0, 4.0), sigma=1.0)
        with pytest.raises(CenterOutOfBounds):
            render_gaussian(g, (4.0, -0.1), sigma=1.0)

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError):
            render_gaussian(Grid(8, 8), (4.0, 4.0), sigma=0.0)


class TestCsvRoundTrip:
    def test_round_trip_is_exact(self, rng, tmp_path):
        h = random_heatmap(rng, 5, 7)
        path = tmp_path / "h.csv"
        write_heatmap_csv(h, path)
        back = read_heatmap_csv(path)
        assert back.grid == h.grid
        np.testing.assert_array_equal(back.probs, h.probs)

    def test_header_format(self, rng, tmp_path):
        h = random_heatmap(rng, 3, 4)
        path = tmp_path / "h.csv"
        write_heatmap_csv(h, path)
        assert path.read_text().splitlines()[0] == "3,4"

    @pytest.mark.parametrize(
        "content",
        [
            "",
            "3\n",
            "2,2\n0.5,0.5\n",  # missing row
            "2,2\n0.5,0.5\n0.0,0.0,0.0\n",  # ragged row
            "2,2\n0.5,x\n0.25,0.25\n",  # non-numeric
        ],
    )
    def test_rejects_malformed(self, tmp_path, content):
        path = tmp_path / "bad.csv"
        path.write_text(content)
        with pytest.raises(ValueError):
            read_heatmap_csv(path)
