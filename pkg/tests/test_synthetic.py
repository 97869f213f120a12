import numpy as np
import pytest

from starkit.errors import LandmarkOutOfBounds
from starkit.heatmap import Grid
from starkit.losses import L2, DetachRestriction, LossConfig, SmoothL1, ValueRestriction
from starkit.synthetic import (
    AdamOptimizer,
    ContourSpec,
    DatasetConfig,
    NoiseModel,
    OptimizerConfig,
    SgdOptimizer,
    anisotropy_experiment,
    generate_dataset,
    landmark_positions,
    mean_px_error,
    restriction_experiment,
    stability_experiment,
    train,
)

GRID = Grid(36, 36)
CONTOUR = ContourSpec(kind="ellipse", center=(17.5, 17.5), semi_axes=(7.0, 5.0), landmark_count=8)
ALT_FLAGS = (True, False) * 4


def small_noise(sigma_t=2.0, sigma_n=0.5):
    return NoiseModel(sigma_tangent=sigma_t, sigma_normal=sigma_n, ambiguous=ALT_FLAGS)


class TestContour:
    def test_ellipse_points_and_tangents(self):
        pts, tans = landmark_positions(CONTOUR)
        assert pts.shape == (8, 2)
        np.testing.assert_allclose(pts[0], [24.5, 17.5])  # t=0: (cx + a, cy)
        np.testing.assert_allclose(tans[0], [0.0, 1.0], atol=1e-12)  # vertical tangent
        np.testing.assert_allclose(np.linalg.norm(tans, axis=1), 1.0, atol=1e-12)

    def test_parabola_points_and_tangents(self):
        spec = ContourSpec(
            kind="parabola", center=(20.0, 12.0), curvature=0.1, half_width=8.0,
            landmark_count=5,
        )
        pts, tans = landmark_positions(spec)
        np.testing.assert_allclose(pts[0], [12.0, 12.0 + 0.1 * 64])
        np.testing.assert_allclose(pts[2], [20.0, 12.0])  # apex
        np.testing.assert_allclose(tans[2], [1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(tans, axis=1), 1.0, atol=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            ContourSpec(kind="ellipse", center=(0, 0), semi_axes=None)
        with pytest.raises(ValueError):
            ContourSpec(kind="circle", center=(0, 0))
        with pytest.raises(ValueError):
            NoiseModel(sigma_tangent=0.5, sigma_normal=2.0, ambiguous=(True,))


class TestGenerateDataset:
    def test_zero_noise_annotations_equal_truth(self):
        noise = NoiseModel(sigma_tangent=0.0, sigma_normal=0.0, ambiguous=ALT_FLAGS)
        ds = generate_dataset(CONTOUR, noise, 5, GRID, seed=3)
        for group in ds.samples:
            for s in group:
                np.testing.assert_array_equal(s.annotation, s.true_point)

    def test_deterministic(self):
        a = generate_dataset(CONTOUR, small_noise(), 10, GRID, seed=7)
        b = generate_dataset(CONTOUR, small_noise(), 10, GRID, seed=7)
        np.testing.assert_array_equal(a.features(), b.features())
        np.testing.assert_array_equal(a.annotations(), b.annotations())

    def test_seed_changes_data(self):
        a = generate_dataset(CONTOUR, small_noise(), 10, GRID, seed=7)
        b = generate_dataset(CONTOUR, small_noise(), 10, GRID, seed=8)
        assert not np.array_equal(a.annotations(), b.annotations())

    def test_noise_statistics(self):
        # tangential variance ~ sigma_t^2, normal ~ sigma_n^2 (15% relative)
        noise = NoiseModel(sigma_tangent=3.0, sigma_normal=0.5, ambiguous=(True,) * 8)
        big = ContourSpec(
            kind="ellipse", center=(31.5, 31.5), semi_axes=(10.0, 8.0), landmark_count=8
        )
        ds = generate_dataset(big, noise, 2000, Grid(64, 64), seed=11)
        for k, group in enumerate(ds.samples):
            tangent = group[0].tangent
            normal = np.array([-tangent[1], tangent[0]])
            devs = np.array([s.annotation - s.true_point for s in group])
            var_t = float(np.var(devs @ tangent))
            var_n = float(np.var(devs @ normal))
            assert abs(var_t - 9.0) / 9.0 < 0.15
            assert abs(var_n - 0.25) / 0.25 < 0.15

    def test_annotations_respect_margin(self):
        ds = generate_dataset(CONTOUR, small_noise(), 200, GRID, seed=5)
        anns = ds.annotations()
        assert anns.min() >= 0 and anns[:, 0].max() <= GRID.width - 1
        assert anns[:, 1].max() <= GRID.height - 1

    def test_margin_violation_raises(self):
        wide = ContourSpec(
            kind="ellipse", center=(17.5, 17.5), semi_axes=(16.0, 5.0), landmark_count=8
        )
        with pytest.raises(LandmarkOutOfBounds):
            generate_dataset(wide, small_noise(), 5, GRID, seed=0)

    def test_flag_count_checked(self):
        bad = NoiseModel(sigma_tangent=2.0, sigma_normal=0.5, ambiguous=(True, False))
        with pytest.raises(ValueError):
            generate_dataset(CONTOUR, bad, 5, GRID, seed=0)


class TestOptimizers:
    def test_adam_single_step_textbook(self):
        # quadratic objective f(p) = p^2/2 so grad = p; hand-computed update
        opt = OptimizerConfig(kind="adam", learning_rate=0.1, epochs=1, batch_size=1)
        stepper = AdamOptimizer(opt)
        p = np.array([2.0])
        g = p.copy()
        stepper.step([p], [g])
        m = 0.1 * 2.0  # (1-beta1) g
        v = 0.001 * 4.0  # (1-beta2) g^2
        m_hat = m / (1 - 0.9)
        v_hat = v / (1 - 0.999)
        expected = 2.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert p[0] == pytest.approx(expected, abs=1e-12)

    def test_adam_second_step_textbook(self):
        opt = OptimizerConfig(kind="adam", learning_rate=0.05, epochs=1, batch_size=1)
        stepper = AdamOptimizer(opt)
        p = np.array([1.0])
        hand_p = 1.0
        hand_m = hand_v = 0.0
        for t in (1, 2):
            g = hand_p
            stepper.step([p], [np.array([p[0]])])
            hand_m = 0.9 * hand_m + 0.1 * g
            hand_v = 0.999 * hand_v + 0.001 * g * g
            hand_p -= 0.05 * (hand_m / (1 - 0.9**t)) / (np.sqrt(hand_v / (1 - 0.999**t)) + 1e-8)
        assert p[0] == pytest.approx(hand_p, abs=1e-12)

    def test_sgd_step(self):
        stepper = SgdOptimizer(OptimizerConfig(kind="sgd", learning_rate=0.5))
        p = np.array([1.0, 2.0])
        stepper.step([p], [np.array([0.2, -0.4])])
        np.testing.assert_allclose(p, [0.9, 2.2])


class TestTrain:
    def test_lr_zero_keeps_parameters(self):
        ds = generate_dataset(CONTOUR, small_noise(), 8, GRID, seed=0)
        opt = OptimizerConfig(learning_rate=0.0, epochs=3, batch_size=16, seed=1)
        model, hist = train(ds, LossConfig(distance=SmoothL1()), opt)
        reference, _ = train(ds, LossConfig(distance=SmoothL1()), opt)
        np.testing.assert_array_equal(model.weights, reference.weights)
        assert np.ptp(hist.loss) == pytest.approx(0.0, abs=1e-12)
        assert np.ptp(hist.mean_lambda1) == pytest.approx(0.0, abs=1e-12)

    def test_deterministic_given_seed(self):
        ds = generate_dataset(CONTOUR, small_noise(), 16, GRID, seed=0)
        opt = OptimizerConfig(learning_rate=1e-2, epochs=4, batch_size=32, seed=5)
        cfg = LossConfig(distance=SmoothL1(), restriction=ValueRestriction())
        m1, h1 = train(ds, cfg, opt)
        m2, h2 = train(ds, cfg, opt)
        np.testing.assert_array_equal(m1.weights, m2.weights)
        np.testing.assert_array_equal(h1.loss, h2.loss)

    def test_zero_noise_convergence(self):
        # small grid, no noise: detach-mode training localizes well under 0.5 px
        grid = Grid(24, 24)
        contour = ContourSpec(
            kind="ellipse", center=(11.5, 11.5), semi_axes=(6.0, 4.5), landmark_count=8
        )
        noise = NoiseModel(sigma_tangent=0.0, sigma_normal=0.0, ambiguous=ALT_FLAGS)
        ds = generate_dataset(contour, noise, 40, grid, seed=2)
        opt = OptimizerConfig(learning_rate=1e-2, epochs=40, batch_size=64, seed=0)
        model, hist = train(ds, LossConfig(distance=L2(), restriction=DetachRestriction()), opt)
        assert np.all(np.isfinite(hist.loss))
        assert mean_px_error(model, ds) < 0.5

    def test_history_shapes(self):
        ds = generate_dataset(CONTOUR, small_noise(), 8, GRID, seed=0)
        opt = OptimizerConfig(learning_rate=1e-2, epochs=5, batch_size=16, seed=1)
        _, hist = train(ds, LossConfig(distance=SmoothL1()), opt)
        assert hist.loss.shape == (5,)
        assert hist.mean_lambda1.shape == (5,)
        assert hist.mean_lambda2.shape == (5,)


def tiny_dataset_cfg(n_train=24, n_test=12):
    return DatasetConfig(
        contour=CONTOUR, noise=small_noise(), grid=GRID, n_train=n_train, n_test=n_test,
        seed=0,
    )


def tiny_opt(epochs=6, seed=50):
    return OptimizerConfig(learning_rate=1e-2, epochs=epochs, batch_size=64, seed=seed)


class TestStability:
    def test_identical_seeds_zero_variance(self):
        rep, models = stability_experiment(
            tiny_dataset_cfg(), LossConfig(distance=SmoothL1()), tiny_opt(),
            n_models=3, objective="regression", seed_step=0,
        )
        np.testing.assert_array_equal(models[0].weights, models[1].weights)
        # identical models: variance is zero up to the roundoff of np.var itself
        assert np.abs(rep.var_tangential).max() < 1e-25
        assert np.abs(rep.var_normal).max() < 1e-25

    def test_variance_decomposition(self):
        rep, _ = stability_experiment(
            tiny_dataset_cfg(), LossConfig(distance=SmoothL1()), tiny_opt(),
            n_models=3, objective="regression",
        )
        np.testing.assert_allclose(
            rep.var_tangential + rep.var_normal, rep.var_total, atol=1e-10
        )

    def test_rejects_single_model(self):
        with pytest.raises(ValueError):
            stability_experiment(
                tiny_dataset_cfg(), LossConfig(distance=SmoothL1()), tiny_opt(), n_models=1
            )

    def test_threads_match_sequential(self):
        cfg = LossConfig(distance=SmoothL1(), restriction=ValueRestriction())
        seq, _ = stability_experiment(
            tiny_dataset_cfg(), cfg, tiny_opt(), n_models=3, threads=1
        )
        par, _ = stability_experiment(
            tiny_dataset_cfg(), cfg, tiny_opt(), n_models=3, threads=3
        )
        np.testing.assert_array_equal(seq.var_tangential, par.var_tangential)
        np.testing.assert_array_equal(seq.var_total, par.var_total)


class TestAnisotropy:
    def test_hand_built_anisotropic_gaussian(self):
        # a rendered diag(9, 1) Gaussian heatmap must report ratio ~9
        from starkit.heatmap import DiscreteHeatmap
        from starkit.moments import anisotropy_ratio, covariance_unbiased, eigen2x2
        from starkit.heatmap import soft_argmax

        grid = Grid(33, 33)
        dx = grid.x_coords() - 16.0
        dy = grid.y_coords() - 16.0
        mass = np.exp(-0.5 * (dx * dx / 9.0 + dy * dy / 1.0))
        h = DiscreteHeatmap(grid, mass / mass.sum())
        eig = eigen2x2(covariance_unbiased(h, soft_argmax(h)))
        ratio = anisotropy_ratio(eig)
        assert abs(ratio - 9.0) / 9.0 < 0.05

    def test_report_shapes_and_flags(self):
        ds = generate_dataset(CONTOUR, small_noise(), 6, GRID, seed=0)
        model, _ = train(ds, LossConfig(distance=SmoothL1()), tiny_opt(epochs=3),
                         objective="regression")
        rep = anisotropy_experiment(model, ds)
        assert rep.mean_ratio.shape == (8,)
        assert rep.excluded.sum() == 0
        np.testing.assert_array_equal(rep.ambiguous, np.array(ALT_FLAGS))


class TestRestriction:
    def test_paired_histories_align(self):
        rep = restriction_experiment(
            tiny_dataset_cfg(), LossConfig(distance=SmoothL1()), tiny_opt(epochs=4)
        )
        assert rep.history_none.loss.shape == rep.history_value.loss.shape
        assert rep.final_lambda1_none == rep.history_none.mean_lambda1[-1]
