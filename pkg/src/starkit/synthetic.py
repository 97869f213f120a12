"""Desk-scale simulator for annotation ambiguity and its training effects.

Landmarks sit on an analytic contour (ellipse or parabola). "Ambiguous"
landmarks get annotation noise stretched along the contour tangent, the way
human annotators disagree along an ill-defined boundary; the rest get small
isotropic noise. A linear map from a feature vector to heatmap logits stands
in for a real backbone: big enough to learn the task, small enough that the
full experiment suite runs in seconds on one core.

Experiments:
  * stability_experiment  - cross-model prediction variance (tangent/normal)
  * anisotropy_experiment - per-landmark eigenvalue ratio of the heatmaps
  * restriction_experiment - eigenvalue inflation with vs without the guard
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, replace

import numpy as np

from .errors import LandmarkOutOfBounds, NonFiniteLoss
from .gradients import eval_batch
from .heatmap import DiscreteHeatmap, Grid, softmax_normalize
from .losses import LossConfig, NoRestriction, ValueRestriction
from .moments import anisotropy_ratio, covariance_unbiased, eigen2x2
from .errors import DegenerateDistribution
from .heatmap import soft_argmax

NUISANCE_DIMS = 8
FEATURE_DIM = 2 + NUISANCE_DIMS
COORD_JITTER = 0.35  # px std of the jitter on the coordinate features
NOISE_CLIP_SIGMAS = 4.0  # annotation noise redrawn beyond this many sigmas


# ---------------------------------------------------------------------------
# dataset

@dataclass(frozen=True)
class ContourSpec:
    """Landmarks evenly spaced (in parameter t) along an analytic curve."""

    kind: str  # "ellipse" | "parabola"
    center: tuple[float, float]
    semi_axes: tuple[float, float] | None = None  # ellipse (a, b), px
    curvature: float | None = None  # parabola: y = cy + curvature (x-cx)^2
    half_width: float | None = None  # parabola: x spans cx +/- half_width
    landmark_count: int = 8

    def __post_init__(self):
        if self.landmark_count < 1:
            raise ValueError("landmark_count must be >= 1")
        if self.kind == "ellipse":
            if self.semi_axes is None or min(self.semi_axes) <= 0:
                raise ValueError("ellipse needs positive semi_axes")
        elif self.kind == "parabola":
            if self.curvature is None or self.half_width is None or self.half_width <= 0:
                raise ValueError("parabola needs curvature and positive half_width")
        else:
            raise ValueError(f"unknown contour kind {self.kind!r}")


def landmark_positions(spec: ContourSpec) -> tuple[np.ndarray, np.ndarray]:
    """(points, unit tangents), both (L, 2), from the analytic parameterization."""
    L = spec.landmark_count
    cx, cy = spec.center
    if spec.kind == "ellipse":
        t = np.arange(L) / L
        theta = 2.0 * np.pi * t
        a, b = spec.semi_axes
        pts = np.column_stack([cx + a * np.cos(theta), cy + b * np.sin(theta)])
        tans = np.column_stack([-a * np.sin(theta), b * np.cos(theta)])
    else:
        t = np.arange(L) / (L - 1) if L > 1 else np.array([0.5])
        x = cx + spec.half_width * (2.0 * t - 1.0)
        pts = np.column_stack([x, cy + spec.curvature * (x - cx) ** 2])
        tans = np.column_stack([np.ones(L), 2.0 * spec.curvature * (x - cx)])
    tans = tans / np.linalg.norm(tans, axis=1, keepdims=True)
    return pts, tans


@dataclass(frozen=True)
class NoiseModel:
    """Annotator noise: tangential for ambiguous landmarks, isotropic otherwise."""

    sigma_tangent: float
    sigma_normal: float
    ambiguous: tuple[bool, ...]

    def __post_init__(self):
        if self.sigma_normal < 0 or self.sigma_tangent < 0:
            raise ValueError("sigmas must be nonnegative")
        if any(self.ambiguous) and self.sigma_tangent < self.sigma_normal:
            raise ValueError("ambiguous landmarks need sigma_tangent >= sigma_normal")


@dataclass(frozen=True)
class SyntheticSample:
    """One annotated image of one landmark."""

    feature: np.ndarray  # (FEATURE_DIM,)
    true_point: np.ndarray  # (2,) noise-free landmark
    annotation: np.ndarray  # (2,) noisy target y_t
    tangent: np.ndarray  # (2,) unit contour tangent at the landmark


@dataclass(frozen=True)
class SyntheticDataset:
    grid: Grid
    contour: ContourSpec
    noise: NoiseModel
    samples: list  # samples[k] is the list for landmark k

    @property
    def landmark_count(self) -> int:
        return len(self.samples)

    @property
    def samples_per_landmark(self) -> int:
        return len(self.samples[0])

    def features(self) -> np.ndarray:
        """All features stacked to (L * n, FEATURE_DIM), landmark-major."""
        return np.array([s.feature for group in self.samples for s in group])

    def annotations(self) -> np.ndarray:
        return np.array([s.annotation for group in self.samples for s in group])

    def true_points(self) -> np.ndarray:
        return np.array([s.true_point for group in self.samples for s in group])


@dataclass(frozen=True)
class DatasetConfig:
    """Everything needed to generate matching train/test splits."""

    contour: ContourSpec
    noise: NoiseModel
    grid: Grid
    n_train: int  # samples per landmark
    n_test: int  # samples per landmark
    seed: int = 0


def _truncated_normal(rng: np.random.Generator, sigma: float) -> float:
    # redraw beyond NOISE_CLIP_SIGMAS so annotations stay inside the margin;
    # the variance distortion is < 0.1% at 4 sigma
    if sigma == 0:
        return 0.0
    while True:
        x = rng.normal(0.0, sigma)
        if abs(x) <= NOISE_CLIP_SIGMAS * sigma:
            return x


def generate_dataset(
    contour: ContourSpec,
    noise: NoiseModel,
    n_samples: int,
    grid: Grid,
    seed: int,
) -> SyntheticDataset:
    """n_samples annotated images per landmark, bit-reproducible from seed.

    Every landmark must keep a margin of 4*(sigma_tangent + sigma_normal)
    pixels to every border (and be strictly inside the grid), which together
    with the noise truncation guarantees annotations never leave the grid.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if len(noise.ambiguous) != contour.landmark_count:
        raise ValueError(
            f"noise has {len(noise.ambiguous)} ambiguity flags for "
            f"{contour.landmark_count} landmarks"
        )
    pts, tans = landmark_positions(contour)
    margin = NOISE_CLIP_SIGMAS * (noise.sigma_tangent + noise.sigma_normal)
    for k, (x, y) in enumerate(pts):
        if not (
            0 < x < grid.width - 1
            and 0 < y < grid.height - 1
            and margin <= x <= grid.width - 1 - margin
            and margin <= y <= grid.height - 1 - margin
        ):
            raise LandmarkOutOfBounds(
                f"landmark {k} at ({x:.2f}, {y:.2f}) violates the {margin:.2f} px margin"
            )

    rng = np.random.default_rng(seed)
    groups = []
    for k in range(contour.landmark_count):
        tangent = tans[k]
        normal = np.array([-tangent[1], tangent[0]])
        sigma_t = noise.sigma_tangent if noise.ambiguous[k] else noise.sigma_normal
        group = []
        for _ in range(n_samples):
            n_t = _truncated_normal(rng, sigma_t)
            n_n = _truncated_normal(rng, noise.sigma_normal)
            jitter = rng.normal(0.0, COORD_JITTER, size=2)
            nuisance = rng.standard_normal(NUISANCE_DIMS)
            feature = np.concatenate(
                [[pts[k, 0] + jitter[0], pts[k, 1] + jitter[1]], nuisance]
            )
            annotation = pts[k] + n_t * tangent + n_n * normal
            group.append(
                SyntheticSample(
                    feature=feature,
                    true_point=pts[k].copy(),
                    annotation=annotation,
                    tangent=tangent.copy(),
                )
            )
        groups.append(group)
    return SyntheticDataset(grid=grid, contour=contour, noise=noise, samples=groups)


# ---------------------------------------------------------------------------
# model and optimizers

@dataclass
class LinearPredictor:
    """feature -> logits, reshaped to the grid row-major."""

    weights: np.ndarray  # (H*W, FEATURE_DIM)
    bias: np.ndarray  # (H*W,)
    grid: Grid

    def logits(self, features: np.ndarray) -> np.ndarray:
        """(B, D) features -> (B, H*W) logits."""
        return features @ self.weights.T + self.bias

    def heatmap(self, feature: np.ndarray) -> DiscreteHeatmap:
        z = self.logits(np.asarray(feature, float).reshape(1, -1))[0]
        return softmax_normalize(z.reshape(self.grid.shape))

    def predict(self, features: np.ndarray) -> np.ndarray:
        """(B, D) features -> (B, 2) decoded points via soft-argmax."""
        z = self.logits(np.asarray(features, float))
        zz = z - z.max(axis=1, keepdims=True)
        e = np.exp(zz)
        h = e / e.sum(axis=1, keepdims=True)
        xs = self.grid.x_coords().ravel()
        ys = self.grid.y_coords().ravel()
        return np.column_stack([h @ xs, h @ ys])


@dataclass
class LandmarkEnsemble:
    """One LinearPredictor head per landmark.

    Landmarks are trained independently; a single map shared across all
    landmarks couples them through its weights and smears every heatmap
    along the contour (the feature manifold), drowning the per-landmark
    noise effects these experiments measure.
    """

    heads: list  # list[LinearPredictor], one per landmark

    @property
    def grid(self) -> Grid:
        return self.heads[0].grid

    def heatmap(self, landmark: int, feature: np.ndarray) -> DiscreteHeatmap:
        return self.heads[landmark].heatmap(feature)

    def predict_dataset(self, dataset: "SyntheticDataset") -> np.ndarray:
        """(L, n, 2) decoded points for every sample of every landmark."""
        out = []
        for k, group in enumerate(dataset.samples):
            feats = np.array([s.feature for s in group])
            out.append(self.heads[k].predict(feats))
        return np.stack(out)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # "sgd" | "adam"
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 48
    batch_size: int = 64
    seed: int = 0
    init_sigma: float = 2.5  # px width of the identity-renderer initialization

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.init_sigma > 0:
            raise ValueError("init_sigma must be positive")


class SgdOptimizer:
    def __init__(self, cfg: OptimizerConfig):
        self.lr = cfg.learning_rate

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class AdamOptimizer:
    """Textbook Adam with bias-corrected first/second moments."""

    def __init__(self, cfg: OptimizerConfig):
        self.lr = cfg.learning_rate
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _init_model(grid: Grid, feature_dim: int, init_sigma: float,
                rng: np.random.Generator) -> LinearPredictor:
    # Identity-renderer start: the coordinate columns and bias reproduce a
    # quadratic logit bowl, so softmax(logits(f)) is an isotropic Gaussian of
    # width init_sigma centered at the feature coordinates. Training then
    # reshapes/retargets it. (The leftover t^2 term of the expanded square is
    # constant per sample, which softmax ignores.) A feature-coordinate
    # initialization is required at this scale: starting from small random
    # weights, the coordinate-to-peak mapping needs weight magnitudes that
    # grow with grid size and sit far outside a short Adam run's reach.
    weights = 0.01 * rng.standard_normal((grid.num_cells, feature_dim))
    xs = grid.x_coords().ravel()
    ys = grid.y_coords().ravel()
    weights[:, 0] = xs / init_sigma**2
    weights[:, 1] = ys / init_sigma**2
    bias = -(xs**2 + ys**2) / (2.0 * init_sigma**2)
    return LinearPredictor(weights=weights, bias=bias, grid=grid)


@dataclass(frozen=True)
class TrainHistory:
    loss: np.ndarray  # (epochs,) mean loss over the epoch's samples
    mean_lambda1: np.ndarray  # (epochs,)
    mean_lambda2: np.ndarray  # (epochs,)


def train(
    dataset: SyntheticDataset,
    loss_cfg: LossConfig,
    opt: OptimizerConfig,
    objective: str = "star",
) -> tuple[LandmarkEnsemble, TrainHistory]:
    """Mini-batch gradient descent of the chosen objective family.

    Each landmark's head trains independently on its own samples; the
    history aggregates over all of them. Deterministic given opt.seed: one
    generator seeds every head's init and shuffles in a fixed landmark
    order, and batches reduce in a fixed order. Raises NonFiniteLoss with
    the offending epoch if the loss leaves the reals.
    """
    grid = dataset.grid
    rng = np.random.default_rng(opt.seed)
    heads = []
    loss_acc = np.zeros(opt.epochs)
    lam1_acc = np.zeros(opt.epochs)
    lam2_acc = np.zeros(opt.epochs)
    total = 0
    for group in dataset.samples:
        feats = np.array([s.feature for s in group])
        targets = np.array([s.annotation for s in group])
        n = feats.shape[0]
        total += n
        model = _init_model(grid, feats.shape[1], opt.init_sigma, rng)
        stepper = AdamOptimizer(opt) if opt.kind == "adam" else SgdOptimizer(opt)
        for epoch in range(opt.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, opt.batch_size):
                idx = perm[start : start + opt.batch_size]
                f = feats[idx]
                out = eval_batch(model.logits(f), targets[idx], loss_cfg, grid,
                                 objective=objective)
                if not np.all(np.isfinite(out.loss)):
                    raise NonFiniteLoss(epoch)
                loss_acc[epoch] += float(out.loss.sum())
                lam1_acc[epoch] += float(out.lambda1.sum())
                lam2_acc[epoch] += float(out.lambda2.sum())
                grad_w = out.grad.T @ f / len(idx)
                grad_b = out.grad.mean(axis=0)
                stepper.step([model.weights, model.bias], [grad_w, grad_b])
        heads.append(model)
    history = TrainHistory(
        loss=loss_acc / total, mean_lambda1=lam1_acc / total, mean_lambda2=lam2_acc / total
    )
    return LandmarkEnsemble(heads=heads), history


def mean_px_error(model: LandmarkEnsemble, dataset: SyntheticDataset) -> float:
    """Mean euclidean distance (px) between decoded points and true landmarks."""
    preds = model.predict_dataset(dataset)  # (L, n, 2)
    true = dataset.true_points().reshape(preds.shape)
    return float(np.linalg.norm(preds - true, axis=2).mean())


# ---------------------------------------------------------------------------
# experiments

@dataclass(frozen=True)
class StabilityReport:
    """Cross-model prediction variance on held-out samples.

    var_* are (L, n_test) arrays of sample variances (ddof=1) across models:
    the projection onto the landmark tangent, onto its normal, and the total
    2-D variance (their sum). `ambiguous` carries the per-landmark flags.
    """

    var_tangential: np.ndarray
    var_normal: np.ndarray
    var_total: np.ndarray
    ambiguous: np.ndarray

    def median_tangential(self, ambiguous_only: bool = False) -> float:
        sel = self.var_tangential[self.ambiguous] if ambiguous_only else self.var_tangential
        return float(np.median(sel))

    def per_landmark_summary(self) -> list[dict]:
        rows = []
        for k in range(self.var_tangential.shape[0]):
            rows.append(
                {
                    "landmark": k,
                    "ambiguous": bool(self.ambiguous[k]),
                    "mean_tangential": float(self.var_tangential[k].mean()),
                    "median_tangential": float(np.median(self.var_tangential[k])),
                    "mean_normal": float(self.var_normal[k].mean()),
                    "median_normal": float(np.median(self.var_normal[k])),
                    "mean_total": float(self.var_total[k].mean()),
                    "median_total": float(np.median(self.var_total[k])),
                }
            )
        return rows


def _train_models(
    dataset: SyntheticDataset,
    loss_cfg: LossConfig,
    opt_base: OptimizerConfig,
    n_models: int,
    objective: str,
    seed_step: int,
    threads: int,
) -> list[LandmarkEnsemble]:
    seeds = [opt_base.seed + m * seed_step for m in range(n_models)]

    def run(seed: int) -> LandmarkEnsemble:
        model, _ = train(dataset, loss_cfg, replace(opt_base, seed=seed), objective)
        return model

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, seeds))  # order-preserving
    return [run(s) for s in seeds]


def stability_experiment(
    dataset_cfg: DatasetConfig,
    loss_cfg: LossConfig,
    opt_base: OptimizerConfig,
    n_models: int = 5,
    objective: str = "star",
    seed_step: int = 1,
    threads: int = 1,
) -> tuple[StabilityReport, list[LandmarkEnsemble]]:
    """Train n_models runs differing only in seed; measure prediction scatter.

    The test split (dataset seed + 1) is shared by all models. For every
    held-out sample the across-model variance of the decoded point is
    decomposed along the landmark's tangent and normal directions.
    """
    if n_models < 2:
        raise ValueError("n_models must be >= 2")
    train_ds = generate_dataset(
        dataset_cfg.contour, dataset_cfg.noise, dataset_cfg.n_train, dataset_cfg.grid,
        dataset_cfg.seed,
    )
    test_ds = generate_dataset(
        dataset_cfg.contour, dataset_cfg.noise, dataset_cfg.n_test, dataset_cfg.grid,
        dataset_cfg.seed + 1,
    )
    models = _train_models(train_ds, loss_cfg, opt_base, n_models, objective, seed_step, threads)

    preds = np.stack([m.predict_dataset(test_ds) for m in models])  # (M, L, n, 2)
    L = test_ds.landmark_count
    n = test_ds.samples_per_landmark
    _, tans = landmark_positions(dataset_cfg.contour)

    var_t = np.zeros((L, n))
    var_n = np.zeros((L, n))
    var_tot = np.zeros((L, n))
    for k in range(L):
        tangent = tans[k]
        normal = np.array([-tangent[1], tangent[0]])
        p = preds[:, k, :, :]  # (M, n, 2)
        proj_t = p @ tangent
        proj_n = p @ normal
        var_t[k] = proj_t.var(axis=0, ddof=1)
        var_n[k] = proj_n.var(axis=0, ddof=1)
        var_tot[k] = p[..., 0].var(axis=0, ddof=1) + p[..., 1].var(axis=0, ddof=1)
    report = StabilityReport(
        var_tangential=var_t,
        var_normal=var_n,
        var_total=var_tot,
        ambiguous=np.array(dataset_cfg.noise.ambiguous, dtype=bool),
    )
    return report, models


@dataclass(frozen=True)
class AnisotropyReport:
    """Mean eigenvalue ratio of the predicted heatmaps, per landmark."""

    mean_ratio: np.ndarray  # (L,)
    excluded: np.ndarray  # (L,) samples skipped as degenerate
    ambiguous: np.ndarray  # (L,) flags

    def group_means(self) -> tuple[float, float]:
        """(mean ratio over ambiguous landmarks, over isotropic landmarks)."""
        return (
            float(self.mean_ratio[self.ambiguous].mean()),
            float(self.mean_ratio[~self.ambiguous].mean()),
        )


def anisotropy_experiment(
    model: LandmarkEnsemble, dataset: SyntheticDataset, floor: float = 1e-5
) -> AnisotropyReport:
    """Evaluate lambda1/lambda2 of the model's heatmaps on every sample."""
    L = dataset.landmark_count
    mean_ratio = np.zeros(L)
    excluded = np.zeros(L, dtype=int)
    for k, group in enumerate(dataset.samples):
        ratios = []
        for sample in group:
            h = model.heatmap(k, sample.feature)
            try:
                eig = eigen2x2(covariance_unbiased(h, soft_argmax(h)))
            except DegenerateDistribution:
                excluded[k] += 1
                continue
            ratios.append(anisotropy_ratio(eig, floor))
        mean_ratio[k] = float(np.mean(ratios)) if ratios else float("nan")
    return AnisotropyReport(
        mean_ratio=mean_ratio,
        excluded=excluded,
        ambiguous=np.array(dataset.noise.ambiguous, dtype=bool),
    )


@dataclass(frozen=True)
class RestrictionReport:
    """Paired run exposing eigenvalue inflation without the value guard."""

    history_none: TrainHistory
    history_value: TrainHistory
    final_lambda1_none: float
    final_lambda1_value: float

    @property
    def inflation_confirmed(self) -> bool:
        return self.final_lambda1_none > self.final_lambda1_value


def restriction_experiment(
    dataset_cfg: DatasetConfig,
    loss_cfg: LossConfig,
    opt: OptimizerConfig,
    w: float = 1.0,
) -> RestrictionReport:
    """Same data, same seed: train with NoRestriction vs ValueRestriction(w)."""
    train_ds = generate_dataset(
        dataset_cfg.contour, dataset_cfg.noise, dataset_cfg.n_train, dataset_cfg.grid,
        dataset_cfg.seed,
    )
    _, hist_none = train(train_ds, replace(loss_cfg, restriction=NoRestriction()), opt)
    _, hist_value = train(train_ds, replace(loss_cfg, restriction=ValueRestriction(w=w)), opt)
    return RestrictionReport(
        history_none=hist_none,
        history_value=hist_value,
        final_lambda1_none=float(hist_none.mean_lambda1[-1]),
        final_lambda1_value=float(hist_value.mean_lambda1[-1]),
    )
