"""Heatmap-based landmark regression toolkit.

Core pieces: discrete heatmaps and their weighted PCA (mean, Bessel-corrected
covariance, closed-form 2x2 eigenpairs), an anisotropy-scaled adaptive
regression loss with eigenvalue restrictions, exact analytic gradients with a
finite-difference verification harness, standard landmark metrics
(NME/FR/AUC/CED), and a desk-scale synthetic suite reproducing the
ambiguity phenomena that motivate the loss.
"""

from .errors import (
    CenterOutOfBounds,
    ConfigError,
    DegenerateDistribution,
    EmptyInput,
    GridMismatch,
    LandmarkOutOfBounds,
    NonFiniteInput,
    NonFiniteLoss,
    ShapeMismatch,
    StarkitError,
    ZeroNormalizer,
)
from .gradients import GradReport, finite_diff_grad, grad_check, grad_total
from .heatmap import (
    DiscreteHeatmap,
    Grid,
    read_heatmap_csv,
    render_gaussian,
    soft_argmax,
    softmax_normalize,
    write_heatmap_csv,
)
from .losses import (
    L1,
    L2,
    DetachRestriction,
    LossConfig,
    NoRestriction,
    SmoothL1,
    ValueRestriction,
    Wing,
    js_regularizer,
    mahalanobis_loss,
    regression_loss,
    scalar_distance,
    scalar_distance_deriv,
    star_core,
    total_objective,
    value_restriction,
)
from .metrics import Annotation, MetricReport, Normalizer, auc, ced, evaluate, fr, nme
from .moments import (
    Covariance2,
    EigenPair2,
    WeightSums,
    anisotropy_ratio,
    covariance_biased,
    covariance_unbiased,
    eigen2x2,
    weight_sums,
)
from .synthetic import (
    ContourSpec,
    DatasetConfig,
    LinearPredictor,
    NoiseModel,
    OptimizerConfig,
    SyntheticSample,
    anisotropy_experiment,
    generate_dataset,
    restriction_experiment,
    stability_experiment,
    train,
)

__version__ = "0.1.0"
