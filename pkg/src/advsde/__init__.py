"""Adversarial training dynamics: discrete loops, diffusion limits, and a
loss-feedback learning-rate controller, with a reproducible experiment lab."""

from .config import (
    EXPERIMENT_NAMES,
    ConfigError,
    ExperimentConfig,
    build_model,
    build_theta0,
    normalize_experiment_name,
    parse_config,
)
from .control import (
    ConstantPolicy,
    FeedbackPolicy,
    LossEstimate,
    controlled_train,
    estimate_s,
    grid_oracle_u,
    optimal_u,
)
from .experiments import RUNNERS, ExperimentReport, run_experiment
from .models import (
    Batch,
    LinearRegressionModel,
    LogisticModel,
    LossModel,
    ModelStatistics,
    QuadraticModel,
    Regularizer,
)
from .numerics import (
    LogLogFit,
    RngStream,
    assert_spd,
    gaussian_sample,
    loglog_fit,
    matrix_sqrt_spd,
    spd_random,
)
from .sde import (
    LossOdeParams,
    OuSolution,
    SdeCoefficients,
    coefficients_adversarial,
    coefficients_controlled,
    coefficients_sgd,
    default_dt,
    euler_maruyama,
    loss_ode_integrate,
    loss_ode_rhs,
    path_to_csv,
    quad_expected_loss,
    quad_expected_loss_sgd,
    quad_stationary_loss,
    sde_one_step_moments,
)
from .training import (
    MomentPair,
    ProjectionSet,
    TrainConfig,
    TrajectoryRecord,
    adversarial_step,
    delta_first_order,
    inner_ascent,
    one_step_moments_analytic,
    one_step_moments_discrete,
    one_step_moments_exact,
    project,
    robustness_ensemble,
    sgd_step,
    train,
    trajectory_to_csv,
)

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ConfigError",
    "ConstantPolicy",
    "EXPERIMENT_NAMES",
    "ExperimentConfig",
    "ExperimentReport",
    "FeedbackPolicy",
    "LinearRegressionModel",
    "LogLogFit",
    "LogisticModel",
    "LossEstimate",
    "LossModel",
    "LossOdeParams",
    "ModelStatistics",
    "MomentPair",
    "OuSolution",
    "ProjectionSet",
    "QuadraticModel",
    "Regularizer",
    "RngStream",
    "RUNNERS",
    "SdeCoefficients",
    "TrainConfig",
    "TrajectoryRecord",
    "adversarial_step",
    "assert_spd",
    "build_model",
    "build_theta0",
    "coefficients_adversarial",
    "coefficients_controlled",
    "coefficients_sgd",
    "controlled_train",
    "default_dt",
    "delta_first_order",
    "estimate_s",
    "euler_maruyama",
    "gaussian_sample",
    "grid_oracle_u",
    "inner_ascent",
    "loglog_fit",
    "loss_ode_integrate",
    "loss_ode_rhs",
    "matrix_sqrt_spd",
    "normalize_experiment_name",
    "one_step_moments_analytic",
    "one_step_moments_discrete",
    "one_step_moments_exact",
    "optimal_u",
    "parse_config",
    "path_to_csv",
    "project",
    "quad_expected_loss",
    "quad_expected_loss_sgd",
    "quad_stationary_loss",
    "robustness_ensemble",
    "run_experiment",
    "sde_one_step_moments",
    "sgd_step",
    "spd_random",
    "train",
    "trajectory_to_csv",
    "__version__",
]
