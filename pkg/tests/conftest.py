"""Shared fixtures: repository paths and small prebuilt models."""

import pathlib

import numpy as np
import pytest

from advsde.models import LinearRegressionModel, LogisticModel, QuadraticModel
from advsde.numerics import RngStream

REPO_ROOT = pathlib.Path(__file__).resolve().parent.parent
CONFIG_DIR = REPO_ROOT / "configs"


@pytest.fixture(scope="session")
def config_dir() -> pathlib.Path:
    return CONFIG_DIR


@pytest.fixture()
def quad_model_2d() -> QuadraticModel:
    return QuadraticModel(np.diag([1.0, 2.0]))


@pytest.fixture()
def linreg_model() -> LinearRegressionModel:
    """Small fixed-design regression: 4 data dims, 2 parameters."""
    stream = RngStream(515, (0,))
    gen = stream.generator
    design = gen.standard_normal((4, 2))
    mean = gen.standard_normal(4)
    cov = np.diag([0.5, 0.8, 1.1, 0.4])
    return LinearRegressionModel(design, mean, cov)


@pytest.fixture()
def logistic_model() -> LogisticModel:
    return LogisticModel(
        mean0=np.array([-1.0, 0.2, 0.0]),
        mean1=np.array([1.0, -0.2, 0.3]),
        cov0=np.diag([0.8, 1.0, 0.6]),
        cov1=np.diag([1.1, 0.7, 0.9]),
        class_prob=0.5,
        bias=0.3,
    )
