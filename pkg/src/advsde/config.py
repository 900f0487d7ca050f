"""TOML experiment configs: parsing, validation, and seeded model building.

A config file has four tables.  ``[experiment]`` names the experiment and
carries the master seed, output directory, and runtime profile.  ``[model]``
describes the loss model, either with explicit arrays or with a seeded
generation recipe.  ``[train]`` holds the shared discrete-training
hyperparameters.  ``[run]`` holds experiment-specific knobs; every experiment
has its own registry of allowed keys with defaults, and unknown keys are
rejected so typos fail loudly instead of silently running defaults.
"""

from __future__ import annotations

import dataclasses
import math
import pathlib
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .models import LinearRegressionModel, LogisticModel, LossModel, QuadraticModel
from .numerics import RngStream, rng_substream, spd_random
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "EXPERIMENT_NAMES",
    "normalize_experiment_name",
    "parse_config",
    "build_model",
    "build_theta0",
]

PROFILES = ("fast", "paper")

EXPERIMENT_NAMES = (
    "order_check",
    "moment_check",
    "quad_decay",
    "stationary_check",
    "policy_check",
    "linreg_control",
    "logistic_robustness",
)


class ConfigError(ValueError):
    """Raised for malformed, incomplete, or out-of-range configuration."""


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Fully validated configuration for one experiment run."""

    experiment: str
    seed: int
    out_dir: pathlib.Path
    profile: str
    model_spec: dict[str, Any]
    train: TrainConfig
    run: dict[str, Any]
    source_path: pathlib.Path | None = None

    def stream(self, *path: int) -> RngStream:
        """Return the named RNG substream under this config's master seed."""
        return RngStream(master_seed=self.seed, path=tuple(path))


# ---------------------------------------------------------------------------
# Key registries.  A value of REQUIRED means the key must be present; any
# other value is the default.  Tuples of types list what the key accepts.
# ---------------------------------------------------------------------------

def normalize_experiment_name(name: str) -> str:
    """Map an experiment name (hyphen or underscore spelling) to its
    canonical internal form, rejecting unknown names."""
    canonical = str(name).replace("-", "_")
    if canonical not in EXPERIMENT_NAMES:
        raise ConfigError(
            f"unknown experiment {name!r}; expected one of "
            f"{', '.join(n.replace('_', '-') for n in EXPERIMENT_NAMES)}"
        )
    return canonical


_REQUIRED = object()

_EXPERIMENT_KEYS: dict[str, tuple[Any, tuple[type, ...]]] = {
    "name": (_REQUIRED, (str,)),
    "seed": (_REQUIRED, (int,)),
    "out_dir": ("results", (str,)),
    "profile": ("paper", (str,)),
}

_TRAIN_KEYS: dict[str, tuple[Any, tuple[type, ...]]] = {
    "eta": (_REQUIRED, (int, float)),
    "batch_size": (_REQUIRED, (int,)),
    "inner_steps": (_REQUIRED, (int,)),
    "horizon": (_REQUIRED, (int, float)),
    "penalty": (0.0, (int, float)),
    "inner_eta": (None, (int, float)),
}

_MODEL_KEYS: dict[str, dict[str, tuple[Any, tuple[type, ...]]]] = {
    "quadratic": {
        "dim": (None, (int,)),
        "eig_low": (None, (int, float)),
        "eig_high": (None, (int, float)),
        "curvature": (None, (list,)),
    },
    "linear_regression": {
        "design": (None, (list,)),
        "mean": (None, (list,)),
        "cov": (None, (list,)),
        "n_features": (None, (int,)),
        "n_params": (None, (int,)),
        "alpha": (None, (int, float)),
        "isotropic_design": (False, (bool,)),
        "cov_eig_low": (0.5, (int, float)),
        "cov_eig_high": (1.5, (int, float)),
        "cov_scale": (1.0, (int, float)),
        "target_mode": ("in_range", (str,)),
        "target_scale": (1.0, (int, float)),
    },
    "logistic": {
        "dim": (_REQUIRED, (int,)),
        "class_prob": (0.5, (int, float)),
        "separation": (_REQUIRED, (int, float)),
        "offset_scale": (0.0, (int, float)),
        "cov_eig_low": (0.5, (int, float)),
        "cov_eig_high": (1.5, (int, float)),
        "cov_scale": (1.0, (int, float)),
        "bias": (0.0, (int, float)),
    },
}

_THETA0_KEYS: dict[str, tuple[Any, tuple[type, ...]]] = {
    "theta0": ("zeros", (str, list)),
    "theta0_scale": (1.0, (int, float)),
}

_RUN_KEYS: dict[str, dict[str, tuple[Any, tuple[type, ...]]]] = {
    "order_check": {
        "eta_grid": (_REQUIRED, (list,)),
        "mc_runs": (100_000, (int,)),
        "fast_mc_runs": (10_000, (int,)),
        "mc_chunk": (25_000, (int,)),
        "slope_band": ([1.7, 2.4], (list,)),
        "fast_slope_band": ([1.5, 2.6], (list,)),
        "synthetic_selftest": (False, (bool,)),
        "synthetic_coefficient": (0.37, (int, float)),
    },
    "moment_check": {
        "eta_grid": ([0.1, 0.05, 0.025, 0.0125], (list,)),
        "mc_samples": (200_000, (int,)),
        "fast_mc_samples": (50_000, (int,)),
        "residual_slope_min": (2.7, (int, float)),
    },
    "quad_decay": {
        "em_paths": (10_000, (int,)),
        "fast_em_paths": (2_000, (int,)),
        "dt_divisor": (50, (int,)),
        "curve_points": (200, (int,)),
        "loss_fixture": (None, (int, float)),
        "sgd_loss_fixture": (None, (int, float)),
        "fixture_tolerance": (1e-6, (int, float)),
    },
    "stationary_check": {
        "times": (_REQUIRED, (list,)),
        "n_samples": (400_000, (int,)),
        "fast_n_samples": (100_000, (int,)),
        "far_init": (10.0, (int, float)),
        "stationary_fixture": (None, (int, float)),
        "fixture_tolerance": (1e-9, (int, float)),
        "rate_target": (None, (int, float)),
        "rate_rel_tolerance": (0.15, (int, float)),
        "rate_fit_max_time": (1.6, (int, float)),
    },
    "policy_check": {
        "n_tuples": (100, (int,)),
        "grid_step": (1e-3, (int, float)),
        "agreement_tolerance": (1e-3, (int, float)),
        "sweep_points": (121, (int,)),
        "ode_alpha": (1.0, (int, float)),
        "ode_noise_trace": (1.0, (int, float)),
        "ode_batch_size": (10, (int,)),
        "ode_inner_steps": (5, (int,)),
        "ode_eta": (0.05, (int, float)),
        "ode_s0": (1.0, (int, float)),
        "ode_horizon": (10.0, (int, float)),
        "ode_dt": (1e-3, (int, float)),
        "constant_grid": ([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0], (list,)),
    },
    "linreg_control": {
        "n_seeds": (20, (int,)),
        "fast_n_seeds": (8, (int,)),
        "theta0_offset_scale": (1.0, (int, float)),
        "window_fraction": (0.25, (int, float)),
        "var_fraction_required": (0.8, (int, float)),
    },
    "logistic_robustness": {
        "n_seeds": (50, (int,)),
        "fast_n_seeds": (12, (int,)),
        "test_points": (10_000, (int,)),
        "acc_center_sgd": (0.84, (int, float)),
        "acc_center_adv": (0.78, (int, float)),
        "acc_halfwidth": (0.08, (int, float)),
    },
}


def _check_table(
    table: Mapping[str, Any],
    registry: Mapping[str, tuple[Any, tuple[type, ...]]],
    section: str,
) -> dict[str, Any]:
    """Validate one TOML table against a key registry and fill defaults."""
    unknown = sorted(set(table) - set(registry))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    out: dict[str, Any] = {}
    for key, (default, types) in registry.items():
        if key in table:
            value = table[key]
            if isinstance(value, bool) and bool not in types:
                raise ConfigError(f"[{section}].{key} must not be a boolean")
            if not isinstance(value, types):
                names = "/".join(t.__name__ for t in types)
                raise ConfigError(f"[{section}].{key} must be {names}")
            out[key] = value
        elif default is _REQUIRED:
            raise ConfigError(f"[{section}] is missing required key {key!r}")
        else:
            out[key] = default
    return out


def _check_eta(eta: float, horizon: float, label: str) -> None:
    limit = min(1.0, float(horizon))
    if not 0.0 < eta < limit:
        raise ConfigError(
            f"{label} must lie in (0, {limit}) for horizon {horizon}, got {eta}"
        )


def parse_config(
    path: str | pathlib.Path,
    *,
    seed: int | None = None,
    out_dir: str | pathlib.Path | None = None,
    profile: str | None = None,
) -> ExperimentConfig:
    """Load, validate, and return an experiment configuration.

    ``seed``, ``out_dir``, and ``profile`` override the file's values when
    given, which is how the CLI flags are applied.
    """
    path = pathlib.Path(path)
    try:
        with open(path, "rb") as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None

    known_tables = {"experiment", "model", "train", "run"}
    unknown = sorted(set(raw) - known_tables)
    if unknown:
        raise ConfigError(f"unknown table(s): {', '.join(unknown)}")
    for name in ("experiment", "model", "train"):
        if name not in raw:
            raise ConfigError(f"missing [{name}] table")
        if not isinstance(raw[name], dict):
            raise ConfigError(f"[{name}] must be a table")

    exp = _check_table(raw["experiment"], _EXPERIMENT_KEYS, "experiment")
    exp["name"] = normalize_experiment_name(exp["name"])
    if seed is not None:
        exp["seed"] = int(seed)
    if exp["seed"] < 0:
        raise ConfigError("[experiment].seed must be non-negative")
    if out_dir is not None:
        exp["out_dir"] = str(out_dir)
    if profile is not None:
        exp["profile"] = profile
    if exp["profile"] not in PROFILES:
        raise ConfigError(
            f"profile must be one of {'/'.join(PROFILES)}, got {exp['profile']!r}"
        )

    model_table = dict(raw["model"])
    variant = model_table.pop("variant", None)
    if variant not in _MODEL_KEYS:
        raise ConfigError(
            f"[model].variant must be one of {', '.join(sorted(_MODEL_KEYS))}, "
            f"got {variant!r}"
        )
    theta0_table = {k: model_table.pop(k) for k in list(model_table) if k in _THETA0_KEYS}
    model_spec = _check_table(model_table, _MODEL_KEYS[variant], "model")
    model_spec["variant"] = variant
    model_spec.update(_check_table(theta0_table, _THETA0_KEYS, "model"))

    train_table = _check_table(raw["train"], _TRAIN_KEYS, "train")
    _check_eta(float(train_table["eta"]), float(train_table["horizon"]), "[train].eta")
    if train_table["batch_size"] < 1:
        raise ConfigError("[train].batch_size must be >= 1")
    if train_table["inner_steps"] < 0:
        raise ConfigError("[train].inner_steps must be >= 0")
    if train_table["penalty"] < 0:
        raise ConfigError("[train].penalty must be >= 0")
    train = TrainConfig(
        eta=float(train_table["eta"]),
        batch_size=int(train_table["batch_size"]),
        inner_steps=int(train_table["inner_steps"]),
        horizon=float(train_table["horizon"]),
        penalty=float(train_table["penalty"]),
        inner_eta=(
            None if train_table["inner_eta"] is None else float(train_table["inner_eta"])
        ),
    )

    run_table = raw.get("run", {})
    if not isinstance(run_table, dict):
        raise ConfigError("[run] must be a table")
    run = _check_table(run_table, _RUN_KEYS[exp["name"]], "run")
    if "eta_grid" in run:
        grid = run["eta_grid"]
        if len(grid) < 4:
            raise ConfigError("[run].eta_grid needs at least 4 values")
        for value in grid:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError("[run].eta_grid entries must be numbers")
            _check_eta(float(value), train.horizon, "[run].eta_grid entry")
        if len(set(map(float, grid))) != len(grid):
            raise ConfigError("[run].eta_grid entries must be distinct")

    return ExperimentConfig(
        experiment=exp["name"],
        seed=int(exp["seed"]),
        out_dir=pathlib.Path(exp["out_dir"]),
        profile=exp["profile"],
        model_spec=model_spec,
        train=train,
        run=run,
        source_path=path,
    )


# ---------------------------------------------------------------------------
# Seeded model construction.
# ---------------------------------------------------------------------------


def _as_matrix(value: list, key: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2:
        raise ConfigError(f"[model].{key} must be a matrix (list of rows)")
    return arr


def _build_quadratic(spec: Mapping[str, Any], stream: RngStream) -> QuadraticModel:
    if spec.get("curvature") is not None:
        return QuadraticModel(_as_matrix(spec["curvature"], "curvature"))
    dim = spec.get("dim")
    low, high = spec.get("eig_low"), spec.get("eig_high")
    if dim is None or low is None or high is None:
        raise ConfigError(
            "[model] quadratic needs either 'curvature' or dim/eig_low/eig_high"
        )
    if not 0 < low <= high:
        raise ConfigError("[model] eigenvalue range must satisfy 0 < eig_low <= eig_high")
    return QuadraticModel(spd_random(dim, low, high, stream))


def _build_linreg(spec: Mapping[str, Any], stream: RngStream) -> LinearRegressionModel:
    explicit = [spec.get(k) is not None for k in ("design", "mean", "cov")]
    if any(explicit):
        if not all(explicit):
            raise ConfigError(
                "[model] linear_regression with explicit arrays needs all of "
                "design, mean, cov"
            )
        design = _as_matrix(spec["design"], "design")
        mean = np.asarray(spec["mean"], dtype=float)
        cov = _as_matrix(spec["cov"], "cov")
        return LinearRegressionModel(design, mean, cov)

    n_features = spec.get("n_features")
    n_params = spec.get("n_params")
    alpha = spec.get("alpha")
    if n_features is None or n_params is None or alpha is None:
        raise ConfigError(
            "[model] linear_regression needs n_features/n_params/alpha unless "
            "explicit arrays are given"
        )
    if alpha <= 0:
        raise ConfigError("[model].alpha must be positive")
    gen = stream.generator

    if spec["isotropic_design"]:
        if n_params < n_features:
            raise ConfigError(
                "[model] isotropic_design requires n_params >= n_features"
            )
        raw = gen.standard_normal((n_params, n_features))
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))
        design = math.sqrt(alpha) * q.T
    else:
        raw = gen.standard_normal((n_features, n_params))
        gram_trace = float(np.sum(raw * raw))
        design = raw * math.sqrt(alpha * n_params / gram_trace)

    cov = spd_random(
        n_features, float(spec["cov_eig_low"]), float(spec["cov_eig_high"]), stream
    ) * float(spec["cov_scale"])

    mode = spec["target_mode"]
    if mode == "in_range":
        theta_true = float(spec["target_scale"]) * gen.standard_normal(n_params)
        mean = design @ theta_true
    elif mode == "gaussian":
        mean = float(spec["target_scale"]) * gen.standard_normal(n_features)
    else:
        raise ConfigError("[model].target_mode must be 'in_range' or 'gaussian'")
    return LinearRegressionModel(design, mean, cov)


def _build_logistic(spec: Mapping[str, Any], stream: RngStream) -> LogisticModel:
    dim = int(spec["dim"])
    if dim < 1:
        raise ConfigError("[model].dim must be >= 1")
    prob = float(spec["class_prob"])
    if not 0.0 < prob < 1.0:
        raise ConfigError("[model].class_prob must lie in (0, 1)")
    gen = stream.generator
    direction = gen.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    offset = float(spec["offset_scale"]) * gen.standard_normal(dim)
    half = 0.5 * float(spec["separation"])
    mean0 = offset - half * direction
    mean1 = offset + half * direction
    scale = float(spec["cov_scale"])
    cov0 = spd_random(dim, float(spec["cov_eig_low"]), float(spec["cov_eig_high"]), stream)
    cov1 = spd_random(dim, float(spec["cov_eig_low"]), float(spec["cov_eig_high"]), stream)
    return LogisticModel(
        class_prob=prob,
        mean0=mean0,
        mean1=mean1,
        cov0=scale * cov0,
        cov1=scale * cov1,
        bias=float(spec["bias"]),
    )


_BUILDERS = {
    "quadratic": _build_quadratic,
    "linear_regression": _build_linreg,
    "logistic": _build_logistic,
}


def build_model(spec: Mapping[str, Any], stream: RngStream) -> LossModel:
    """Construct the loss model described by a validated ``[model]`` spec.

    Randomly generated pieces (curvature spectra, design matrices, class
    geometry) are drawn from ``stream``, so one seed pins the whole problem
    instance.
    """
    variant = spec.get("variant")
    if variant not in _BUILDERS:
        raise ConfigError(f"unknown model variant {variant!r}")
    return _BUILDERS[variant](spec, stream)


def build_theta0(
    spec: Mapping[str, Any], model: LossModel, stream: RngStream
) -> np.ndarray:
    """Build the initial parameter vector for a validated model spec."""
    raw = spec.get("theta0", "zeros")
    scale = float(spec.get("theta0_scale", 1.0))
    if isinstance(raw, list):
        theta0 = np.asarray(raw, dtype=float)
        if theta0.shape != (model.d_theta,):
            raise ConfigError(
                f"[model].theta0 has length {theta0.size}, expected {model.d_theta}"
            )
        return theta0
    if raw == "zeros":
        return np.zeros(model.d_theta)
    if raw == "gaussian":
        return scale * stream.generator.standard_normal(model.d_theta)
    if raw == "ones":
        return scale * np.ones(model.d_theta)
    raise ConfigError(
        "[model].theta0 must be 'zeros', 'ones', 'gaussian', or an explicit list"
    )
