"""Feedback control of the learning-rate factor.

The controller minimizes, pointwise in time, the right side of the scalar
expected-loss ODE over the factor ``u`` in ``[0, 1]``: contraction wins at
high loss (full rate), noise injection wins near the floor (the factor
shrinks linearly with the loss).  The closed form is checked against a dense
grid search on the same objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .models import LossModel
from .numerics import RngStream
from .sde import LossOdeParams, loss_ode_rhs
from .training import (
    ProjectionSet,
    TrainConfig,
    TrajectoryRecord,
    adversarial_step,
)


@dataclass(frozen=True)
class ConstantPolicy:
    """Fixed learning-rate factor."""

    u: float

    def __post_init__(self):
        if not (0.0 <= self.u <= 1.0):
            raise ValueError(f"u must lie in [0, 1], got {self.u}")

    def factor(self, s: float) -> float:
        return self.u


@dataclass(frozen=True)
class FeedbackPolicy:
    """Loss-feedback factor derived from the expected-loss ODE.

    Fields mirror the ODE calibration: contraction scale ``alpha``, driving
    input-noise trace, batch size, inner-step count, and learning rate.
    """

    alpha: float
    noise_trace: float
    batch_size: int
    inner_steps: int
    eta: float

    def __post_init__(self):
        if self.alpha <= 0 or self.noise_trace <= 0:
            raise ValueError("alpha and noise_trace must be > 0")
        if self.batch_size < 1 or self.inner_steps < 0 or self.eta <= 0:
            raise ValueError("invalid batch_size / inner_steps / eta")

    @property
    def threshold(self) -> float:
        """Loss level ``2 * noise_trace / batch_size`` above which the full
        rate is optimal."""
        return 2.0 * self.noise_trace / self.batch_size

    def factor(self, s: float) -> float:
        return optimal_u(s, self)

    def ode_params(self) -> LossOdeParams:
        return LossOdeParams(
            alpha=self.alpha,
            noise_trace=self.noise_trace,
            inner_steps=self.inner_steps,
            eta=self.eta,
            beta=2.0 * self.batch_size / self.eta,
        )


def optimal_u(s: float, policy: FeedbackPolicy) -> float:
    """Closed-form minimizer of the loss-ODE right side over ``u in [0, 1]``.

    Above the threshold the objective decreases in ``u`` on the whole
    interval and the full rate is optimal.  Below it the objective is a
    convex parabola with interior minimum
    ``(1 + 2 K eta) s B / ((2 noise_trace - s B) alpha eta)``, clamped to 1.
    """
    if s < 0:
        raise ValueError(f"loss must be >= 0, got {s}")
    if s >= policy.threshold:
        return 1.0
    if s == 0.0:
        return 0.0
    b = policy.batch_size
    numer = (1.0 + 2.0 * policy.inner_steps * policy.eta) * s * b
    denom = (2.0 * policy.noise_trace - s * b) * policy.alpha * policy.eta
    return min(1.0, numer / denom)


def grid_oracle_u(s: float, policy: FeedbackPolicy, *, grid_step: float = 1e-3) -> float:
    """Brute-force minimizer of the same objective on a uniform ``u`` grid.

    Independent check of ``optimal_u``: evaluates the loss-ODE right side on
    ``{0, grid_step, ..., 1}`` and returns the argmin.
    """
    if grid_step <= 0 or grid_step > 0.5:
        raise ValueError(f"grid_step must lie in (0, 0.5], got {grid_step}")
    params = policy.ode_params()
    grid = np.arange(0.0, 1.0 + grid_step / 2.0, grid_step)
    values = np.array([loss_ode_rhs(params, s, u) for u in grid])
    return float(grid[int(np.argmin(values))])


@dataclass
class LossEstimate:
    """Loss level fed to the controller, with provenance."""

    value: float
    source: str
    stderr: float | None = None


def estimate_s(
    model: LossModel,
    theta: NDArray,
    *,
    mode: str = "analytic",
    batch_size: int = 256,
    stream: RngStream | None = None,
) -> LossEstimate:
    """Estimate the expected loss at ``theta``.

    ``analytic`` evaluates the closed-form expected loss (models without one
    are rejected); ``minibatch_mc`` averages the pointwise loss over a fresh
    batch and reports the standard error.
    """
    theta = np.asarray(theta, dtype=float)
    if mode == "analytic":
        monitor = getattr(model, "expected_loss", None)
        if monitor is None:
            raise ValueError(
                f"{type(model).__name__} has no closed-form expected loss"
            )
        return LossEstimate(value=float(monitor(theta)), source="analytic")
    if mode != "minibatch_mc":
        raise ValueError(f"mode must be 'analytic' or 'minibatch_mc', got {mode!r}")
    if stream is None:
        raise ValueError("minibatch_mc estimation needs a stream")
    batch = model.sample_batch(batch_size, stream)
    losses = model.loss(theta, batch.x, batch.y)
    return LossEstimate(
        value=float(losses.mean()),
        source="minibatch_mc",
        stderr=float(losses.std(ddof=1) / np.sqrt(batch_size)),
    )


def controlled_train(
    model: LossModel,
    cfg: TrainConfig,
    policy: ConstantPolicy | FeedbackPolicy,
    stream: RngStream,
    theta0: NDArray,
    *,
    ball: ProjectionSet | None = None,
    s_source: str = "centered_analytic",
    store_every: int = 1,
    store_thetas: bool = False,
) -> TrajectoryRecord:
    """Adversarial training with a per-step learning-rate factor.

    Before each outer step the loss level is evaluated and the policy maps
    it to a factor multiplying both loops' rates.  ``centered_analytic``
    (default) feeds the policy the expected loss above its irreducible floor,
    the quantity the feedback formula is calibrated to: fed the uncentered
    loss, a noise floor above the policy threshold would pin the factor at 1.
    ``analytic`` feeds the raw expected loss.

    Batch draws come from ``stream.child(0)`` exactly as in ``train``, so a
    constant factor of 1 reproduces the plain adversarial run draw for draw.
    """
    if s_source not in ("centered_analytic", "analytic"):
        raise ValueError(f"unknown s_source {s_source!r}")
    if s_source == "centered_analytic":
        monitor = getattr(model, "centered_expected_loss", None)
    else:
        monitor = getattr(model, "expected_loss", None)
    if monitor is None:
        if isinstance(policy, ConstantPolicy):
            monitor = lambda _theta: 0.0  # noqa: E731 - factor ignores the loss
        else:
            raise ValueError(
                f"{type(model).__name__} has no closed-form loss for "
                f"s_source={s_source!r}"
            )
    if isinstance(policy, FeedbackPolicy) and getattr(model, "isotropic_alpha", None) is None:
        raise ValueError(
            "feedback control requires a model with an isotropic design "
            "(isotropic_alpha set)"
        )
    theta = np.array(theta0, dtype=float)
    loss_monitor = getattr(model, "expected_loss", None)
    batch_stream = stream.child(0)

    iters, times, losses, thetas, factors = [], [], [], [], []

    def record(step: int, u: float):
        iters.append(step)
        times.append(step * cfg.eta)
        factors.append(u)
        if loss_monitor is not None:
            losses.append(loss_monitor(theta))
        if store_thetas:
            thetas.append(theta.copy())

    record(0, policy.factor(float(monitor(theta))))
    n_steps = cfg.n_steps
    for step in range(1, n_steps + 1):
        u = policy.factor(float(monitor(theta)))
        batch = model.sample_batch(cfg.batch_size, batch_stream, lead=theta.shape[:-1])
        theta = adversarial_step(model, theta, batch, cfg, ball=ball, u=u)
        if step % store_every == 0 or step == n_steps:
            record(step, u)

    return TrajectoryRecord(
        algorithm="controlled",
        iterations=np.array(iters),
        times=np.array(times),
        losses=np.array(losses) if losses else None,
        thetas=np.array(thetas) if store_thetas else None,
        u_factors=np.array(factors),
    )
