"""Minibatch adversarial training and its one-step moment oracles.

The outer loop descends the parameter; an inner loop ascends a shared
perturbation of the current batch.  Two inner-loop modes are supported:
projected ascent onto a norm ball (no penalty) and penalized unconstrained
ascent.  All updates broadcast over leading replication axes, so the same
step code drives a single run or a vectorized ensemble.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .models import Batch, LinearRegressionModel, LossModel, QuadraticModel, Regularizer
from .numerics import RngStream


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``beta = 2 * batch_size / eta`` is the inverse noise temperature of the
    matching continuous-time dynamics, and ``n_steps = floor(horizon / eta)``
    is the iteration budget.  ``inner_eta`` defaults to the outer rate.
    """

    eta: float
    batch_size: int
    inner_steps: int
    horizon: float
    penalty: float = 0.0
    inner_eta: float | None = None

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.inner_steps < 0:
            raise ValueError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if self.penalty < 0:
            raise ValueError(f"penalty must be >= 0, got {self.penalty}")
        if self.inner_eta is not None and self.inner_eta <= 0:
            raise ValueError(f"inner_eta must be > 0, got {self.inner_eta}")

    @property
    def beta(self) -> float:
        return 2.0 * self.batch_size / self.eta

    @property
    def n_steps(self) -> int:
        # Guard against float quotients like 2/0.02 = 99.999... flooring low.
        return int(math.floor(self.horizon / self.eta + 1e-9))

    @property
    def effective_inner_eta(self) -> float:
        return self.eta if self.inner_eta is None else self.inner_eta

    @property
    def regularizer(self) -> Regularizer:
        return Regularizer(self.penalty)

    @property
    def in_approximation_regime(self) -> bool:
        """Whether ``eta < min(1, horizon)``, the regime where the
        continuous-time limit carries its accuracy guarantee."""
        return self.eta < min(1.0, self.horizon)

    def with_eta(self, eta: float) -> "TrainConfig":
        return replace(self, eta=eta)


@dataclass(frozen=True)
class ProjectionSet:
    """Norm ball constraint for the perturbation (projected inner mode)."""

    norm: str
    radius: float

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise ValueError(f"norm must be 'l2' or 'linf', got {self.norm!r}")
        if self.radius <= 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")


def project(delta: NDArray, ball: ProjectionSet) -> NDArray:
    """Euclidean projection of perturbations onto the ball, per last axis."""
    delta = np.asarray(delta, dtype=float)
    if ball.norm == "linf":
        return np.clip(delta, -ball.radius, ball.radius)
    norms = np.linalg.norm(delta, axis=-1, keepdims=True)
    # The grace factor keeps the map exactly idempotent: a rescaled point
    # lands within a few ulp of the sphere and must not be rescaled again.
    outside = norms > ball.radius * (1.0 + 1e-12)
    scale = np.where(outside, ball.radius / np.maximum(norms, 1e-300), 1.0)
    return delta * scale


@dataclass
class TrajectoryRecord:
    """Recorded time series of one training run (or a vectorized ensemble).

    ``losses``/``robustness`` entries have the leading replication shape of
    the run; scalars for a single run.  ``thetas`` is only kept on request.
    """

    algorithm: str
    iterations: NDArray
    times: NDArray
    losses: NDArray | None
    thetas: NDArray | None = None
    robustness: NDArray | None = None
    robustness_stderr: NDArray | None = None
    robustness_iterations: NDArray | None = None
    u_factors: NDArray | None = None


def trajectory_to_csv(
    record: TrajectoryRecord, path: str | Path, *, include_theta: bool = False
) -> None:
    """Serialize a single-run trajectory to CSV.

    Columns: iteration, time, loss, robustness, u_factor, then the flattened
    parameter components when ``include_theta`` is set.  Series the record
    does not carry are left as empty cells.  Vectorized ensemble records are
    rejected; serialize their aggregates instead.
    """
    losses = record.losses
    if losses is not None and np.ndim(losses) > 1:
        raise ValueError("trajectory CSV needs a single-run record")
    rob_by_iter: dict[int, float] = {}
    if record.robustness is not None and record.robustness_iterations is not None:
        rob_by_iter = {
            int(i): float(v)
            for i, v in zip(record.robustness_iterations, record.robustness)
        }
    header = ["iteration", "time", "loss", "robustness", "u_factor"]
    d_theta = 0
    if include_theta and record.thetas is not None:
        d_theta = record.thetas.shape[-1]
        header.extend(f"theta_{j}" for j in range(d_theta))
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row_index, iteration in enumerate(record.iterations):
            row: list[object] = [int(iteration), repr(float(record.times[row_index]))]
            row.append(
                "" if losses is None else repr(float(losses[row_index]))
            )
            rob = rob_by_iter.get(int(iteration))
            row.append("" if rob is None else repr(rob))
            row.append(
                ""
                if record.u_factors is None
                else repr(float(record.u_factors[row_index]))
            )
            if d_theta:
                row.extend(repr(float(v)) for v in record.thetas[row_index])
            writer.writerow(row)


def _batch_theta(theta: NDArray) -> NDArray:
    """Expand theta against the batch axis."""
    return np.asarray(theta, dtype=float)[..., None, :]


def inner_ascent(
    model: LossModel,
    theta: NDArray,
    batch: Batch,
    cfg: TrainConfig,
    *,
    ball: ProjectionSet | None = None,
    u: float = 1.0,
    return_trace: bool = False,
) -> NDArray | list[NDArray]:
    """Run the inner ascent and return the final perturbation.

    Each of the ``inner_steps`` iterations moves a batch-shared perturbation
    along the batch-mean input gradient minus the penalty gradient, scaled by
    ``u * inner_eta``; with a ball the iterate is projected instead (set
    ``penalty = 0`` to recover pure projected ascent).
    """
    theta = np.asarray(theta, dtype=float)
    lead = np.broadcast_shapes(theta.shape[:-1], batch.x.shape[:-2])
    delta = np.zeros(lead + (model.d_x,))
    step = u * cfg.effective_inner_eta
    reg = cfg.regularizer
    trace: list[NDArray] = []
    theta_b = _batch_theta(theta)
    for _ in range(cfg.inner_steps):
        gx = model.grad_x(theta_b, batch.x + delta[..., None, :], batch.y)
        ascent = gx.mean(axis=-2) - reg.grad(delta)
        delta = delta + step * ascent
        if ball is not None:
            delta = project(delta, ball)
        if return_trace:
            trace.append(delta)
    return trace if return_trace else delta


def delta_first_order(
    model: LossModel,
    theta: NDArray,
    batch: Batch,
    cfg: TrainConfig,
    *,
    u: float = 1.0,
) -> NDArray:
    """Leading-order inner-loop perturbation: ``K * eta * u`` times the
    batch-mean input gradient at the unperturbed batch."""
    gx = model.grad_x(_batch_theta(theta), batch.x, batch.y)
    return cfg.inner_steps * cfg.effective_inner_eta * u * gx.mean(axis=-2)


def adversarial_step(
    model: LossModel,
    theta: NDArray,
    batch: Batch,
    cfg: TrainConfig,
    *,
    ball: ProjectionSet | None = None,
    u: float = 1.0,
) -> NDArray:
    """One outer descent step on the adversarially perturbed batch."""
    theta = np.asarray(theta, dtype=float)
    delta = inner_ascent(model, theta, batch, cfg, ball=ball, u=u)
    gt = model.grad_theta(_batch_theta(theta), batch.x + delta[..., None, :], batch.y)
    return theta - u * cfg.eta * gt.mean(axis=-2)


def sgd_step(
    model: LossModel,
    theta: NDArray,
    batch: Batch,
    cfg: TrainConfig,
    *,
    u: float = 1.0,
) -> NDArray:
    """One plain stochastic gradient step on the clean batch."""
    theta = np.asarray(theta, dtype=float)
    gt = model.grad_theta(_batch_theta(theta), batch.x, batch.y)
    return theta - u * cfg.eta * gt.mean(axis=-2)


def robustness_ensemble(
    model: LossModel, theta: NDArray, n_mc: int, stream: RngStream
) -> tuple[NDArray, NDArray]:
    """Batched Monte Carlo robustness criterion for an ensemble of thetas.

    Returns per-replication ``(mean, stderr)`` of the squared input-gradient
    norm, using ``n_mc`` fresh samples per replication.
    """
    theta = np.asarray(theta, dtype=float)
    lead = theta.shape[:-1]
    batch = model.sample_batch(n_mc, stream, lead=lead)
    gx = model.grad_x(_batch_theta(theta), batch.x, batch.y)
    sq = np.sum(np.square(gx), axis=-1)
    return sq.mean(axis=-1), sq.std(axis=-1, ddof=1) / np.sqrt(n_mc)


def train(
    model: LossModel,
    cfg: TrainConfig,
    stream: RngStream,
    theta0: NDArray,
    *,
    algorithm: str = "adversarial",
    ball: ProjectionSet | None = None,
    u: float = 1.0,
    batch_mode: str = "full",
    store_every: int = 1,
    store_thetas: bool = False,
    robustness_every: int = 0,
    robustness_n_mc: int = 2000,
) -> TrajectoryRecord:
    """Run a full training loop with fresh batches each step.

    ``theta0`` may carry leading replication axes; the whole ensemble then
    advances in lockstep on independent batches.  Batches come from
    ``stream.child(0)`` and monitoring draws from ``stream.child(1)``, so
    adding monitors never perturbs the training realization.

    ``batch_mode='mean'`` draws the exactly-distributed batch mean instead of
    a full batch; this is valid (identical in law) only for models whose
    gradients are affine in the input, and is rejected otherwise.
    """
    if algorithm not in ("adversarial", "sgd"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if batch_mode not in ("full", "mean"):
        raise ValueError(f"unknown batch_mode {batch_mode!r}")
    if batch_mode == "mean" and not model.batch_mean_sufficient:
        raise ValueError(
            f"{type(model).__name__} gradients are not affine in x; "
            "batch_mode='mean' would change the training law"
        )
    theta = np.array(theta0, dtype=float)
    lead = theta.shape[:-1]
    batch_stream = stream.child(0)
    eval_stream = stream.child(1)

    monitor = getattr(model, "expected_loss", None)

    iters, times, losses, thetas = [], [], [], []
    rob_vals, rob_errs, rob_iters = [], [], []

    def record(step: int):
        iters.append(step)
        times.append(step * cfg.eta)
        if monitor is not None:
            losses.append(monitor(theta))
        if store_thetas:
            thetas.append(theta.copy())

    def record_robustness(step: int):
        mean, err = robustness_ensemble(model, theta, robustness_n_mc, eval_stream)
        rob_vals.append(mean)
        rob_errs.append(err)
        rob_iters.append(step)

    record(0)
    if robustness_every:
        record_robustness(0)
    n_steps = cfg.n_steps
    for step in range(1, n_steps + 1):
        if batch_mode == "mean":
            batch = model.sample_batch_mean(cfg.batch_size, batch_stream, lead=lead)
        else:
            batch = model.sample_batch(cfg.batch_size, batch_stream, lead=lead)
        if algorithm == "adversarial":
            theta = adversarial_step(model, theta, batch, cfg, ball=ball, u=u)
        else:
            theta = sgd_step(model, theta, batch, cfg, u=u)
        if step % store_every == 0 or step == n_steps:
            record(step)
        if robustness_every and (step % robustness_every == 0 or step == n_steps):
            record_robustness(step)

    return TrajectoryRecord(
        algorithm=algorithm,
        iterations=np.array(iters),
        times=np.array(times),
        losses=np.array(losses) if losses else None,
        thetas=np.array(thetas) if store_thetas else None,
        robustness=np.array(rob_vals) if rob_vals else None,
        robustness_stderr=np.array(rob_errs) if rob_errs else None,
        robustness_iterations=np.array(rob_iters) if rob_iters else None,
        u_factors=np.full(len(iters), float(u)),
    )


@dataclass
class MomentPair:
    """First and second moments of the one-step parameter increment."""

    first: NDArray
    second: NDArray
    provenance: str
    n_samples: int | None = None
    first_stderr: NDArray | None = None
    second_stderr: NDArray | None = None


def one_step_moments_discrete(
    model: LossModel,
    cfg: TrainConfig,
    theta0: NDArray,
    n_samples: int,
    stream: RngStream,
    *,
    ball: ProjectionSet | None = None,
    antithetic: bool = True,
) -> MomentPair:
    """Monte Carlo moments of one adversarial step from ``theta0``.

    With ``antithetic`` the batches come in mirrored pairs about the data
    mean and standard errors are computed over pair averages, which removes
    the odd-order sampling noise at no extra model evaluations.
    """
    theta0 = np.asarray(theta0, dtype=float)
    if antithetic:
        if n_samples % 2:
            raise ValueError("antithetic estimation needs an even n_samples")
        half = n_samples // 2
        batch = model.sample_batch(cfg.batch_size, stream, lead=(half,))
        mirrored = model.antithetic_batch(batch)
        d_plus = adversarial_step(model, theta0, batch, cfg, ball=ball) - theta0
        d_minus = adversarial_step(model, theta0, mirrored, cfg, ball=ball) - theta0
        first_draws = 0.5 * (d_plus + d_minus)
        second_draws = 0.5 * (
            np.einsum("ni,nj->nij", d_plus, d_plus)
            + np.einsum("ni,nj->nij", d_minus, d_minus)
        )
        n_eff = half
    else:
        batch = model.sample_batch(cfg.batch_size, stream, lead=(n_samples,))
        d = adversarial_step(model, theta0, batch, cfg, ball=ball) - theta0
        first_draws = d
        second_draws = np.einsum("ni,nj->nij", d, d)
        n_eff = n_samples
    root = np.sqrt(n_eff)
    return MomentPair(
        first=first_draws.mean(axis=0),
        second=second_draws.mean(axis=0),
        provenance="discrete_mc",
        n_samples=n_samples,
        first_stderr=first_draws.std(axis=0, ddof=1) / root,
        second_stderr=second_draws.std(axis=0, ddof=1) / root,
    )


def one_step_moments_analytic(
    model: LossModel, cfg: TrainConfig, theta0: NDArray
) -> MomentPair:
    """Closed-form one-step moments, truncated at second order in ``eta``.

    First moment:
    ``-eta * grad g - (K eta^2 / 2) * grad |D|^2
    - (K eta^2 / 2B) * (grad E|grad_x L|^2 - grad |D|^2)``
    where ``g`` is the expected loss and ``D`` the mean input gradient.
    Second moment: ``eta^2 (grad g)(grad g)' + (eta^2 / B) Cov(grad_theta L)``.
    Requires a model with closed-form statistics.
    """
    if not model.has_closed_form_stats:
        raise ValueError(f"{type(model).__name__} has no closed-form statistics")
    theta0 = np.asarray(theta0, dtype=float)
    eta, k, b = cfg.eta, cfg.inner_steps, cfg.batch_size
    grad_g = model.grad_expected_loss(theta0)
    grad_dsq = model.grad_sq_norm_mean_input_grad(theta0)
    grad_hsq = model.grad_mean_sq_input_grad(theta0)
    first = (
        -eta * grad_g
        - 0.5 * k * eta**2 * grad_dsq
        - (k * eta**2 / (2.0 * b)) * (grad_hsq - grad_dsq)
    )
    second = eta**2 * np.outer(grad_g, grad_g) + (eta**2 / b) * model.param_grad_cov()
    return MomentPair(first=first, second=second, provenance="discrete_analytic")


def one_step_moments_exact(
    model: LossModel, cfg: TrainConfig, theta0: NDArray
) -> MomentPair:
    """Exact one-step moments for models with input-affine gradients.

    For these models the inner ascent is a linear recursion in the batch
    mean, so the full step is an affine map of a Gaussian and both moments
    follow in closed form at every order of ``eta`` (no truncation).  Serves
    as the reference that bounds the truncation error of
    ``one_step_moments_analytic``.  Penalized, unprojected mode only.
    """
    theta0 = np.asarray(theta0, dtype=float)
    eta, eta_in = cfg.eta, cfg.effective_inner_eta
    k, b, lam = cfg.inner_steps, cfg.batch_size, cfg.penalty
    if isinstance(model, QuadraticModel):
        dim = model.d_theta
        eye = np.eye(dim)
        m = eye + eta_in * (model.h - 2.0 * lam * eye)
        s_k = np.zeros_like(eye)
        power = eye.copy()
        for _ in range(k):
            s_k = s_k + power
            power = power @ m
        p = eta * model.h + eta * eta_in * model.h @ s_k @ model.h
        first = -(p @ theta0)
        second = p @ (np.outer(theta0, theta0) + eye / b) @ p.T
        return MomentPair(first=first, second=second, provenance="discrete_exact")
    if isinstance(model, LinearRegressionModel):
        m = 1.0 + 2.0 * eta_in * (1.0 - lam)
        s_k = sum(m**j for j in range(k))
        c = 2.0 * eta * (1.0 + 2.0 * eta_in * s_k)
        gap_grad = model.fit_gap(theta0) @ model.a
        first = -c * gap_grad
        second = np.outer(first, first) + (c**2 / b) * model.at_sigma_a
        return MomentPair(first=first, second=second, provenance="discrete_exact")
    raise ValueError(
        f"{type(model).__name__} does not admit exact one-step moments"
    )
