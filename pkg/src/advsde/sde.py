"""Continuous-time limits of the training dynamics.

Drift/diffusion coefficient assemblies at first and second order in the
learning rate, an Euler-Maruyama integrator, the exactly solvable
Ornstein-Uhlenbeck dynamics of the quadratic model (sampling, expected-loss
curves, stationary loss), and the scalar expected-loss ODE used by the
learning-rate controller.

Drift convention: the parameter follows
``dTheta = (b0(Theta) + eta * b1(Theta)) dt + sigma(Theta) dW``
where ``b0`` is the gradient flow of the effective objective and ``b1`` the
learning-rate correction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .models import LinearRegressionModel, LossModel, QuadraticModel
from .numerics import RngStream
from .training import MomentPair, TrainConfig

CONVENTIONS = ("paper_printed", "general_formula")


@dataclass
class SdeCoefficients:
    """Drift pieces and diffusion of one continuous-time dynamic.

    ``b0``/``b1`` map parameter arrays (broadcasting over leading axes) to
    drift vectors; ``sigma`` returns the diffusion matrix (state-independent
    ``(d, d)`` for the built-in models).
    """

    kind: str
    eta: float
    b0: Callable[[NDArray], NDArray]
    b1: Callable[[NDArray], NDArray]
    sigma: Callable[[NDArray], NDArray]

    def drift(self, theta: NDArray) -> NDArray:
        return self.b0(theta) + self.eta * self.b1(theta)


def _require_closed_form(model: LossModel):
    if not model.has_closed_form_stats:
        raise ValueError(
            f"{type(model).__name__} lacks closed-form statistics; "
            "continuous-time coefficients are only assembled for models "
            "with analytic gradients of their population statistics"
        )


def coefficients_adversarial(model: LossModel, cfg: TrainConfig) -> SdeCoefficients:
    """Coefficients of the adversarial-training limit.

    ``b0`` is minus the gradient of the effective objective (expected loss
    plus ``K / beta`` times the input-gradient variance); ``b1`` adds the
    inner-loop correction ``-(K/2) grad |D|^2`` and the usual
    ``-(1/4) grad |b0|^2`` discretization correction.  Diffusion is
    ``sqrt(2 / beta)`` times the square root of the parameter-gradient
    covariance.
    """
    _require_closed_form(model)
    k, beta = cfg.inner_steps, cfg.beta
    sigma_mat = math.sqrt(2.0 / beta) * model.param_grad_cov_sqrt()

    def b0(theta):
        return -(
            model.grad_expected_loss(theta)
            + (k / beta)
            * (
                model.grad_mean_sq_input_grad(theta)
                - model.grad_sq_norm_mean_input_grad(theta)
            )
        )

    def b1(theta):
        return -0.5 * k * model.grad_sq_norm_mean_input_grad(
            theta
        ) - 0.25 * model.grad_sq_norm_grad_expected_loss(theta)

    return SdeCoefficients(
        kind="adversarial", eta=cfg.eta, b0=b0, b1=b1, sigma=lambda theta: sigma_mat
    )


def coefficients_sgd(model: LossModel, cfg: TrainConfig) -> SdeCoefficients:
    """Coefficients of the plain SGD limit (inner loop switched off)."""
    _require_closed_form(model)
    sigma_mat = math.sqrt(2.0 / cfg.beta) * model.param_grad_cov_sqrt()

    def b0(theta):
        return -model.grad_expected_loss(theta)

    def b1(theta):
        return -0.25 * model.grad_sq_norm_grad_expected_loss(theta)

    return SdeCoefficients(
        kind="sgd", eta=cfg.eta, b0=b0, b1=b1, sigma=lambda theta: sigma_mat
    )


def coefficients_controlled(
    model: LossModel,
    cfg: TrainConfig,
    u: float,
    *,
    convention: str = "paper_printed",
) -> SdeCoefficients:
    """Coefficients of the rate-controlled dynamics at a fixed factor ``u``.

    With ``u`` multiplying the learning rate, ``b0`` scales by ``u`` (its
    variance part by ``u^2``) and the diffusion by ``u``.  The two
    conventions differ only in the linear-regression second-order drift:

    - ``general_formula``: ``b1 = -(K/2) u^2 grad |D|^2 - (1/4) grad |b0|^2``,
      which for the linear model gives ``-(4K u^2 I + 2 u^2 A'A) v`` with
      ``v = A'(A theta - mu)``;
    - ``paper_printed``: the historical printed form
      ``-(u^2 A'A + 4 K u I) v`` (factor ``u`` instead of ``u^2`` on the
      inner-loop term, coefficient 1 instead of 2 on ``A'A``), kept as the
      default because the scalar loss ODE and the feedback policy are
      calibrated against it.

    For other models the conventions coincide.
    """
    _require_closed_form(model)
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
    if not (0.0 <= u <= 1.0):
        raise ValueError(f"u must lie in [0, 1], got {u}")
    k, beta = cfg.inner_steps, cfg.beta
    sigma_mat = u * math.sqrt(2.0 / beta) * model.param_grad_cov_sqrt()

    def b0(theta):
        return -(
            u * model.grad_expected_loss(theta)
            + (k / beta)
            * u**2
            * (
                model.grad_mean_sq_input_grad(theta)
                - model.grad_sq_norm_mean_input_grad(theta)
            )
        )

    if convention == "paper_printed" and isinstance(model, LinearRegressionModel):

        def b1(theta):
            v = model.fit_gap(theta) @ model.a
            return -(u**2) * (v @ model.ata) - 4.0 * k * u * v

    else:

        def b1(theta):
            return -0.5 * k * u**2 * model.grad_sq_norm_mean_input_grad(
                theta
            ) - 0.25 * u**2 * model.grad_sq_norm_grad_expected_loss(theta)

    return SdeCoefficients(
        kind="controlled", eta=cfg.eta, b0=b0, b1=b1, sigma=lambda theta: sigma_mat
    )


def default_dt(cfg: TrainConfig) -> float:
    """Integrator step ``eta / 50``, small enough that the discretization
    bias sits below Monte Carlo noise at the experiment scales."""
    return cfg.eta / 50.0


def euler_maruyama(
    coeffs: SdeCoefficients | Callable[[float], SdeCoefficients],
    theta0: NDArray,
    horizon: float,
    dt: float,
    stream: RngStream,
    *,
    u_schedule: Callable[[float], float] | None = None,
    store_every: int = 0,
) -> NDArray | tuple[NDArray, NDArray]:
    """Integrate the dynamics by Euler-Maruyama.

    ``theta0`` may carry leading path axes for a vectorized ensemble.  With
    ``u_schedule``, ``coeffs`` must be a factory mapping ``u`` to
    coefficients; the factor is re-evaluated each step at the current time.
    Returns the final state, or ``(times, path)`` when ``store_every > 0``.
    """
    if u_schedule is not None and not callable(coeffs):
        raise ValueError("u_schedule requires a coefficient factory coeffs(u)")
    if dt <= 0 or horizon <= 0:
        raise ValueError("dt and horizon must be > 0")
    theta = np.array(theta0, dtype=float)
    gen = stream.generator
    n_steps = int(round(horizon / dt))
    if n_steps < 1:
        raise ValueError(f"horizon {horizon} shorter than one step dt={dt}")
    sqrt_dt = math.sqrt(dt)
    times, path = [0.0], [theta.copy()]
    current = coeffs if not callable(coeffs) else None
    for step in range(n_steps):
        if u_schedule is not None:
            current = coeffs(u_schedule(step * dt))
        elif current is None:
            current = coeffs(1.0)
        dw = gen.standard_normal(theta.shape) * sqrt_dt
        sig = current.sigma(theta)
        if sig.ndim == 2:
            noise = dw @ sig.T
        else:
            noise = np.einsum("...ij,...j->...i", sig, dw)
        theta = theta + current.drift(theta) * dt + noise
        if store_every and ((step + 1) % store_every == 0 or step + 1 == n_steps):
            times.append((step + 1) * dt)
            path.append(theta.copy())
    if store_every:
        return np.array(times), np.array(path)
    return theta


def path_to_csv(
    times: NDArray,
    path: NDArray,
    file: str | Path,
    *,
    monitor: Callable[[NDArray], NDArray] | None = None,
) -> None:
    """Serialize one integrated path to CSV: column ``t``, then either the
    flattened state components or, with ``monitor``, the monitored value."""
    times = np.asarray(times, dtype=float)
    path = np.asarray(path, dtype=float)
    if path.ndim != 2 or path.shape[0] != times.size:
        raise ValueError("need a single path shaped (n_times, d)")
    with open(file, "w", newline="") as handle:
        writer = csv.writer(handle)
        if monitor is None:
            writer.writerow(["t"] + [f"theta_{j}" for j in range(path.shape[1])])
            for t, state in zip(times, path):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in state])
        else:
            writer.writerow(["t", "monitored_loss"])
            values = np.asarray(monitor(path), dtype=float)
            for t, value in zip(times, values):
                writer.writerow([repr(float(t)), repr(float(value))])


@dataclass
class OuSolution:
    """Exact Gaussian solution of the quadratic model's limiting dynamics.

    In the curvature eigenbasis each mode is an independent scalar process
    with effective decay rate ``rate_hat = rate + (K + 1/2) eta rate^2``,
    deterministic mean ``exp(-rate_hat t)`` times the initial coordinate and
    variance ``(rate^2 / beta) (1 - exp(-2 rate_hat t)) / rate_hat``.
    """

    rates: NDArray
    basis: NDArray
    rates_hat: NDArray
    beta: float

    @classmethod
    def from_model(cls, model: QuadraticModel, cfg: TrainConfig) -> "OuSolution":
        rates, basis = np.linalg.eigh(model.h)
        k = cfg.inner_steps
        rates_hat = rates + (k + 0.5) * cfg.eta * rates**2
        return cls(rates=rates, basis=basis, rates_hat=rates_hat, beta=cfg.beta)

    def mode_coords(self, theta: NDArray) -> NDArray:
        return np.asarray(theta, dtype=float) @ self.basis

    def mean(self, theta0: NDArray, t: float) -> NDArray:
        w0 = self.mode_coords(theta0)
        return (w0 * np.exp(-self.rates_hat * t)) @ self.basis.T

    def mode_variances(self, t: NDArray | float) -> NDArray:
        t = np.asarray(t, dtype=float)
        decay = -np.expm1(-2.0 * np.multiply.outer(t, self.rates_hat))
        return (self.rates**2 / (self.beta * self.rates_hat)) * decay

    def sample(
        self, theta0: NDArray, t: float, stream: RngStream, count: int
    ) -> NDArray:
        """Draw ``count`` exact solution states at time ``t``."""
        w0 = self.mode_coords(theta0)
        mean = w0 * np.exp(-self.rates_hat * t)
        std = np.sqrt(self.mode_variances(float(t)))
        z = stream.generator.standard_normal((count, self.rates.size))
        return (mean + std * z) @ self.basis.T

    def expected_loss(self, theta0: NDArray, t: NDArray | float) -> NDArray:
        """Closed-form expected monitored loss along the dynamics.

        Sum over modes of ``rate/2`` times (squared mean plus variance): the
        initial condition decays at ``2 * rate_hat`` per mode while the
        noise-injection term saturates toward the stationary loss.
        """
        t = np.asarray(t, dtype=float)
        w0 = self.mode_coords(theta0)
        mean_sq = w0**2 * np.exp(-2.0 * np.multiply.outer(t, self.rates_hat))
        total = 0.5 * (mean_sq + self.mode_variances(t)) @ self.rates
        return total if total.ndim else float(total)

    def stationary_loss(self) -> float:
        """Long-time expected monitored loss, ``sum rate^3 / (2 beta rate_hat)``."""
        return float(np.sum(self.rates**3 / (2.0 * self.beta * self.rates_hat)))


def quad_expected_loss(
    model: QuadraticModel, cfg: TrainConfig, theta0: NDArray, t: NDArray | float
) -> NDArray | float:
    """Expected monitored loss of the adversarial limit for the quadratic model."""
    return OuSolution.from_model(model, cfg).expected_loss(theta0, t)


def quad_expected_loss_sgd(
    model: QuadraticModel, cfg: TrainConfig, theta0: NDArray, t: NDArray | float
) -> NDArray | float:
    """Expected monitored loss of the SGD limit (no inner loop, no
    second-order rate correction): per mode the decay rate is ``2 * rate``
    and the stationary level ``rate^2 / (2 beta)``."""
    rates, basis = np.linalg.eigh(model.h)
    t = np.asarray(t, dtype=float)
    w0 = np.asarray(theta0, dtype=float) @ basis
    decay = np.exp(-2.0 * np.multiply.outer(t, rates))
    mean_sq = w0**2 * decay
    var = (rates / cfg.beta) * -np.expm1(-2.0 * np.multiply.outer(t, rates))
    total = 0.5 * (mean_sq + var) @ rates
    return total if total.ndim else float(total)


def quad_stationary_loss(model: QuadraticModel, cfg: TrainConfig) -> float:
    """Stationary expected monitored loss of the adversarial limit."""
    return OuSolution.from_model(model, cfg).stationary_loss()


def sde_one_step_moments(
    model: QuadraticModel,
    cfg: TrainConfig,
    theta0: NDArray,
    *,
    mode: str = "exact",
    n_paths: int = 100_000,
    dt: float | None = None,
    stream: RngStream | None = None,
) -> MomentPair:
    """Moments of the continuous-time increment over one learning-rate unit.

    ``exact`` evaluates the Gaussian solution at ``t = eta``; ``mc`` runs
    Euler-Maruyama with a fine step and reports standard errors.
    """
    theta0 = np.asarray(theta0, dtype=float)
    if mode == "exact":
        ou = OuSolution.from_model(model, cfg)
        first = ou.mean(theta0, cfg.eta) - theta0
        cov = (ou.basis * ou.mode_variances(cfg.eta)) @ ou.basis.T
        second = np.outer(first, first) + cov
        return MomentPair(first=first, second=second, provenance="sde_exact")
    if mode != "mc":
        raise ValueError(f"mode must be 'exact' or 'mc', got {mode!r}")
    if stream is None:
        raise ValueError("mc mode needs a stream")
    coeffs = coefficients_adversarial(model, cfg)
    start = np.broadcast_to(theta0, (n_paths, theta0.size)).copy()
    final = euler_maruyama(
        coeffs, start, cfg.eta, dt if dt is not None else cfg.eta / 200.0, stream
    )
    d = final - theta0
    second_draws = np.einsum("ni,nj->nij", d, d)
    root = np.sqrt(n_paths)
    return MomentPair(
        first=d.mean(axis=0),
        second=second_draws.mean(axis=0),
        provenance="sde_mc",
        n_samples=n_paths,
        first_stderr=d.std(axis=0, ddof=1) / root,
        second_stderr=second_draws.std(axis=0, ddof=1) / root,
    )


@dataclass(frozen=True)
class LossOdeParams:
    """Parameters of the scalar expected-loss ODE under rate control.

    Valid for an isotropic design (``A A' = alpha I``, or scalar parameter
    with ``alpha = A'A``).  ``noise_trace`` is the driving input-noise trace.
    """

    alpha: float
    noise_trace: float
    inner_steps: int
    eta: float
    beta: float

    def __post_init__(self):
        if self.alpha <= 0 or self.noise_trace < 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be > 0, noise_trace >= 0")
        if self.inner_steps < 0 or self.eta < 0:
            raise ValueError("inner_steps and eta must be >= 0")


def loss_ode_rhs(
    params: LossOdeParams, s: float, u: float, *, drift_floor: float = 0.0
) -> float:
    """Right side of the expected-loss ODE at loss level ``s`` and factor ``u``.

    ``ds/dt = -2 (s - drift_floor) ((2 + 4 K eta) alpha u + eta alpha^2 u^2)
    + (8 alpha^2 noise_trace / beta) u^2``.  The default ``drift_floor = 0``
    is the calibrated form used by the controller; a positive floor gives the
    variant where only the excess loss above the floor contracts.
    """
    k, eta, alpha = params.inner_steps, params.eta, params.alpha
    contraction = (2.0 + 4.0 * k * eta) * alpha * u + eta * alpha**2 * u**2
    injection = (8.0 * alpha**2 * params.noise_trace / params.beta) * u**2
    return -2.0 * (s - drift_floor) * contraction + injection


def loss_ode_integrate(
    params: LossOdeParams,
    s0: float,
    u: float | Callable[[float, float], float],
    horizon: float,
    *,
    dt: float = 1e-3,
    drift_floor: float = 0.0,
) -> tuple[NDArray, NDArray, NDArray]:
    """Integrate the expected-loss ODE with classic fourth-order Runge-Kutta.

    ``u`` is either a constant factor or a feedback ``u(t, s)``.  Returns
    ``(times, losses, factors)`` where ``factors`` holds the factor applied
    at the start of each step (final entry repeats the last factor).
    """
    if s0 < 0:
        raise ValueError(f"initial loss must be >= 0, got {s0}")
    u_of = u if callable(u) else (lambda t, s: u)

    def rhs(t, s):
        return loss_ode_rhs(params, s, u_of(t, s), drift_floor=drift_floor)

    n_steps = int(round(horizon / dt))
    times = np.empty(n_steps + 1)
    losses = np.empty(n_steps + 1)
    factors = np.empty(n_steps + 1)
    t, s = 0.0, float(s0)
    times[0], losses[0] = t, s
    for i in range(n_steps):
        factors[i] = u_of(t, s)
        k1 = rhs(t, s)
        k2 = rhs(t + dt / 2.0, s + dt * k1 / 2.0)
        k3 = rhs(t + dt / 2.0, s + dt * k2 / 2.0)
        k4 = rhs(t + dt, s + dt * k3)
        s = s + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        t = (i + 1) * dt
        times[i + 1], losses[i + 1] = t, s
    factors[n_steps] = u_of(t, s)
    return times, losses, factors
