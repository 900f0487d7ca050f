"""Loss models: pointwise losses, gradient oracles, and population statistics.

Three data models are provided.  The quadratic and linear-regression models
expose closed-form population statistics; the logistic model falls back to
Monte Carlo with reported standard errors.  All gradient oracles broadcast
over arbitrary leading axes, so a single code path serves one sample, one
batch, or a whole ensemble of replications.

Gradient layout convention: ``grad_x_theta`` is the mixed second derivative
with rows indexed by the parameter component and columns by the input
component, i.e. entry ``(i, j)`` is d2 L / (dx_j dtheta_i).
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .numerics import RngStream, assert_spd, matrix_sqrt_spd, rng_substream

# Fixed fallback seed for Monte Carlo statistics when no stream is supplied,
# so repeated calls are reproducible by default.
_DEFAULT_MC_SEED = 86245301


@dataclass
class Batch:
    """A minibatch of inputs with optional binary labels.

    ``x`` has shape ``(..., batch, dim)``; leading axes carry independent
    replications.  ``y`` (if present) has shape ``(..., batch)``.
    """

    x: NDArray
    y: NDArray | None = None

    @property
    def size(self) -> int:
        return self.x.shape[-2]


@dataclass
class ModelStatistics:
    """Population statistics of a loss model at a parameter point.

    - ``expected_loss``: mean loss over the data law (constant offsets that
      do not affect the dynamics are dropped; see each model's docstring).
    - ``mean_input_grad``: mean gradient of the loss in the input.
    - ``mean_sq_input_grad``: mean squared norm of the input gradient.
    - ``param_grad_cov``: covariance matrix of the parameter gradient.
    - ``effective_objective``: expected loss plus ``inner_steps / beta`` times
      the input-gradient variance ``mean_sq_input_grad - |mean_input_grad|^2``;
      this is the potential whose negative gradient drives the leading-order
      continuous-time limit of adversarial training.
    - ``stderr``: Monte Carlo standard errors when estimated, else None.
    """

    expected_loss: float
    mean_input_grad: NDArray
    mean_sq_input_grad: float
    param_grad_cov: NDArray
    effective_objective: float
    stderr: dict[str, float] | None = None


@dataclass(frozen=True)
class Regularizer:
    """Quadratic penalty ``strength * |delta|^2`` on the perturbation."""

    strength: float

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError(f"penalty strength must be >= 0, got {self.strength}")

    def value(self, delta: NDArray) -> NDArray:
        return self.strength * np.sum(np.square(delta), axis=-1)

    def grad(self, delta: NDArray) -> NDArray:
        return 2.0 * self.strength * delta


def _sigmoid(z: NDArray) -> NDArray:
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LossModel(abc.ABC):
    """Common interface for pointwise losses over a known data law."""

    #: parameter dimension
    d_theta: int
    #: input dimension
    d_x: int
    #: True when every gradient oracle is affine in x, so a batch enters the
    #: training update only through its mean and the batch can be replaced by
    #: the exactly-distributed mean sample (see ``sample_batch_mean``).
    batch_mean_sufficient: bool = False
    #: True when population statistics have closed forms.
    has_closed_form_stats: bool = False

    @abc.abstractmethod
    def loss(self, theta: NDArray, x: NDArray, y: NDArray | None = None) -> NDArray:
        """Pointwise loss; broadcasts over leading axes of theta and x."""

    @abc.abstractmethod
    def grad_theta(
        self, theta: NDArray, x: NDArray, y: NDArray | None = None
    ) -> NDArray:
        """Gradient of the loss in the parameter."""

    @abc.abstractmethod
    def grad_x(self, theta: NDArray, x: NDArray, y: NDArray | None = None) -> NDArray:
        """Gradient of the loss in the input."""

    @abc.abstractmethod
    def grad_x_theta(
        self, theta: NDArray, x: NDArray, y: NDArray | None = None
    ) -> NDArray:
        """Mixed second derivative, shape ``(..., d_theta, d_x)``."""

    @abc.abstractmethod
    def sample_batch(
        self, batch_size: int, stream: RngStream, lead: tuple[int, ...] = ()
    ) -> Batch:
        """Draw a fresh batch, shape ``(*lead, batch_size, d_x)``."""

    def sample_batch_mean(
        self, batch_size: int, stream: RngStream, lead: tuple[int, ...] = ()
    ) -> Batch:
        """Draw the batch-mean directly as a size-1 batch.

        Only valid when ``batch_mean_sufficient``: the returned single-sample
        batch has the exact distribution of the mean of ``batch_size`` fresh
        samples, and the training update computed from it is identical in law
        to the full-batch update.
        """
        raise NotImplementedError(
            f"{type(self).__name__} has no batch-mean sampling shortcut"
        )

    def antithetic_batch(self, batch: Batch) -> Batch:
        """Mirror a batch about its conditional mean for variance reduction."""
        raise NotImplementedError(
            f"{type(self).__name__} has no antithetic mirroring rule"
        )

    @abc.abstractmethod
    def statistics(
        self,
        theta: NDArray,
        inner_steps: int,
        beta: float,
        *,
        n_mc: int = 20_000,
        stream: RngStream | None = None,
    ) -> ModelStatistics:
        """Population statistics at ``theta`` (closed form or Monte Carlo)."""

    def robustness_criterion(
        self, theta: NDArray, n_mc: int, stream: RngStream
    ) -> tuple[float, float]:
        """Monte Carlo estimate of the mean squared input-gradient norm.

        Returns ``(mean, stderr)``.  This is the sensitivity-to-perturbation
        measure tracked by the robustness experiments.
        """
        batch = self.sample_batch(n_mc, stream)
        gx = self.grad_x(np.asarray(theta, dtype=float), batch.x, batch.y)
        sq = np.sum(np.square(gx), axis=-1)
        mean = float(sq.mean())
        stderr = float(sq.std(ddof=1) / np.sqrt(n_mc))
        return mean, stderr


def _quad_form(vec: NDArray, mat: NDArray) -> NDArray:
    """Batched quadratic form ``vec . mat vec`` over the last axis."""
    return np.einsum("...i,ij,...j->...", vec, mat, vec)


class QuadraticModel(LossModel):
    """Quadratic loss ``0.5 (theta - x)' H (theta - x) - trace(H)`` with
    standard-normal inputs.

    The subtracted constant centers the pointwise loss but plays no role in
    any gradient; ``expected_loss`` reports the dynamic part
    ``0.5 theta' H theta``, which vanishes at the optimum.
    """

    batch_mean_sufficient = True
    has_closed_form_stats = True

    def __init__(self, curvature: NDArray):
        self.h = assert_spd(curvature, name="curvature")
        self.h2 = self.h @ self.h
        self.trace_h = float(np.trace(self.h))
        self.trace_h2 = float(np.trace(self.h2))
        self.d_theta = self.h.shape[0]
        self.d_x = self.h.shape[0]

    def loss(self, theta, x, y=None):
        diff = np.asarray(theta, dtype=float) - np.asarray(x, dtype=float)
        return 0.5 * _quad_form(diff, self.h) - self.trace_h

    def grad_theta(self, theta, x, y=None):
        diff = np.asarray(theta, dtype=float) - np.asarray(x, dtype=float)
        return diff @ self.h

    def grad_x(self, theta, x, y=None):
        return -self.grad_theta(theta, x)

    def grad_x_theta(self, theta, x, y=None):
        lead = np.broadcast_shapes(np.shape(theta)[:-1], np.shape(x)[:-1])
        return np.broadcast_to(-self.h, lead + self.h.shape)

    def sample_batch(self, batch_size, stream, lead=()):
        x = stream.generator.standard_normal((*lead, batch_size, self.d_x))
        return Batch(x=x)

    def sample_batch_mean(self, batch_size, stream, lead=()):
        z = stream.generator.standard_normal((*lead, 1, self.d_x))
        return Batch(x=z / np.sqrt(batch_size))

    def antithetic_batch(self, batch):
        return Batch(x=-batch.x)

    # -- closed-form statistics ------------------------------------------

    def expected_loss(self, theta: NDArray) -> NDArray:
        """Mean loss over the data law, excluding the constant offset."""
        return 0.5 * _quad_form(np.asarray(theta, dtype=float), self.h)

    def centered_expected_loss(self, theta: NDArray) -> NDArray:
        """Expected loss above its minimum (already zero-floored here)."""
        return self.expected_loss(theta)

    def grad_expected_loss(self, theta: NDArray) -> NDArray:
        return np.asarray(theta, dtype=float) @ self.h

    def grad_sq_norm_mean_input_grad(self, theta: NDArray) -> NDArray:
        """Gradient of ``|mean_input_grad|^2``."""
        return 2.0 * (np.asarray(theta, dtype=float) @ self.h2)

    def grad_mean_sq_input_grad(self, theta: NDArray) -> NDArray:
        """Gradient of the mean squared input-gradient norm."""
        return 2.0 * (np.asarray(theta, dtype=float) @ self.h2)

    def grad_sq_norm_grad_expected_loss(self, theta: NDArray) -> NDArray:
        """Gradient of ``|grad expected_loss|^2``."""
        return 2.0 * (np.asarray(theta, dtype=float) @ self.h2)

    def param_grad_cov(self) -> NDArray:
        return self.h2

    def param_grad_cov_sqrt(self) -> NDArray:
        return self.h

    def statistics(self, theta, inner_steps, beta, *, n_mc=20_000, stream=None):
        theta = np.asarray(theta, dtype=float)
        g = float(self.expected_loss(theta))
        mean_gx = -(theta @ self.h)
        mean_sq = float(_quad_form(theta, self.h2) + self.trace_h2)
        effective = g + (inner_steps / beta) * (mean_sq - float(mean_gx @ mean_gx))
        return ModelStatistics(
            expected_loss=g,
            mean_input_grad=mean_gx,
            mean_sq_input_grad=mean_sq,
            param_grad_cov=self.h2.copy(),
            effective_objective=effective,
        )


class LinearRegressionModel(LossModel):
    """Squared-error regression loss ``|A theta - x|^2`` with Gaussian inputs
    ``x ~ N(mu, Sigma)``.

    ``isotropic_alpha`` is set when the design satisfies ``A A' = alpha I``
    (within 1e-8 relative error) or when the parameter is scalar, in which
    case ``alpha = A' A``.  The feedback learning-rate controller requires it.
    """

    batch_mean_sufficient = True
    has_closed_form_stats = True

    def __init__(self, design: NDArray, mean: NDArray, cov: NDArray):
        self.a = np.atleast_2d(np.asarray(design, dtype=float))
        self.mu = np.atleast_1d(np.asarray(mean, dtype=float))
        self.sigma = assert_spd(cov, name="cov")
        self.d_x, self.d_theta = self.a.shape
        if self.mu.shape != (self.d_x,):
            raise ValueError(
                f"mean shape {self.mu.shape} does not match design rows {self.d_x}"
            )
        if self.sigma.shape != (self.d_x, self.d_x):
            raise ValueError("cov shape does not match design rows")
        self.ata = self.a.T @ self.a
        self.at_mu = self.a.T @ self.mu
        self.sigma_sqrt = matrix_sqrt_spd(self.sigma)
        self.trace_sigma = float(np.trace(self.sigma))
        self.at_sigma_a = self.a.T @ self.sigma @ self.a
        self.isotropic_alpha = self._detect_isotropic_alpha()

    def _detect_isotropic_alpha(self) -> float | None:
        if self.d_theta == 1:
            return float(self.ata[0, 0])
        aat = self.a @ self.a.T
        alpha = float(np.trace(aat) / self.d_x)
        if alpha <= 0:
            return None
        dev = np.linalg.norm(aat - alpha * np.eye(self.d_x))
        if dev <= 1e-8 * np.linalg.norm(aat):
            return alpha
        return None

    @property
    def effective_noise_trace(self) -> float:
        """Input-noise trace as seen through the design, ``tr(A' S A)/alpha``.

        Equals ``trace(Sigma)`` exactly when ``A A' = alpha I``; for a scalar
        parameter it is the variance that actually drives the parameter
        dynamics.  Requires ``isotropic_alpha``.
        """
        if self.isotropic_alpha is None:
            raise ValueError("effective noise trace needs an isotropic design")
        return float(np.trace(self.at_sigma_a) / self.isotropic_alpha)

    def _residual(self, theta: NDArray, x: NDArray) -> NDArray:
        return np.asarray(theta, dtype=float) @ self.a.T - np.asarray(x, dtype=float)

    def loss(self, theta, x, y=None):
        r = self._residual(theta, x)
        return np.sum(np.square(r), axis=-1)

    def grad_theta(self, theta, x, y=None):
        return 2.0 * (self._residual(theta, x) @ self.a)

    def grad_x(self, theta, x, y=None):
        return -2.0 * self._residual(theta, x)

    def grad_x_theta(self, theta, x, y=None):
        lead = np.broadcast_shapes(np.shape(theta)[:-1], np.shape(x)[:-1])
        return np.broadcast_to(-2.0 * self.a.T, lead + (self.d_theta, self.d_x))

    def sample_batch(self, batch_size, stream, lead=()):
        z = stream.generator.standard_normal((*lead, batch_size, self.d_x))
        return Batch(x=self.mu + z @ self.sigma_sqrt)

    def sample_batch_mean(self, batch_size, stream, lead=()):
        z = stream.generator.standard_normal((*lead, 1, self.d_x))
        return Batch(x=self.mu + (z @ self.sigma_sqrt) / np.sqrt(batch_size))

    def antithetic_batch(self, batch):
        return Batch(x=2.0 * self.mu - batch.x)

    # -- closed-form statistics ------------------------------------------

    def fit_gap(self, theta: NDArray) -> NDArray:
        """``A theta - mu``, the mean residual."""
        return np.asarray(theta, dtype=float) @ self.a.T - self.mu

    def expected_loss(self, theta: NDArray) -> NDArray:
        gap = self.fit_gap(theta)
        return np.sum(np.square(gap), axis=-1) + self.trace_sigma

    def centered_expected_loss(self, theta: NDArray) -> NDArray:
        """Expected loss with the irreducible noise floor removed."""
        gap = self.fit_gap(theta)
        return np.sum(np.square(gap), axis=-1)

    def grad_expected_loss(self, theta: NDArray) -> NDArray:
        return 2.0 * (self.fit_gap(theta) @ self.a)

    def grad_sq_norm_mean_input_grad(self, theta: NDArray) -> NDArray:
        return 8.0 * (self.fit_gap(theta) @ self.a)

    def grad_mean_sq_input_grad(self, theta: NDArray) -> NDArray:
        return 8.0 * (self.fit_gap(theta) @ self.a)

    def grad_sq_norm_grad_expected_loss(self, theta: NDArray) -> NDArray:
        return 8.0 * ((self.fit_gap(theta) @ self.a) @ self.ata)

    def param_grad_cov(self) -> NDArray:
        return 4.0 * self.at_sigma_a

    def param_grad_cov_sqrt(self) -> NDArray:
        return 2.0 * matrix_sqrt_spd(self.at_sigma_a)

    def statistics(self, theta, inner_steps, beta, *, n_mc=20_000, stream=None):
        theta = np.asarray(theta, dtype=float)
        gap = self.fit_gap(theta)
        gap_sq = float(gap @ gap)
        g = gap_sq + self.trace_sigma
        mean_gx = -2.0 * gap
        mean_sq = 4.0 * (gap_sq + self.trace_sigma)
        effective = g + (inner_steps / beta) * 4.0 * self.trace_sigma
        return ModelStatistics(
            expected_loss=g,
            mean_input_grad=mean_gx,
            mean_sq_input_grad=mean_sq,
            param_grad_cov=self.param_grad_cov(),
            effective_objective=effective,
        )


class LogisticModel(LossModel):
    """Logistic log-loss with a fixed intercept over a two-class Gaussian
    mixture.

    Labels are Bernoulli(``class_prob``); inputs are ``N(mean0, cov0)`` under
    label 0 and ``N(mean1, cov1)`` under label 1.  Only the weight vector is
    trained; the intercept stays fixed, which pins the decision boundary's
    distance from the origin to ``|bias| / |theta|``.
    """

    batch_mean_sufficient = False
    has_closed_form_stats = False

    def __init__(
        self,
        class_prob: float,
        mean0: NDArray,
        mean1: NDArray,
        cov0: NDArray,
        cov1: NDArray,
        bias: float,
    ):
        if not (0.0 < class_prob < 1.0):
            raise ValueError(f"class_prob must lie in (0, 1), got {class_prob}")
        self.class_prob = float(class_prob)
        self.mean0 = np.atleast_1d(np.asarray(mean0, dtype=float))
        self.mean1 = np.atleast_1d(np.asarray(mean1, dtype=float))
        if self.mean0.shape != self.mean1.shape:
            raise ValueError("class means must share a dimension")
        self.cov0 = assert_spd(cov0, name="cov0")
        self.cov1 = assert_spd(cov1, name="cov1")
        self.cov0_sqrt = matrix_sqrt_spd(self.cov0)
        self.cov1_sqrt = matrix_sqrt_spd(self.cov1)
        self.bias = float(bias)
        self.d_theta = self.mean0.shape[0]
        self.d_x = self.mean0.shape[0]

    def _logit(self, theta, x):
        return self.bias + np.sum(np.asarray(theta, dtype=float) * x, axis=-1)

    def loss(self, theta, x, y=None):
        if y is None:
            raise ValueError("logistic loss requires labels")
        z = self._logit(theta, x)
        return np.logaddexp(0.0, z) - y * z

    def grad_theta(self, theta, x, y=None):
        if y is None:
            raise ValueError("logistic gradients require labels")
        z = self._logit(theta, x)
        return (_sigmoid(z) - y)[..., None] * np.asarray(x, dtype=float)

    def grad_x(self, theta, x, y=None):
        if y is None:
            raise ValueError("logistic gradients require labels")
        z = self._logit(theta, x)
        return (_sigmoid(z) - y)[..., None] * np.asarray(theta, dtype=float)

    def grad_x_theta(self, theta, x, y=None):
        if y is None:
            raise ValueError("logistic gradients require labels")
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        z = self._logit(theta, x)
        s = _sigmoid(z)
        outer = np.einsum("...i,...j->...ij", x, np.broadcast_to(theta, x.shape))
        eye = np.eye(self.d_theta)
        return s[..., None, None] * (1.0 - s)[..., None, None] * outer + (
            s - y
        )[..., None, None] * eye

    def sample_batch(self, batch_size, stream, lead=()):
        gen = stream.generator
        shape = (*lead, batch_size)
        y = (gen.random(shape) < self.class_prob).astype(float)
        z = gen.standard_normal((*shape, self.d_x))
        x0 = self.mean0 + z @ self.cov0_sqrt
        x1 = self.mean1 + z @ self.cov1_sqrt
        x = np.where(y[..., None] == 1.0, x1, x0)
        return Batch(x=x, y=y)

    def antithetic_batch(self, batch):
        if batch.y is None:
            raise ValueError("logistic batches carry labels")
        mean = np.where(batch.y[..., None] == 1.0, self.mean1, self.mean0)
        return Batch(x=2.0 * mean - batch.x, y=batch.y)

    def statistics(self, theta, inner_steps, beta, *, n_mc=20_000, stream=None):
        if stream is None:
            stream = rng_substream(_DEFAULT_MC_SEED, 0)
        theta = np.asarray(theta, dtype=float)
        batch = self.sample_batch(n_mc, stream)
        losses = self.loss(theta, batch.x, batch.y)
        gx = self.grad_x(theta, batch.x, batch.y)
        gt = self.grad_theta(theta, batch.x, batch.y)
        g = float(losses.mean())
        mean_gx = gx.mean(axis=0)
        sq = np.sum(np.square(gx), axis=-1)
        mean_sq = float(sq.mean())
        cov = np.cov(gt.T, ddof=1).reshape(self.d_theta, self.d_theta)
        effective = g + (inner_steps / beta) * (
            mean_sq - float(mean_gx @ mean_gx)
        )
        root_n = np.sqrt(n_mc)
        stderr = {
            "expected_loss": float(losses.std(ddof=1) / root_n),
            "mean_input_grad": float(
                np.linalg.norm(gx.std(axis=0, ddof=1)) / root_n
            ),
            "mean_sq_input_grad": float(sq.std(ddof=1) / root_n),
        }
        return ModelStatistics(
            expected_loss=g,
            mean_input_grad=mean_gx,
            mean_sq_input_grad=mean_sq,
            param_grad_cov=cov,
            effective_objective=effective,
            stderr=stderr,
        )

    def robustness_exact(self, theta: NDArray, *, n_nodes: int = 80) -> NDArray:
        """Deterministic robustness criterion via Gauss-Hermite quadrature.

        The squared input-gradient norm is ``(sigmoid(z) - y)^2 |theta|^2``
        with a Gaussian logit ``z`` under each class, so the expectation
        reduces to two one-dimensional integrals.  Broadcasts over leading
        axes of ``theta``; returns a float for a single parameter vector.
        """
        theta = np.asarray(theta, dtype=float)
        norm_sq = np.sum(np.square(theta), axis=-1)
        nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
        weights = weights / np.sqrt(2.0 * np.pi)
        total = np.zeros(theta.shape[:-1])
        for prob, mean, cov, label in (
            (1.0 - self.class_prob, self.mean0, self.cov0, 0.0),
            (self.class_prob, self.mean1, self.cov1, 1.0),
        ):
            loc = self.bias + theta @ mean
            scale = np.sqrt(np.maximum(_quad_form(theta, cov), 0.0))
            z = loc[..., None] + scale[..., None] * nodes
            total = total + prob * (np.square(_sigmoid(z) - label) @ weights)
        out = total * norm_sq
        return out if out.ndim else float(out)

    def accuracy(self, theta: NDArray, x: NDArray, y: NDArray) -> NDArray:
        """Clean classification accuracy at probability threshold 1/2."""
        z = self._logit(theta, x)
        pred = (z > 0.0).astype(float)
        return np.mean(pred == y, axis=-1)
