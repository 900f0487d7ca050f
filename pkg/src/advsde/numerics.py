"""Shared numerical utilities.

Counter-style seeded RNG substreams, random SPD matrices with a prescribed
spectrum range, symmetric matrix square roots, correlated Gaussian sampling,
and least-squares slope fits in log-log space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray


@dataclass
class RngStream:
    """Deterministic, independently seeded random stream.

    Streams are identified by a master seed plus an integer path, so any
    worker (chunk, replication, experiment phase) can re-derive its own
    stream without coordination.  Two streams built from the same
    ``(master_seed, path)`` produce bitwise-identical draws.
    """

    master_seed: int
    path: tuple[int, ...] = ()
    _generator: np.random.Generator | None = field(
        default=None, repr=False, compare=False
    )

    @property
    def generator(self) -> np.random.Generator:
        """Stateful generator for this stream (created lazily, then cached)."""
        if self._generator is None:
            seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=self.path)
            self._generator = np.random.Generator(np.random.PCG64(seq))
        return self._generator

    def child(self, *indices: int) -> "RngStream":
        """Derive an independent sub-stream by extending the path."""
        return RngStream(self.master_seed, self.path + tuple(indices))


def rng_substream(master_seed: int, index: int) -> RngStream:
    """Return the ``index``-th independent substream of ``master_seed``."""
    if index < 0:
        raise ValueError(f"substream index must be >= 0, got {index}")
    return RngStream(master_seed, (index,))


def assert_spd(matrix: NDArray, *, tol: float = 1e-10, name: str = "matrix") -> NDArray:
    """Validate that ``matrix`` is symmetric positive definite.

    Symmetry is checked to a relative tolerance; the smallest eigenvalue must
    exceed ``-tol`` times the spectral scale.  Returns the symmetrized matrix.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{name} must be square, got shape {matrix.shape}")
    scale = max(float(np.abs(matrix).max()), 1e-300)
    if np.abs(matrix - matrix.T).max() > tol * scale:
        raise ValueError(f"{name} is not symmetric within tolerance {tol}")
    sym = 0.5 * (matrix + matrix.T)
    eigvals = np.linalg.eigvalsh(sym)
    if eigvals.min() <= -tol * scale:
        raise ValueError(
            f"{name} has eigenvalue {eigvals.min():.3e} <= 0 beyond tolerance"
        )
    return sym


def spd_random(
    dim: int, eig_low: float, eig_high: float, stream: RngStream
) -> NDArray:
    """Draw a random SPD matrix with eigenvalues uniform in ``[eig_low, eig_high]``.

    The eigenbasis is Haar-distributed: a QR factorization of a Gaussian
    matrix with the R-diagonal sign correction, so the orthogonal factor is
    uniform rather than biased by LAPACK's sign convention.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not (0.0 < eig_low <= eig_high):
        raise ValueError(f"need 0 < eig_low <= eig_high, got [{eig_low}, {eig_high}]")
    gen = stream.generator
    eigvals = gen.uniform(eig_low, eig_high, size=dim)
    if dim == 1:
        return np.array([[eigvals[0]]])
    z = gen.standard_normal((dim, dim))
    q, r = np.linalg.qr(z)
    q = q * np.sign(np.diag(r))
    return (q * eigvals) @ q.T


def matrix_sqrt_spd(matrix: NDArray, *, tol: float = 1e-10) -> NDArray:
    """Symmetric square root of an SPD matrix via full eigendecomposition.

    Eigenvalues in ``[-tol*scale, 0]`` are clipped to zero; anything more
    negative is rejected.  The result S satisfies S @ S ~= matrix and S = S.T.
    """
    sym = assert_spd(matrix, tol=tol)
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def gaussian_sample(
    mean: NDArray,
    cov: NDArray | None,
    count: int,
    stream: RngStream,
    *,
    cov_sqrt: NDArray | None = None,
) -> NDArray:
    """Draw ``count`` samples from N(mean, cov), shape ``(count, dim)``.

    Either the covariance or its symmetric square root may be supplied;
    passing ``cov_sqrt`` skips the eigendecomposition on repeated calls.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if cov_sqrt is None:
        if cov is None:
            raise ValueError("provide cov or cov_sqrt")
        cov_sqrt = matrix_sqrt_spd(cov)
    z = stream.generator.standard_normal((count, mean.shape[-1]))
    return mean + z @ cov_sqrt


@dataclass(frozen=True)
class LogLogFit:
    """Least-squares line fit ``log y ~ slope * log x + intercept``."""

    slope: float
    intercept: float
    residual_norm: float
    n_points: int


def loglog_fit(x: NDArray, y: NDArray) -> LogLogFit:
    """Fit a power law ``y ~ C * x**slope`` by least squares in log space.

    Both coordinates must be strictly positive and at least two distinct
    abscissae are required.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"x and y lengths differ: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 points for a slope fit")
    if (x <= 0).any() or (y <= 0).any():
        raise ValueError("loglog_fit requires strictly positive x and y")
    lx, ly = np.log(x), np.log(y)
    if np.ptp(lx) == 0.0:
        raise ValueError("abscissae are all identical; slope is undefined")
    design = np.column_stack([lx, np.ones_like(lx)])
    coef, _, _, _ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - design @ coef
    return LogLogFit(
        slope=float(coef[0]),
        intercept=float(coef[1]),
        residual_norm=float(np.linalg.norm(resid)),
        n_points=int(x.size),
    )
