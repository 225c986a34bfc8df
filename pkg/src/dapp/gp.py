"""Squared-exponential covariance machinery and GP path diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, expit

from .core import DomainError, TimeGrid

JITTER_START = 1e-8
JITTER_MAX = 1e-4
UPCROSSING_LEVELS = (0.1, 0.5, 1.0, 2.0, 3.0, 4.0)


class NumericalError(RuntimeError):
    """A numerical routine failed (factorization, rejection cap, ...)."""


@dataclass(frozen=True)
class SEKernel:
    scale: float  # sigma_0 ** 2
    lengthscale: float

    def __post_init__(self):
        if not (self.scale > 0 and self.lengthscale > 0):
            raise DomainError("kernel scale and length-scale must be positive")


@dataclass(frozen=True)
class LengthScaleGrid:
    values: tuple

    def __post_init__(self):
        v = tuple(float(x) for x in self.values)
        if not v or any(x <= 0 for x in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise DomainError("length-scales must be positive and strictly increasing")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def index(self, ell: float) -> int:
        for i, v in enumerate(self.values):
            if math.isclose(v, ell, rel_tol=1e-9):
                return i
        raise DomainError(f"length-scale {ell} not in grid {self.values}")


def default_lengthscale_grid(T: float) -> LengthScaleGrid:
    """Length-scales ``0.16 T / N`` for ``N`` in {0.1, 0.5, 1, 2, 3, 4}, ascending."""
    if not T > 0:
        raise DomainError("horizon must be positive")
    return LengthScaleGrid(tuple(sorted(0.16 * T / n for n in UPCROSSING_LEVELS)))


def _correlation(points: np.ndarray, ell: float) -> np.ndarray:
    d = points[:, None] - points[None, :]
    return np.exp(-0.5 * (d / ell) ** 2)


def _factor_with_jitter(R: np.ndarray):
    """Cholesky of ``R + eps I`` escalating ``eps`` by 10x from 1e-8 to 1e-4."""
    eps = JITTER_START
    eye = np.eye(R.shape[0])
    while eps <= JITTER_MAX * (1 + 1e-12):
        try:
            return np.linalg.cholesky(R + eps * eye), eps
        except np.linalg.LinAlgError:
            eps *= 10.0
    cond = np.linalg.cond(R)
    raise NumericalError(
        f"covariance not positive definite after jitter {JITTER_MAX:g}; "
        f"condition number {cond:.3e}, smallest eigenvalue {np.linalg.eigvalsh(R)[0]:.3e}"
    )


def se_covariance_matrix(kernel: SEKernel, grid: TimeGrid, psi: float = 1.0) -> np.ndarray:
    """``psi * sigma0^2 * exp(-(t - t')^2 / (2 ell^2))`` on the midpoints, plus jitter.

    The jitter is relative to ``psi * sigma0^2`` and escalates until the
    matrix factorizes.
    """
    if not psi > 0:
        raise DomainError("variance multiplier must be positive")
    R = _correlation(grid.midpoints, kernel.lengthscale)
    _, eps = _factor_with_jitter(R)
    return psi * kernel.scale * (R + eps * np.eye(grid.n_bins))


class KernelBank:
    """Factorized covariances ``C_l = sigma0^2 (R_l + eps_l I)`` for every grid length-scale.

    Holds everything the samplers need repeatedly: Cholesky factors, log
    determinants, ``L^-1 1`` and ``u_l = 1' C_l^-1 1``.
    """

    def __init__(self, grid: TimeGrid, lengthscales: LengthScaleGrid, sigma0: float):
        self.grid = grid
        self.lengthscales = lengthscales
        self.sigma0 = float(sigma0)
        M, L = grid.n_bins, len(lengthscales)
        s2 = self.sigma0**2
        self.cov = np.empty((L, M, M))
        self.chol = np.empty((L, M, M))
        self.jitter = np.empty(L)
        for i, ell in enumerate(lengthscales):
            R = _correlation(grid.midpoints, ell)
            Lr, eps = _factor_with_jitter(R)
            self.cov[i] = s2 * (R + eps * np.eye(M))
            self.chol[i] = self.sigma0 * Lr
            self.jitter[i] = eps
        self.logdet = 2.0 * np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(axis=1)
        self.chol_inv = np.linalg.inv(self.chol)
        self.whitened_ones = self.chol_inv @ np.ones(M)  # L^-1 1, shape (L, M)
        self.u = np.einsum("lm,lm->l", self.whitened_ones, self.whitened_ones)
        self.prec_ones = np.einsum("lkm,lk->lm", self.chol_inv, self.whitened_ones)

    @property
    def n_bins(self) -> int:
        return self.grid.n_bins

    def quad_stats(self, eta: np.ndarray, idx):
        """Return ``(1'C^-1 1, 1'C^-1 eta, eta'C^-1 eta)`` for curves ``eta``.

        ``eta`` has shape (..., M) and ``idx`` gives each curve's length-scale
        index (broadcast against the leading axes).
        """
        idx = np.asarray(idx)
        y = np.einsum("...km,...m->...k", self.chol_inv[idx], eta)
        return (
            self.u[idx],
            np.einsum("...m,...m->...", self.whitened_ones[idx], y),
            np.einsum("...m,...m->...", y, y),
        )

    def log_normal(self, eta, idx, phi, psi):
        """``log N(eta | phi 1, psi C_idx)``, broadcasting over the leading axes."""
        u, v, w = self.quad_stats(eta, idx)
        M = self.n_bins
        quad = (w - 2.0 * phi * v + phi * phi * u) / psi
        return -0.5 * (M * math.log(2 * math.pi) + M * np.log(psi) + self.logdet[np.asarray(idx)] + quad)

    def sample(self, phi, psi, idx, rng, size=None) -> np.ndarray:
        """Draw ``eta ~ N(phi 1, psi C_idx)``; vectorized over trailing shapes."""
        idx = np.asarray(idx)
        shape = idx.shape if size is None else (size,) + idx.shape
        z = rng.standard_normal(shape + (self.n_bins,))
        dev = np.einsum("...km,...m->...k", self.chol[idx], z)
        return np.asarray(phi)[..., None] + np.sqrt(psi)[..., None] * dev


def expected_upcrossings(T: float, ell: float) -> float:
    """Expected number of up-crossings of its mean level by an SE-kernel GP path."""
    if not (T > 0 and ell > 0):
        raise DomainError("T and length-scale must be positive")
    return T / (2.0 * math.pi * ell)


def _std_normal_cdf(x: float) -> float:
    return 0.5 * float(erfc(-x / math.sqrt(2.0)))


def within_trial_deviation(psi: float, sigma0_sq: float, ell: float, T: float) -> float:
    """Expected within-trial mean squared deviation of a path about its time average."""
    if not (psi > 0 and sigma0_sq > 0 and ell > 0 and T > 0):
        raise DomainError("all arguments must be positive")
    r = ell / T
    f = 2.0 * (
        math.sqrt(2.0 * math.pi) * r * (_std_normal_cdf(1.0 / r) - 0.5)
        + r * r * math.expm1(-0.5 / (r * r))
    )
    return psi * sigma0_sq * (1.0 - f)


def sample_gp(mean: float, covariance: np.ndarray, rng, size: int | None = None) -> np.ndarray:
    """Multivariate normal draw(s) with constant mean ``mean``."""
    try:
        L = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"covariance not positive definite (condition number {np.linalg.cond(covariance):.3e})"
        ) from None
    M = covariance.shape[0]
    z = rng.standard_normal((M,) if size is None else (size, M))
    return mean + z @ L.T


def logistic_transform(eta) -> np.ndarray:
    return expit(np.asarray(eta, dtype=float))


def count_upcrossings(path, level: float) -> np.ndarray:
    """Grid up-crossings: indices ``m`` with ``path[m] < level <= path[m + 1]``.

    Works along the last axis and returns the count per path.
    """
    p = np.asarray(path, dtype=float)
    return np.sum((p[..., :-1] < level) & (p[..., 1:] >= level), axis=-1)
