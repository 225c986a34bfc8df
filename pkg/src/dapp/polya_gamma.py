"""Exact Polya-Gamma sampling.

PG(1, c) uses Devroye's alternating-series rejection sampler for the
Jacobi-type variable J*(1, c/2), with PG(1, c) = J*(1, c/2) / 4. PG(b, c) for
integer ``b`` is the sum of ``b`` independent PG(1, c) draws, except above
``LARGE_SHAPE`` where a truncated sum-of-gammas series with an analytic tail
mean is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .gp import NumericalError

TRUNC = 0.64
MAX_PROPOSALS = 10_000
LARGE_SHAPE = 170
SERIES_TERMS = 200

_PI = math.pi
_PI2 = math.pi * math.pi


@dataclass(frozen=True)
class PGParams:
    shape: int
    tilt: float = 0.0

    def __post_init__(self):
        if int(self.shape) != self.shape or self.shape < 1:
            raise ValueError(f"PG shape must be a positive integer, got {self.shape}")


@nb.njit(cache=True)
def _log_ndtr(x):
    # log Phi(x); erfc keeps precision in the lower tail
    return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))


@nb.njit(cache=True)
def _series_coef(n, x):
    k = (n + 0.5) * _PI
    if x > TRUNC:
        return k * math.exp(-0.5 * k * k * x)
    if x > 0.0:
        return math.exp(
            -1.5 * (math.log(0.5 * _PI) + math.log(x)) + math.log(k)
            - 2.0 * (n + 0.5) * (n + 0.5) / x
        )
    return 0.0


@nb.njit(cache=True)
def _mass_texpon(z):
    t = TRUNC
    fz = 0.125 * _PI2 + 0.5 * z * z
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = math.log(fz) + fz * t
    xb = x0 - z + _log_ndtr(b)
    xa = x0 + z + _log_ndtr(a)
    qdivp = 4.0 / _PI * (math.exp(xb) + math.exp(xa))
    return 1.0 / (1.0 + qdivp)


@nb.njit(cache=True)
def _rtigauss(z, rng):
    # inverse Gaussian with mean 1/z truncated to (0, TRUNC)
    t = TRUNC
    x = t + 1.0
    if 1.0 / t > z:
        alpha = 0.0
        while rng.random() > alpha:
            e1 = rng.standard_exponential()
            e2 = rng.standard_exponential()
            while e1 * e1 > 2.0 * e2 / t:
                e1 = rng.standard_exponential()
                e2 = rng.standard_exponential()
            x = 1.0 + e1 * t
            x = t / (x * x)
            alpha = math.exp(-0.5 * z * z * x)
    else:
        mu = 1.0 / z
        while x > t:
            y = rng.standard_normal()
            y *= y
            half_mu = 0.5 * mu
            mu_y = mu * y
            x = mu + half_mu * mu_y - half_mu * math.sqrt(4.0 * mu_y + mu_y * mu_y)
            if rng.random() > mu / (mu + x):
                x = mu * mu / x
    return x


@nb.njit(cache=True)
def _pg1(c, rng, counter):
    """One PG(1, c) draw; ``counter[0]`` accumulates proposals, -1 on cap."""
    z = 0.5 * abs(c)
    fz = 0.125 * _PI2 + 0.5 * z * z
    p_exp = _mass_texpon(z)
    for _ in range(MAX_PROPOSALS):
        counter[0] += 1
        if rng.random() < p_exp:
            x = TRUNC + rng.standard_exponential() / fz
        else:
            x = _rtigauss(z, rng)
        s = _series_coef(0, x)
        y = rng.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _series_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _series_coef(n, x)
                if y > s:
                    break
    counter[1] = 1
    return math.nan


@nb.njit(cache=True)
def _pg_series(b, c, rng):
    # truncated sum of gammas plus the exact mean of the omitted tail
    cc = c * c / (4.0 * _PI2)
    acc = 0.0
    trunc_mean = 0.0
    for k in range(1, SERIES_TERMS + 1):
        d = (k - 0.5) * (k - 0.5) + cc
        acc += rng.standard_gamma(b) / d
        trunc_mean += b / d
    acc /= 2.0 * _PI2
    trunc_mean /= 2.0 * _PI2
    if abs(c) < 1e-8:
        full = 0.25 * b
    else:
        full = b * math.tanh(0.5 * abs(c)) / (2.0 * abs(c))
    return acc + max(full - trunc_mean, 0.0)


@nb.njit(cache=True)
def _pg_batch(b, c, rng, out, counter):
    for i in range(b.shape[0]):
        bi = b[i]
        if bi <= 0:
            out[i] = 0.0
        elif bi > LARGE_SHAPE:
            out[i] = _pg_series(float(bi), c[i], rng)
        else:
            acc = 0.0
            for _ in range(bi):
                acc += _pg1(c[i], rng, counter)
            out[i] = acc
        if counter[1] != 0:
            return


def sample_pg_array(b, c, rng: np.random.Generator, return_proposals: bool = False):
    """Vectorized PG(b_i, c_i) draws; ``b_i = 0`` yields the point mass at 0."""
    b_arr = np.ascontiguousarray(np.asarray(b, dtype=np.int64).ravel())
    c_arr = np.ascontiguousarray(np.broadcast_to(np.asarray(c, dtype=float), np.shape(b)).ravel())
    if np.any(b_arr < 0):
        raise ValueError("PG shape must be nonnegative")
    out = np.empty(b_arr.shape[0])
    counter = np.zeros(2, dtype=np.int64)
    _pg_batch(b_arr, c_arr, rng, out, counter)
    if counter[1]:
        raise NumericalError(f"PG rejection sampler exceeded {MAX_PROPOSALS} proposals")
    out = out.reshape(np.shape(b))
    if return_proposals:
        return out, int(counter[0])
    return out


def sample_pg(params: PGParams, rng: np.random.Generator) -> float:
    """A single PG(b, c) draw."""
    return float(sample_pg_array(np.array([params.shape]), np.array([params.tilt]), rng)[0])


def pg_mean(b, c):
    c = np.abs(np.asarray(c, dtype=float))
    safe = np.where(c < 1e-8, 1.0, c)
    return np.where(c < 1e-8, 0.25 * np.asarray(b, float), b * np.tanh(0.5 * safe) / (2.0 * safe))


def pg_variance(b, c):
    """Analytic variance of PG(b, c)."""
    c = np.abs(np.asarray(c, dtype=float))
    safe = np.where(c < 1e-4, 1.0, c)
    exact = b * (np.sinh(safe) - safe) / (4.0 * safe**3 * np.cosh(0.5 * safe) ** 2)
    # series about c = 0: b (1/24 - c^2/240)
    return np.where(c < 1e-4, b * (1.0 / 24.0 - c * c / 240.0), exact)
