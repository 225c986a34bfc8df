"""First-stage estimation of the single-stimulus rate curves.

Each single-stimulus trial is smoothed, the cross-trial mean and variance of
the smoothed curves are taken per bin, and these are moment-matched to a
product-gamma prior on the rates (spikes/ms) for the second stage. The
product form is a working assumption; no importance-sampling correction
toward a joint prior is attempted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .core import DomainError, TimeGrid

RATE_FLOOR = 1e-4
MAX_SHAPE = 50.0
DEFAULT_BANDWIDTH_BINS = 2.0


class InsufficientDataError(ValueError):
    """Too few trials to estimate a condition's rate curve."""


@dataclass(frozen=True)
class GammaPriorTable:
    """Per-bin gamma shape/rate for the A and B rate curves (rate scale: spikes/ms)."""

    shape_A: np.ndarray
    rate_A: np.ndarray
    shape_B: np.ndarray
    rate_B: np.ndarray

    def __post_init__(self):
        for name in ("shape_A", "rate_A", "shape_B", "rate_B"):
            v = np.array(getattr(self, name), dtype=float)
            if np.any(~np.isfinite(v)) or np.any(v <= 0):
                raise DomainError(f"{name} must be finite and positive")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def n_bins(self) -> int:
        return self.shape_A.size

    def mean(self, cond: str) -> np.ndarray:
        return getattr(self, f"shape_{cond}") / getattr(self, f"rate_{cond}")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "bin", "shape", "rate"])
            for cond in ("A", "B"):
                for m, (a, b) in enumerate(zip(getattr(self, f"shape_{cond}"), getattr(self, f"rate_{cond}")), 1):
                    w.writerow([cond, m, format(a, ".17g"), format(b, ".17g")])

    @classmethod
    def from_csv(cls, path) -> "GammaPriorTable":
        rows = {"A": {}, "B": {}}
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                cond = rec["condition"].strip()
                if cond not in rows:
                    raise DomainError(f"{path}: unknown condition {cond!r}")
                rows[cond][int(rec["bin"])] = (float(rec["shape"]), float(rec["rate"]))
        out = {}
        for cond, d in rows.items():
            bins = sorted(d)
            if bins != list(range(1, len(bins) + 1)) or not bins:
                raise DomainError(f"{path}: bins for {cond} must run 1..M")
            out[f"shape_{cond}"] = [d[m][0] for m in bins]
            out[f"rate_{cond}"] = [d[m][1] for m in bins]
        table = cls(**out)
        if table.shape_A.size != table.shape_B.size:
            raise DomainError(f"{path}: A and B have different bin counts")
        return table

    def __eq__(self, other):
        if not isinstance(other, GammaPriorTable):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("shape_A", "rate_A", "shape_B", "rate_B")
        )

    __hash__ = None


def kernel_weights(n_bins: int, bandwidth: float = DEFAULT_BANDWIDTH_BINS) -> np.ndarray:
    """Row-normalized Gaussian smoothing weights on bin indices."""
    d = np.arange(n_bins)[:, None] - np.arange(n_bins)[None, :]
    k = np.exp(-0.5 * (d / bandwidth) ** 2)
    return k / k.sum(axis=1, keepdims=True)


def smooth_trial(counts, grid: TimeGrid, bandwidth: float = DEFAULT_BANDWIDTH_BINS) -> np.ndarray:
    """Gaussian-kernel local mean of the per-bin rates ``counts / w``, floored."""
    x = np.asarray(counts, dtype=float)
    if x.shape[-1] != grid.n_bins:
        raise DomainError("counts must have one entry per bin")
    rates = x / grid.width
    return np.maximum(rates @ kernel_weights(grid.n_bins, bandwidth).T, RATE_FLOOR)


def gamma_moment_match(mean: float, variance: float) -> tuple[float, float]:
    """Shape and rate of the gamma law with the given mean and variance."""
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(~(mean > 0)) or np.any(~(variance > 0)):
        raise DomainError("mean and variance must be positive")
    a, b = mean**2 / variance, mean / variance
    if a.ndim == 0:
        return float(a), float(b)
    return a, b


def estimate_stage_one(
    X, grid: TimeGrid, smoother: Callable | None = None, bandwidth: float = DEFAULT_BANDWIDTH_BINS
) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin gamma (shape, rate) for one condition's count matrix."""
    X = np.atleast_2d(np.asarray(X))
    if X.shape[0] < 2:
        raise InsufficientDataError(
            f"need at least 2 trials to estimate a rate curve, got {X.shape[0]}; "
            "supply a GammaPriorTable instead"
        )
    smooth = smoother or (lambda x, g: smooth_trial(x, g, bandwidth))
    curves = np.array([smooth(row, grid) for row in X])
    mean = curves.mean(axis=0)
    var = np.maximum(curves.var(axis=0, ddof=1), mean**2 / MAX_SHAPE)
    return gamma_moment_match(mean, var)


def build_prior_table(XA, XB, grid: TimeGrid, bandwidth: float = DEFAULT_BANDWIDTH_BINS) -> GammaPriorTable:
    aA, bA = estimate_stage_one(XA, grid, bandwidth=bandwidth)
    aB, bB = estimate_stage_one(XB, grid, bandwidth=bandwidth)
    return GammaPriorTable(aA, bA, aB, bB)

