"""Domain types, binning and the discretized Poisson likelihood.

Times are in milliseconds and rates in spikes per millisecond throughout, so
that ``w * rate`` is the expected count in a bin of width ``w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import gammaln

CONDITIONS = ("A", "B", "AB")


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TimeGrid:
    """Partition of ``[0, T]`` into ``M`` bins ``(0, w], ..., (T - w, T]``."""

    horizon: float
    n_bins: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        if int(self.n_bins) != self.n_bins or self.n_bins < 2:
            raise DomainError(f"need an integer bin count >= 2, got {self.n_bins}")
        object.__setattr__(self, "n_bins", int(self.n_bins))
        object.__setattr__(self, "horizon", float(self.horizon))

    @classmethod
    def from_bin_width(cls, horizon: float, width: float) -> "TimeGrid":
        n = horizon / width
        if width <= 0 or abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise DomainError(f"bin width {width} does not divide horizon {horizon}")
        return cls(horizon, int(round(n)))

    @property
    def width(self) -> float:
        return self.horizon / self.n_bins

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(1, self.n_bins + 1) - 0.5) * self.width


@dataclass(frozen=True)
class SpikeTrain:
    times: np.ndarray
    trial_id: str
    condition: str
    horizon: float | None = None

    def __post_init__(self):
        t = np.sort(np.asarray(self.times, dtype=float))
        if self.condition not in CONDITIONS:
            raise DomainError(f"unknown condition {self.condition!r}")
        if t.size and t[0] < 0:
            raise DomainError(f"spike time {t[0]} precedes 0")
        if self.horizon is not None and t.size and t[-1] > self.horizon:
            raise DomainError(f"spike time {t[-1]} exceeds horizon {self.horizon}")
        object.__setattr__(self, "times", _frozen(t))
        object.__setattr__(self, "trial_id", str(self.trial_id))

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, SpikeTrain):
            return NotImplemented
        return (
            self.trial_id == other.trial_id
            and self.condition == other.condition
            and np.array_equal(self.times, other.times)
        )

    __hash__ = None


@dataclass(frozen=True)
class RateCurve:
    """Rate values at the grid midpoints, in spikes/ms."""

    values: np.ndarray
    units: str = "spikes/ms"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if self.units == "Hz":
            v = v / 1000.0
        elif self.units != "spikes/ms":
            raise DomainError(f"unknown rate units {self.units!r}")
        if np.any(~(v > 0)):
            raise DomainError("rate values must be strictly positive")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "units", "spikes/ms")

    @classmethod
    def constant(cls, value: float, grid: TimeGrid, units: str = "spikes/ms"):
        return cls(np.full(grid.n_bins, float(value)), units)


@dataclass(frozen=True)
class BinnedDataset:
    grid: TimeGrid
    counts: dict = field(default_factory=dict)
    trial_ids: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = {}
        for cond in CONDITIONS:
            x = np.asarray(self.counts.get(cond, np.zeros((0, self.grid.n_bins))))
            x = x.reshape(-1, self.grid.n_bins)
            if np.any(x < 0) or np.any(x != np.round(x)):
                raise DomainError(f"counts for {cond} must be nonnegative integers")
            counts[cond] = _frozen(x, dtype=np.int64)
        ids = {
            c: tuple(self.trial_ids.get(c, [str(j) for j in range(counts[c].shape[0])]))
            for c in CONDITIONS
        }
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "trial_ids", ids)

    @property
    def XA(self) -> np.ndarray:
        return self.counts["A"]

    @property
    def XB(self) -> np.ndarray:
        return self.counts["B"]

    @property
    def XAB(self) -> np.ndarray:
        return self.counts["AB"]

    def n(self, cond: str) -> int:
        return self.counts[cond].shape[0]

    @classmethod
    def from_trains(cls, trains: Iterable[SpikeTrain], grid: TimeGrid):
        rows = {c: [] for c in CONDITIONS}
        ids = {c: [] for c in CONDITIONS}
        for tr in trains:
            rows[tr.condition].append(bin_spike_train(tr, grid))
            ids[tr.condition].append(tr.trial_id)
        counts = {
            c: np.array(rows[c], dtype=np.int64).reshape(-1, grid.n_bins)
            for c in CONDITIONS
        }
        return cls(grid, counts, ids)


def bin_spike_train(train: SpikeTrain, grid: TimeGrid) -> np.ndarray:
    """Count events per bin; bin ``m`` holds times in ``((m-1)w, mw]``.

    A spike at exactly 0 goes to the first bin and one at exactly ``T`` to
    the last.
    """
    t = train.times
    bad = t[(t < 0) | (t > grid.horizon)]
    if bad.size:
        raise DomainError(f"spike time {bad[0]} outside [0, {grid.horizon}]")
    idx = np.ceil(t / grid.width).astype(np.int64) - 1
    idx = np.clip(idx, 0, grid.n_bins - 1)
    return np.bincount(idx, minlength=grid.n_bins).astype(np.int64)


def riemann_log_likelihood(counts, rate: RateCurve, grid: TimeGrid) -> float:
    """Product-Poisson log density of bin counts with means ``w * rate``."""
    x = np.asarray(counts)
    lam = np.asarray(rate.values if isinstance(rate, RateCurve) else rate, float)
    if x.shape[-1] != grid.n_bins or lam.shape[-1] != grid.n_bins:
        raise DomainError("counts and rate must have one entry per bin")
    if np.any(~(lam > 0)):
        raise DomainError("rate values must be strictly positive")
    mu = grid.width * lam
    return float(np.sum(-mu + x * np.log(mu) - gammaln(x + 1.0)))


def count_normalizer(counts, grid: TimeGrid) -> float:
    """Rate-free part of the Riemann log likelihood, ``sum X log w - log X!``.

    Subtracting this from :func:`riemann_log_likelihood` gives the quantity
    that converges to :func:`exact_log_likelihood` as the grid is refined.
    """
    x = np.asarray(counts, dtype=float)
    return float(np.sum(x * math.log(grid.width) - gammaln(x + 1.0)))


def exact_log_likelihood(
    times: Sequence[float], rate_fn: Callable[[np.ndarray], np.ndarray], horizon: float
) -> float:
    """Continuous-time Poisson process log likelihood by adaptive quadrature."""
    t = np.asarray(times, dtype=float)
    integral, _ = integrate.quad(
        lambda s: float(rate_fn(np.array([s]))[0]), 0.0, horizon, limit=500,
        epsabs=1e-12, epsrel=1e-12,
    )
    return float(-integral + np.sum(np.log(rate_fn(t)))) if t.size else -integral


def mixture_intensity(alpha, lamA: RateCurve, lamB: RateCurve) -> RateCurve:
    """Per-bin convex combination ``alpha * lamA + (1 - alpha) * lamB``."""
    a = np.asarray(alpha, dtype=float)
    if np.any((a < 0) | (a > 1)) or np.any(np.isnan(a)):
        raise DomainError("weights must lie in [0, 1]")
    va, vb = np.asarray(lamA.values), np.asarray(lamB.values)
    if not (a.shape[-1] == va.shape[-1] == vb.shape[-1]):
        raise DomainError("weight curve and rates differ in length")
    return RateCurve(a * va + (1.0 - a) * vb)


# --- spike train text format -------------------------------------------------
#
# One trial per line: ``condition,trial_id,t1 t2 ...`` with times in ms.
# Lines starting with '#' are comments; ``# horizon=<T>`` declares T.


def write_spike_trains(path, trains: Sequence[SpikeTrain], horizon: float | None = None):
    lines = []
    if horizon is not None:
        lines.append(f"# horizon={horizon!r}")
    for tr in trains:
        times = " ".join(repr(float(t)) for t in tr.times)
        lines.append(f"{tr.condition},{tr.trial_id},{times}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_spike_trains(path) -> tuple[list[SpikeTrain], float | None]:
    """Parse the spike train text format; returns trains and declared horizon."""
    trains, horizon = [], None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("horizon="):
                horizon = float(body.split("=", 1)[1])
            continue
        parts = line.split(",", 2)
        if len(parts) < 2:
            raise DomainError(f"{path}:{lineno}: expected 'condition,trial_id,times'")
        times = parts[2].split() if len(parts) == 3 else []
        try:
            t = [float(s) for s in times]
        except ValueError as exc:
            raise DomainError(f"{path}:{lineno}: bad spike time ({exc})") from None
        trains.append(SpikeTrain(t, parts[1].strip(), parts[0].strip(), horizon))
    return trains, horizon
