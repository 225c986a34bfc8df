"""Forward simulation of dual-stimulus spike trains.

Weight-curve processes are mixtures of two component kinds:

* ``flat``: ``alpha(t) = c`` with ``c ~ U(low, high)``;
* ``sine``: ``alpha(t) = 0.01 + 0.49 (1 + sin(2 pi (a + t) / b))`` with
  period ``b ~ U(low, high)`` and shift ``a ~ U(0, b)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import BinnedDataset, DomainError, SpikeTrain, TimeGrid

EXPERIMENTS = {
    1: [
        {"kind": "flat", "weight": 0.6, "low": 0.05, "high": 0.25},
        {"kind": "flat", "weight": 0.4, "low": 0.85, "high": 0.95},
    ],
    2: [{"kind": "sine", "weight": 1.0, "low": 400.0, "high": 1000.0}],
    3: [
        {"kind": "flat", "weight": 0.5, "low": 0.4, "high": 0.7},
        {"kind": "sine", "weight": 0.5, "low": 320.0, "high": 340.0},
    ],
}

ENVELOPE_HEADROOM = 1.01


@dataclass(frozen=True)
class ExperimentSpec:
    """Simulation settings; rates in spikes/ms, times in ms."""

    experiment: int | str = 1
    lamA: float | Callable = 0.4
    lamB: float | Callable = 0.1
    n_A: int = 20
    n_B: int = 20
    n_AB: int = 20
    horizon: float = 1000.0
    seed: int = 0
    bin_width: float = 50.0
    components: tuple = field(default=None)
    exact_counts: tuple | None = None

    def __post_init__(self):
        if self.experiment not in (1, 2, 3, "custom"):
            raise DomainError(f"unknown experiment {self.experiment!r}")
        if min(self.n_A, self.n_B, self.n_AB) < 1:
            raise DomainError("trial counts must be >= 1")
        for lam in (self.lamA, self.lamB):
            if not callable(lam) and not lam > 0:
                raise DomainError("rates must be positive")
        comps = self.components
        if comps is None:
            if self.experiment == "custom":
                raise DomainError("custom experiments need weight-curve components")
            comps = EXPERIMENTS[self.experiment]
        comps = tuple(dict(c) for c in comps)
        total = sum(c["weight"] for c in comps)
        if not comps or abs(total - 1.0) > 1e-9 or any(c["kind"] not in ("flat", "sine") for c in comps):
            raise DomainError("components must be flat/sine entries with weights summing to 1")
        object.__setattr__(self, "components", comps)
        if self.exact_counts is not None:
            counts = tuple(int(k) for k in self.exact_counts)
            if len(counts) != len(comps) or sum(counts) != self.n_AB:
                raise DomainError("exact counts must give one count per component summing to n_AB")
            object.__setattr__(self, "exact_counts", counts)
        TimeGrid.from_bin_width(self.horizon, self.bin_width)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.from_bin_width(self.horizon, self.bin_width)

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        d = json.loads(Path(path).read_text())
        if "components" in d:
            d["components"] = tuple(d["components"])
        if d.get("exact_counts") is not None:
            d["exact_counts"] = tuple(d["exact_counts"])
        return cls(**d)


def sine_curve(period: float, shift: float) -> Callable:
    def alpha(t):
        return 0.01 + 0.49 * (1.0 + np.sin(2.0 * math.pi * (shift + np.asarray(t, float)) / period))
    return alpha


def flat_curve(value: float) -> Callable:
    def alpha(t):
        return np.full(np.shape(t), float(value))
    return alpha


def curve_from_truth(entry: dict) -> Callable:
    if entry["kind"] == "flat":
        return flat_curve(entry["value"])
    return sine_curve(entry["period"], entry["shift"])


def draw_component_curve(component: dict, rng) -> tuple[Callable, dict]:
    if component["kind"] == "flat":
        c = float(rng.uniform(component["low"], component["high"]))
        return flat_curve(c), {"kind": "flat", "value": c}
    b = float(rng.uniform(component["low"], component["high"]))
    a = float(rng.uniform(0.0, b))
    return sine_curve(b, a), {"kind": "sine", "period": b, "shift": a}


def experiment_weight_curve(spec: ExperimentSpec, trial_index: int, rng, component: int | None = None):
    """Draw one trial's weight curve; returns ``(alpha(t), truth record)``.

    ``component`` forces the mixture component (used for exact counts).
    """
    comps = spec.components
    if component is None:
        w = np.array([c["weight"] for c in comps])
        component = int(rng.choice(len(comps), p=w / w.sum())) if len(comps) > 1 else 0
    fn, rec = draw_component_curve(comps[component], rng)
    rec["component"] = component
    return fn, rec


def _as_rate_fn(rate) -> Callable:
    if callable(rate):
        return rate
    value = float(rate)
    return lambda t: np.full(np.shape(t), value)


def simulate_inhomogeneous_poisson(rate, horizon: float, rng, rate_max: float | None = None,
                                   trial_id="0", condition="A") -> SpikeTrain:
    """Thinning: homogeneous candidates at the envelope rate, kept w.p. ``rate(t)/rate_max``."""
    fn = _as_rate_fn(rate)
    if rate_max is None:
        probe = fn(np.linspace(0.0, horizon, 10_001))
        rate_max = float(np.max(probe)) * ENVELOPE_HEADROOM
    if rate_max <= 0:
        return SpikeTrain([], trial_id, condition, horizon)
    n = rng.poisson(rate_max * horizon)
    cand = np.sort(rng.uniform(0.0, horizon, size=n))
    lam = fn(cand)
    if np.any(lam > rate_max):
        bad = cand[np.argmax(lam > rate_max)]
        raise DomainError(f"rate exceeds envelope {rate_max} at t={bad}")
    keep = rng.random(n) * rate_max < lam
    return SpikeTrain(cand[keep], trial_id, condition, horizon)


def _component_schedule(spec: ExperimentSpec, rng):
    if spec.exact_counts is None:
        return [None] * spec.n_AB
    sched = np.repeat(np.arange(len(spec.components)), spec.exact_counts)
    return [int(k) for k in rng.permutation(sched)]


def simulate_dataset(spec: ExperimentSpec):
    """Simulate A, B and AB trials; returns ``(trains, binned dataset, truth)``."""
    root = np.random.SeedSequence(spec.seed)
    sched_seq, *streams = root.spawn(1 + spec.n_A + spec.n_B + spec.n_AB)
    schedule = _component_schedule(spec, np.random.default_rng(sched_seq))
    lamA, lamB = _as_rate_fn(spec.lamA), _as_rate_fn(spec.lamB)
    T = spec.horizon
    trains, truth_trials = [], []
    k = 0
    for cond, n, fn in (("A", spec.n_A, lamA), ("B", spec.n_B, lamB)):
        for j in range(n):
            rng = np.random.default_rng(streams[k])
            k += 1
            trains.append(simulate_inhomogeneous_poisson(fn, T, rng, trial_id=str(j + 1), condition=cond))
    for j in range(spec.n_AB):
        rng = np.random.default_rng(streams[k])
        k += 1
        alpha, rec = experiment_weight_curve(spec, j, rng, schedule[j])
        rate = (lambda a: (lambda t: a(t) * lamA(t) + (1.0 - a(t)) * lamB(t)))(alpha)
        trains.append(simulate_inhomogeneous_poisson(rate, T, rng, trial_id=str(j + 1), condition="AB"))
        rec["trial_id"] = str(j + 1)
        truth_trials.append(rec)
    truth = {
        "experiment": spec.experiment,
        "horizon": T,
        "lamA": spec.lamA if not callable(spec.lamA) else None,
        "lamB": spec.lamB if not callable(spec.lamB) else None,
        "components": list(spec.components),
        "trials": truth_trials,
    }
    data = BinnedDataset.from_trains(trains, spec.grid)
    return trains, data, truth


def truth_alpha_matrix(truth: dict, grid: TimeGrid) -> np.ndarray:
    """True weight curves evaluated at the grid midpoints, one row per AB trial."""
    return np.array([curve_from_truth(e)(grid.midpoints) for e in truth["trials"]])
