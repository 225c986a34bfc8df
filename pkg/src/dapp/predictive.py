"""Posterior-predictive weight curves and their summary statistics.

A predictive curve for a new AB trial is drawn from each saved iteration by
the Polya urn: a fresh atom from the base measure with probability
``kappa / (kappa + n)``, otherwise an existing cluster's atom. The atom's
length-scale weights give ``ell*``, the curve is a GP draw around ``phi*``
and ``alpha* = logistic(eta*)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DomainError, TimeGrid
from .dp import DPHyper, sample_alt_base_measure, sample_base_measure
from .gp import KernelBank, LengthScaleGrid, default_lengthscale_grid, logistic_transform

N_HIST_BINS = 25
ALPHA_EPS = 1e-12


@dataclass(frozen=True)
class PredictiveDraw:
    alpha: np.ndarray
    phi: float
    psi: float
    pi: np.ndarray
    ell: float
    ell_idx: int
    new_atom: bool

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim != 1 or np.any(~(a > 0)) or np.any(~(a < 1)):
            raise DomainError("predictive curve must be a vector with values in (0, 1)")


def _urn_weights(occupancy, kappa, equal_weights=False):
    """Probabilities of (new atom, cluster 1, ..., cluster K)."""
    occ = np.asarray(occupancy, dtype=float)
    w = np.ones_like(occ) if equal_weights else occ
    p = np.concatenate([[kappa], w])
    return p / p.sum()


def _clip_alpha(eta):
    # keep the open-interval invariant when |eta| is huge
    return np.clip(logistic_transform(eta), ALPHA_EPS, 1.0 - ALPHA_EPS)


def draw_alpha_star(draw: dict, bank: KernelBank, hyper: DPHyper, rng,
                    equal_weights: bool = False, alt: bool = False) -> PredictiveDraw:
    """One predictive curve from a saved iteration (a ``ChainState.snapshot`` record).

    ``equal_weights`` gives every distinct atom the same urn weight instead of
    weighting by cluster size. ``alt`` treats atoms as owning one length-scale.
    """
    atoms = draw["atoms"]
    kappa = float(draw["kappa"])
    L = len(bank.lengthscales)
    p = _urn_weights(atoms["occupancy"], kappa, equal_weights)
    k = int(rng.choice(p.size, p=p))
    if k == 0:
        if alt:
            phi, psi, idx = sample_alt_base_measure(kappa, hyper, L, rng)
            pi = np.eye(L)[idx]
        else:
            phi, psi, pi = sample_base_measure(kappa, hyper, L, rng)
            idx = int(rng.choice(L, p=pi / pi.sum()))
    else:
        c = k - 1
        phi, psi = float(atoms["phi"][c]), float(atoms["psi"][c])
        pi = np.asarray(atoms["pi"][c], dtype=float)
        aell = atoms["ell_idx"][c]
        idx = int(aell) if alt or aell >= 0 else int(rng.choice(L, p=pi / pi.sum()))
    eta = bank.sample(phi, psi, idx, rng)
    return PredictiveDraw(_clip_alpha(eta), phi, psi, pi, float(bank.lengthscales[idx]), idx, k == 0)


def lengthscale_pmf(draw: dict, hyper: DPHyper, L: int, equal_weights: bool = False,
                    alt: bool = False) -> np.ndarray:
    """Predictive probability of each length-scale given one saved iteration.

    This is the urn mixture of the atoms' length-scale weights, i.e. the
    conditional expectation of the ``ell*`` indicator.
    """
    atoms = draw["atoms"]
    p = _urn_weights(atoms["occupancy"], float(draw["kappa"]), equal_weights)
    a = hyper.shapes(L)
    base = a / a.sum()
    if alt:
        comp = np.eye(L)[np.asarray(atoms["ell_idx"], dtype=int)]
    else:
        comp = np.asarray(atoms["pi"], dtype=float).reshape(-1, L)
    return p[0] * base + p[1:] @ comp


def predictive_draws(output, n_draws: int | None = None, rng=None, equal_weights: bool = False):
    """Predictive curves from a chain output, one per saved iteration by default.

    Asking for more draws than there are saved iterations cycles through them.
    """
    if not output.draws:
        raise DomainError("chain output has no saved iterations")
    rng = np.random.default_rng() if rng is None else rng
    cfg = output.config
    bank = KernelBank(output.grid, output.lengthscales, cfg.hyper.sigma0)
    alt = cfg.variant == "alt-dp"
    n = len(output.draws) if n_draws is None else n_draws
    return [draw_alpha_star(output.draws[i % len(output.draws)], bank, cfg.hyper, rng, equal_weights, alt)
            for i in range(n)]


def prior_predictive_draws(grid: TimeGrid, n_draws: int, rng, hyper: DPHyper | None = None,
                           lengthscales: LengthScaleGrid | None = None, kappa: float | None = None):
    """Curves drawn from the prior alone: ``kappa`` from its gamma prior, then an atom from ``G_kappa``."""
    hyper = hyper or DPHyper()
    ls = default_lengthscale_grid(grid.horizon) if lengthscales is None else lengthscales
    bank = KernelBank(grid, ls, hyper.sigma0)
    L = len(ls)
    out = []
    for _ in range(n_draws):
        k = kappa if kappa is not None else rng.gamma(hyper.kappa_shape, 1.0 / hyper.kappa_rate)
        phi, psi, pi = sample_base_measure(max(k, 1e-300), hyper, L, rng)
        idx = int(rng.choice(L, p=pi / pi.sum()))
        eta = bank.sample(phi, psi, idx, rng)
        out.append(PredictiveDraw(_clip_alpha(eta), phi, psi, pi, float(ls[idx]), idx, True))
    return out


@dataclass(frozen=True)
class PredictiveSummary:
    """Per-draw range, long-term average and up-crossing statistic with their histograms."""

    range: np.ndarray
    mean: np.ndarray
    upcrossings: np.ndarray
    support: np.ndarray
    edges: np.ndarray
    ell_pmf: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.range.size

    def histogram(self, stat: str) -> np.ndarray:
        """Raw counts over the 25 equal-width bins on [0, 1]."""
        return np.histogram(getattr(self, stat), bins=self.edges)[0]

    def upcrossing_pmf(self) -> np.ndarray:
        idx = np.searchsorted(self.support, self.upcrossings)
        return np.bincount(idx, minlength=self.support.size) / max(self.n_draws, 1)

    def mode_upcrossing(self) -> float:
        return float(self.support[np.argmax(self.upcrossing_pmf())])

    def to_dict(self) -> dict:
        d = {
            "n_draws": self.n_draws,
            "edges": self.edges.tolist(),
            "range": {"samples": self.range.tolist(), "counts": self.histogram("range").tolist()},
            "mean": {"samples": self.mean.tolist(), "counts": self.histogram("mean").tolist()},
            "upcrossings": {
                "samples": self.upcrossings.tolist(),
                "support": self.support.tolist(),
                "pmf": self.upcrossing_pmf().tolist(),
            },
        }
        if self.ell_pmf is not None:
            d["ell_pmf"] = self.ell_pmf.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictiveSummary":
        ell = d.get("ell_pmf")
        return cls(
            np.array(d["range"]["samples"], dtype=float),
            np.array(d["mean"]["samples"], dtype=float),
            np.array(d["upcrossings"]["samples"], dtype=float),
            np.array(d["upcrossings"]["support"], dtype=float),
            np.array(d["edges"], dtype=float),
            None if ell is None else np.array(ell, dtype=float),
        )

    def write(self, directory, extra: dict | None = None):
        """``summary.json`` plus one CSV per statistic for plotting."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        body = self.to_dict()
        if extra:
            body.update(extra)
        (d / "summary.json").write_text(json.dumps(body, indent=1) + "\n")
        for stat in ("range", "mean"):
            with open(d / f"{stat}_hist.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["lower", "upper", "count"])
                for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.histogram(stat)):
                    w.writerow([format(lo, ".17g"), format(hi, ".17g"), int(c)])
        with open(d / "upcrossing_pmf.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["upcrossings", "probability"])
            for s, p in zip(self.support, self.upcrossing_pmf()):
                w.writerow([format(s, ".17g"), format(p, ".17g")])


def upcrossing_support(lengthscales, horizon: float) -> np.ndarray:
    """Sorted values of ``0.16 T / ell`` over the grid, rounded to absorb float noise."""
    return np.sort(np.round(0.16 * horizon / np.asarray(list(lengthscales), dtype=float), 10))


def summarize_predictive(draws, horizon: float | None = None, lengthscales=None,
                         ell_pmf=None) -> PredictiveSummary:
    """Range, long-term average and ``0.16 T / ell*`` for each predictive draw.

    ``horizon`` defaults to 1000 ms; ``lengthscales`` fixes the up-crossing
    support (defaults to the distinct values seen).
    """
    draws = list(draws)
    if not draws:
        raise DomainError("need at least one predictive draw")
    T = 1000.0 if horizon is None else float(horizon)
    alpha = np.array([d.alpha for d in draws])
    ells = np.array([d.ell for d in draws])
    up = np.round(0.16 * T / ells, 10)
    support = upcrossing_support(ells if lengthscales is None else lengthscales, T)
    support = np.unique(np.concatenate([support, up]))
    return PredictiveSummary(
        range=alpha.max(axis=1) - alpha.min(axis=1),
        mean=alpha.mean(axis=1),
        upcrossings=up,
        support=support,
        edges=np.linspace(0.0, 1.0, N_HIST_BINS + 1),
        ell_pmf=None if ell_pmf is None else np.asarray(ell_pmf, dtype=float),
    )


def chain_lengthscale_pmf(output, equal_weights: bool = False) -> np.ndarray:
    """Average over saved iterations of the predictive length-scale probabilities."""
    if not output.draws:
        raise DomainError("chain output has no saved iterations")
    cfg = output.config
    L = len(output.lengthscales)
    alt = cfg.variant == "alt-dp"
    return np.mean([lengthscale_pmf(d, cfg.hyper, L, equal_weights, alt) for d in output.draws], axis=0)


def mc_error(distributions) -> float:
    """Largest L1 distance between one chain's category distribution and the cross-chain average."""
    rows = [np.asarray(p, dtype=float).ravel() for p in distributions]
    if not rows:
        raise DomainError("need at least one distribution")
    if len({r.size for r in rows}) != 1:
        raise DomainError("distributions must have equal length")
    P = np.vstack(rows)
    pbar = P.mean(axis=0)
    return float(np.abs(P - pbar).sum(axis=1).max())


def recovery_statistics(summary: PredictiveSummary) -> dict:
    """Histogram masses used to judge recovery of the synthetic experiments."""
    pmf = dict(zip(np.round(summary.support, 6).tolist(), summary.upcrossing_pmf().tolist()))
    return {
        "range_below_0.2": float(np.mean(summary.range < 0.2)),
        "range_below_0.25": float(np.mean(summary.range < 0.25)),
        "range_above_0.6": float(np.mean(summary.range > 0.6)),
        "mean_in_0_0.3": float(np.mean(summary.mean <= 0.3)),
        "mean_in_0.7_1": float(np.mean(summary.mean >= 0.7)),
        "upcross_mode": summary.mode_upcrossing(),
        "upcross_at_0.1": pmf.get(0.1, 0.0),
        "upcross_at_3": pmf.get(3.0, 0.0),
        "upcross_on_1_2": pmf.get(1.0, 0.0) + pmf.get(2.0, 0.0),
    }


def pool_summaries(summaries) -> PredictiveSummary:
    """Concatenate summaries; with equal draw counts the masses are seed averages."""
    summaries = list(summaries)
    if not summaries:
        raise DomainError("need at least one summary")
    cat = lambda name: np.concatenate([getattr(s, name) for s in summaries])
    return PredictiveSummary(
        cat("range"), cat("mean"), cat("upcrossings"),
        np.unique(cat("support")), summaries[0].edges,
    )


def recovery_checks(experiment: int, stats: dict) -> dict:
    """Pass/fail per recovery criterion: ``name -> {"value", "threshold", "pass"}``."""
    def ge(key, thr):
        return {"value": stats[key], "threshold": f">= {thr}", "pass": stats[key] >= thr}

    if experiment == 1:
        mode = stats["upcross_mode"]
        return {
            "range_peaked_near_zero": ge("range_below_0.2", 0.55),
            "mean_mass_near_zero": ge("mean_in_0_0.3", 0.2),
            "mean_mass_near_one": ge("mean_in_0.7_1", 0.2),
            "upcross_mode_at_0.1": {"value": mode, "threshold": "== 0.1", "pass": abs(mode - 0.1) < 1e-9},
        }
    if experiment == 2:
        return {
            "range_peaked_near_one": ge("range_above_0.6", 0.5),
            "upcross_mass_on_1_2": ge("upcross_on_1_2", 0.5),
        }
    if experiment == 3:
        return {
            "range_mass_low": ge("range_below_0.25", 0.2),
            "range_mass_high": ge("range_above_0.6", 0.2),
            "upcross_mass_at_0.1": ge("upcross_at_0.1", 0.15),
            "upcross_mass_at_3": ge("upcross_at_3", 0.15),
        }
    return {}
