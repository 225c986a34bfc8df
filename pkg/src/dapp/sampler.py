"""Gibbs sampler for the dynamic admixture model.

One iteration runs, in order: latent count imputation, the conjugate rate
refresh, the Polya-Gamma update of every trial's latent curve and
length-scale, Algorithm-8 reassignment of trial features, the precision
update and the per-cluster atom refresh.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, gammaln, logsumexp

from .core import DomainError, TimeGrid
from .dp import (
    ClusterTable,
    DPHyper,
    neal8_sweep,
    sample_alt_base_measure,
    sample_base_measure,
    update_cluster_params,
    update_kappa,
)
from .first_stage import GammaPriorTable
from .gp import KernelBank, LengthScaleGrid, default_lengthscale_grid
from .polya_gamma import sample_pg_array

log = logging.getLogger(__name__)

VARIANTS = ("dapp", "alt-dp")
_LOG2PI = math.log(2 * math.pi)


class ChainError(RuntimeError):
    """A sampler step failed; carries the iteration and a state snapshot."""

    def __init__(self, message, iteration=None, step=None, snapshot=None):
        super().__init__(message)
        self.iteration = iteration
        self.step = step
        self.snapshot = snapshot


@dataclass
class ChainConfig:
    iterations: int = 10_000
    burnin: int = 1_000
    n_save: int = 1_000
    variant: str = "dapp"
    seed: int = 0
    hyper: DPHyper = field(default_factory=DPHyper)
    lengthscales: tuple | None = None
    update_lambda: bool = True
    fixed_kappa: float | None = None
    initial_kappa: float = 1.0
    check_invariants: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"variant must be one of {VARIANTS}")
        if self.iterations < 0 or self.burnin < 0 or self.n_save < 0:
            raise DomainError("iteration counts must be nonnegative")
        if self.iterations > 0 and not self.burnin < self.iterations:
            raise DomainError("burn-in must be shorter than the chain")
        if self.n_save > self.iterations - self.burnin:
            raise DomainError("cannot save more draws than post-burn-in iterations")

    def saved_iterations(self) -> np.ndarray:
        """1-based iteration numbers kept by uniform thinning of the post-burn-in window."""
        span = self.iterations - self.burnin
        if self.n_save == 0:
            return np.zeros(0, dtype=np.int64)
        k = np.arange(1, self.n_save + 1)
        return self.burnin + (k * span) // self.n_save

    def to_dict(self) -> dict:
        d = asdict(self)
        h = d.pop("hyper")
        if h["dirichlet"] is not None:
            h["dirichlet"] = [float(x) for x in np.asarray(h["dirichlet"])]
        d["hyper"] = h
        d["lengthscales"] = None if self.lengthscales is None else list(self.lengthscales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChainConfig":
        d = dict(d)
        d["hyper"] = DPHyper(**d.get("hyper", {}))
        if d.get("lengthscales") is not None:
            d["lengthscales"] = tuple(d["lengthscales"])
        return cls(**d)


@dataclass
class ChainState:
    eta: np.ndarray
    ell_idx: np.ndarray
    table: ClusterTable
    kappa: float
    lamA: np.ndarray
    lamB: np.ndarray
    ZA: np.ndarray
    ZB: np.ndarray
    YA: np.ndarray
    YB: np.ndarray
    iteration: int = 0

    @property
    def n_trials(self) -> int:
        return self.eta.shape[0]

    def trial_features(self):
        c = self.table.labels
        return self.table.phi[c], self.table.psi[c], self.table.pi[c]

    def alpha(self) -> np.ndarray:
        return expit(self.eta)

    def check(self, X=None):
        for a in (self.YA, self.YB):
            if np.any(a < 0):
                raise AssertionError("negative latent count")
        if np.any(self.YA > self.ZA) or np.any(self.YB > self.ZB):
            raise AssertionError("thinned count exceeds its Poisson total")
        if X is not None and not np.array_equal(self.YA + self.YB, X):
            raise AssertionError("thinned counts do not add up to the data")
        self.table.check()

    def snapshot(self, bank: KernelBank) -> dict:
        """Plain-python record of every sampled parameter."""
        phi, psi, pi = self.trial_features()
        t = self.table
        return {
            "iteration": int(self.iteration),
            "kappa": float(self.kappa),
            "lamA": self.lamA.tolist(),
            "lamB": self.lamB.tolist(),
            "eta": self.eta.tolist(),
            "ell": [bank.lengthscales[i] for i in self.ell_idx],
            "ell_idx": self.ell_idx.tolist(),
            "labels": t.labels.tolist(),
            "phi": phi.tolist(),
            "psi": psi.tolist(),
            "pi": pi.tolist(),
            "atoms": {
                "phi": t.phi.tolist(),
                "psi": t.psi.tolist(),
                "pi": t.pi.tolist(),
                "ell_idx": t.atom_ell.tolist(),
                "occupancy": t.occupancy.tolist(),
            },
        }


@dataclass
class ChainOutput:
    config: ChainConfig
    grid: TimeGrid
    lengthscales: LengthScaleGrid
    draws: list
    diagnostics: dict
    prior: GammaPriorTable | None = None

    @property
    def n_trials(self) -> int:
        return len(self.draws[0]["labels"]) if self.draws else 0

    def write(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "chain": self.config.to_dict(),
            "grid": {"horizon": self.grid.horizon, "n_bins": self.grid.n_bins},
            "lengthscales": list(self.lengthscales.values),
        }
        (d / "config.json").write_text(json.dumps(meta, indent=2) + "\n")
        with open(d / "draws.jsonl", "w") as fh:
            for rec in self.draws:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
        cols = list(DIAGNOSTIC_COLUMNS)
        with open(d / "diagnostics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*(self.diagnostics[c] for c in cols)):
                w.writerow([_fmt(v) for v in row])
        if self.prior is not None:
            self.prior.to_csv(d / "prior_table.csv")

    @classmethod
    def read(cls, directory) -> "ChainOutput":
        d = Path(directory)
        meta = json.loads((d / "config.json").read_text())
        draws = []
        if (d / "draws.jsonl").exists():
            with open(d / "draws.jsonl") as fh:
                draws = [json.loads(line) for line in fh if line.strip()]
        diag = {c: [] for c in DIAGNOSTIC_COLUMNS}
        if (d / "diagnostics.csv").exists():
            with open(d / "diagnostics.csv", newline="") as fh:
                for rec in csv.DictReader(fh):
                    for c in DIAGNOSTIC_COLUMNS:
                        diag[c].append(int(rec[c]) if c in ("iteration", "K") else float(rec[c]))
        prior = GammaPriorTable.from_csv(d / "prior_table.csv") if (d / "prior_table.csv").exists() else None
        return cls(
            ChainConfig.from_dict(meta["chain"]),
            TimeGrid(**meta["grid"]),
            LengthScaleGrid(tuple(meta["lengthscales"])),
            draws,
            diag,
            prior,
        )


DIAGNOSTIC_COLUMNS = ("iteration", "K", "kappa", "acceptance_rate", "log_likelihood")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


# --- individual updates --------------------------------------------------------


def impute_latent_counts(state: ChainState, X: np.ndarray, width: float, rng) -> ChainState:
    """Draw the thinned counts ``Y`` and Poisson totals ``Z`` given the data."""
    alpha = expit(state.eta)
    la, lb = state.lamA[None, :], state.lamB[None, :]
    num = alpha * la
    p = num / (num + (1.0 - alpha) * lb)
    state.YA = rng.binomial(X, p)
    state.YB = X - state.YA
    state.ZA = state.YA + rng.poisson(width * (1.0 - alpha) * la)
    state.ZB = state.YB + rng.poisson(width * alpha * lb)
    return state


def update_lambda(state: ChainState, prior: GammaPriorTable, width: float, rng) -> ChainState:
    """Conjugate gamma refresh of both rate curves from the latent Poisson totals.

    The prior is on the spikes/ms scale; with ``Z ~ Poi(w lam)`` the posterior
    rate gains ``w`` per AB trial.
    """
    n = state.n_trials
    for cond, Z in (("A", state.ZA), ("B", state.ZB)):
        shape = getattr(prior, f"shape_{cond}") + Z.sum(axis=0)
        rate = getattr(prior, f"rate_{cond}") + width * n
        lam = rng.gamma(shape, 1.0 / rate)
        setattr(state, f"lam{cond}", np.maximum(lam, 1e-300))
    return state


def polya_gamma_pseudo_data(state: ChainState, rng):
    """PG weights ``omega`` and centered successes ``kappa = y* - N/2``."""
    N = state.ZA + state.ZB
    ystar = state.YA + state.ZB - state.YB
    kappa = ystar - 0.5 * N
    omega = sample_pg_array(N, state.eta, rng)
    return omega, kappa, N


def lengthscale_log_marginals(omega, kappa, phi, psi, bank: KernelBank, idx=None):
    """``log N(kappa/omega | phi 1, psi C_l + Omega^-1)`` on observed bins, per trial and l.

    Bins with ``omega = 0`` carry no information and are marginalized out.
    Returns ``(logml, chol_B)`` with shapes (n, L) and (n, L, M, M); when
    ``idx`` is given only that length-scale per trial is evaluated (L = 1).
    """
    n, M = omega.shape
    sw = np.sqrt(omega)
    cov = bank.cov if idx is None else bank.cov[idx][:, None]
    Bmat = psi[:, None, None, None] * cov * (sw[:, None, :, None] * sw[:, None, None, :])
    Bmat = Bmat + np.eye(M)
    LB = np.linalg.cholesky(Bmat)
    obs = omega > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(obs, kappa / np.where(obs, sw, 1.0) - sw * phi[:, None], 0.0)
    a = np.linalg.solve(LB, np.broadcast_to(r[:, None, :, None], LB.shape[:-1] + (1,)))[..., 0]
    quad = np.einsum("nlm,nlm->nl", a, a)
    logdet = 2.0 * np.log(np.diagonal(LB, axis1=2, axis2=3)).sum(axis=2)
    with np.errstate(divide="ignore"):
        log_w = np.where(obs, np.log(np.where(obs, omega, 1.0)), 0.0).sum(axis=1)
    n_obs = obs.sum(axis=1)
    logml = -0.5 * (quad + logdet) + 0.5 * log_w[:, None] - 0.5 * n_obs[:, None] * _LOG2PI
    return logml, LB, r


def draw_eta_given_lengthscale(omega, r, LB_sel, phi, psi, idx, bank: KernelBank, rng):
    """Exact draw of each trial's curve from its PG-augmented Gaussian conditional.

    Uses prior-plus-correction sampling: ``eta = phi + d0 + psi C sqrt(W) B^-1 (r - sqrt(W) d0 - e)``
    with ``d0`` a prior deviation and ``e`` standard normal, which is exact and
    stays stable when some bins have ``omega = 0``.
    """
    n, M = omega.shape
    sw = np.sqrt(omega)
    z = rng.standard_normal((n, M))
    d0 = np.sqrt(psi)[:, None] * np.einsum("nkm,nm->nk", bank.chol[idx], z)
    e = rng.standard_normal((n, M))
    rhs = r - sw * d0 - np.where(omega > 0, e, 0.0)
    y = np.linalg.solve(LB_sel, rhs[..., None])
    x = np.linalg.solve(np.swapaxes(LB_sel, 1, 2), y)[..., 0]
    corr = psi[:, None] * np.einsum("nkm,nm->nk", bank.cov[idx], sw * x)
    return phi[:, None] + d0 + corr


def update_eta_and_lengthscale(state: ChainState, bank: KernelBank, rng, alt: bool = False):
    """Polya-Gamma augmented update of every trial's ``(eta_j, ell_j)``.

    Length-scales are drawn first from their collapsed conditional (the curve
    integrated out), then the curve given the length-scale. In the
    hard-coupled variant length-scales belong to the atoms and only the curves
    are refreshed.
    """
    phi, psi, pi = state.trial_features()
    omega, kappa, _ = polya_gamma_pseudo_data(state, rng)
    if alt:
        idx = state.ell_idx
        _, LB, r = lengthscale_log_marginals(omega, kappa, phi, psi, bank, idx=idx)
        LB_sel = LB[:, 0]
    else:
        logml, LB, r = lengthscale_log_marginals(omega, kappa, phi, psi, bank)
        with np.errstate(divide="ignore"):
            logq = np.log(pi) + logml
        logq -= logsumexp(logq, axis=1, keepdims=True)
        cdf = np.cumsum(np.exp(logq), axis=1)
        u = rng.random(state.n_trials) * cdf[:, -1]
        idx = np.minimum((cdf < u[:, None]).sum(axis=1), cdf.shape[1] - 1)
        LB_sel = LB[np.arange(state.n_trials), idx]
    state.eta = draw_eta_given_lengthscale(omega, r, LB_sel, phi, psi, idx, bank, rng)
    state.ell_idx = np.asarray(idx, dtype=np.int64)
    return state.eta, state.ell_idx


def data_log_likelihood(X, eta, lamA, lamB, width) -> float:
    """Discretized Poisson log likelihood of the AB counts."""
    alpha = expit(eta)
    mu = width * (alpha * lamA[None, :] + (1.0 - alpha) * lamB[None, :])
    return float(np.sum(-mu + X * np.log(mu) - gammaln(X + 1.0)))


def log_joint(state: ChainState, X, prior: GammaPriorTable | None, hyper: DPHyper, bank: KernelBank) -> float:
    """Log joint density of data and parameters (latent counts marginalized)."""
    width = bank.grid.width
    t = state.table
    L = len(bank.lengthscales)
    a = hyper.shapes(L)
    phi, psi, pi = state.trial_features()
    out = data_log_likelihood(X, state.eta, state.lamA, state.lamB, width)
    out += float(np.sum(bank.log_normal(state.eta, state.ell_idx, phi, psi)))
    with np.errstate(divide="ignore"):
        if np.all(t.atom_ell < 0):
            out += float(np.sum(np.log(pi[np.arange(state.n_trials), state.ell_idx])))
            out += float(np.sum(gammaln(a.sum()) - gammaln(a).sum() + ((a - 1) * np.log(t.pi)).sum(axis=1)))
        else:
            out += float(np.sum(np.log(a[t.atom_ell] / a.sum())))
    k = state.kappa
    out += float(np.sum(math.log(k) + (k - 1) * np.log1p(-t.psi)))
    out += float(np.sum(-0.5 * np.log(2 * math.pi * hyper.sigma0**2 * (1 - t.psi)) - t.phi**2 / (2 * hyper.sigma0**2 * (1 - t.psi))))
    occ = t.occupancy
    out += t.K * math.log(k) + float(gammaln(k) - gammaln(k + state.n_trials) + gammaln(occ).sum())
    out += (hyper.kappa_shape - 1) * math.log(k) - hyper.kappa_rate * k
    if prior is not None:
        for cond in ("A", "B"):
            sh, rt = getattr(prior, f"shape_{cond}"), getattr(prior, f"rate_{cond}")
            lam = getattr(state, f"lam{cond}")
            out += float(np.sum(sh * np.log(rt) - gammaln(sh) + (sh - 1) * np.log(lam) - rt * lam))
    return out


# --- chain orchestration -------------------------------------------------------


class GibbsSampler:
    """Holds a chain's state and advances it one full sweep at a time."""

    def __init__(self, XAB, grid: TimeGrid, prior: GammaPriorTable | None, config: ChainConfig,
                 lam=None, rng=None):
        self.X = np.asarray(XAB, dtype=np.int64)
        self.grid = grid
        self.config = config
        self.alt = config.variant == "alt-dp"
        self.hyper = config.hyper
        ls = config.lengthscales
        self.lengthscales = default_lengthscale_grid(grid.horizon) if ls is None else LengthScaleGrid(tuple(ls))
        self.bank = KernelBank(grid, self.lengthscales, self.hyper.sigma0)
        self.prior = prior
        if prior is not None and prior.n_bins != grid.n_bins:
            raise DomainError(f"prior table has {prior.n_bins} bins, grid has {grid.n_bins}")
        if prior is None and lam is None:
            raise DomainError("need a prior table or fixed rate curves")
        self.rng = np.random.default_rng(config.seed) if rng is None else rng
        self.state = self._initial_state(lam)
        self.n_accept = 0
        self.n_proposed = 0

    def _initial_state(self, lam) -> ChainState:
        n, M = self.X.shape if self.X.ndim == 2 else (0, self.grid.n_bins)
        L = len(self.lengthscales)
        kappa = self.config.fixed_kappa or self.config.initial_kappa
        if self.alt:
            phi, psi, aidx = sample_alt_base_measure(kappa, self.hyper, L, self.rng, size=n)
            pi = np.eye(L)[aidx]
            ell = np.asarray(aidx, dtype=np.int64)
        else:
            phi, psi, pi = sample_base_measure(kappa, self.hyper, L, self.rng, size=n)
            aidx = np.full(n, -1, dtype=np.int64)
            ell = np.array([self.rng.choice(L, p=p / p.sum()) for p in pi], dtype=np.int64)
        table = ClusterTable(np.arange(n), phi, psi, pi, aidx)
        if lam is not None:
            lamA, lamB = (np.asarray(v, dtype=float).copy() for v in lam)
        else:
            lamA, lamB = self.prior.mean("A").copy(), self.prior.mean("B").copy()
        zeros = np.zeros((n, M), dtype=np.int64)
        return ChainState(np.zeros((n, M)), ell, table, float(kappa), lamA, lamB,
                          zeros, zeros.copy(), zeros.copy(), zeros.copy())

    def step(self, X=None):
        """One full sweep; ``X`` optionally replaces the AB counts first."""
        if X is not None:
            self.X = np.asarray(X, dtype=np.int64)
        s, rng, width = self.state, self.rng, self.grid.width
        check = self.config.check_invariants
        step = "impute"
        try:
            impute_latent_counts(s, self.X, width, rng)
            if check:
                s.check(self.X)
            if self.config.update_lambda and self.prior is not None:
                step = "lambda"
                update_lambda(s, self.prior, width, rng)
            step = "eta"
            update_eta_and_lengthscale(s, self.bank, rng, alt=self.alt)
            step = "reassign"
            s.ell_idx = neal8_sweep(s.table, s.eta, s.ell_idx, s.kappa, self.hyper, self.bank, rng, self.alt)
            step = "kappa"
            if self.config.fixed_kappa is None:
                s.kappa = update_kappa(s.table.K, s.table.psi, s.n_trials, s.kappa, rng, self.hyper)
            step = "atoms"
            acc = 0
            for c in range(s.table.K):
                members = np.flatnonzero(s.table.labels == c)
                phi, psi, pi, ok, aell = update_cluster_params(
                    s.eta[members], s.ell_idx[members], s.table.psi[c], s.kappa,
                    self.hyper, self.bank, rng, alt=self.alt,
                )
                s.table.phi[c], s.table.psi[c], s.table.pi[c] = phi, psi, pi
                if self.alt:
                    s.table.atom_ell[c] = aell
                    s.ell_idx[members] = aell
                acc += ok
            self.n_accept += acc
            self.n_proposed += s.table.K
            if check:
                s.check(self.X)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError, AssertionError) as exc:
            raise ChainError(
                f"iteration {s.iteration + 1}, step {step}: {exc}",
                iteration=s.iteration + 1, step=step, snapshot=s.snapshot(self.bank),
            ) from exc
        s.iteration += 1
        return acc / max(s.table.K, 1)

    def log_likelihood(self) -> float:
        s = self.state
        return data_log_likelihood(self.X, s.eta, s.lamA, s.lamB, self.grid.width)


def run_chain(data, config: ChainConfig, prior: GammaPriorTable | None = None, lam=None) -> ChainOutput:
    """Run one Markov chain on the AB trials of ``data``.

    ``prior`` is the second-stage gamma table for the rates; alternatively
    ``lam = (lamA, lamB)`` fixes the rates (with ``config.update_lambda`` off).
    """
    sampler = GibbsSampler(data.XAB, data.grid, prior, config, lam=lam)
    bank = sampler.bank
    keep = set(config.saved_iterations().tolist())
    diag = {c: [] for c in DIAGNOSTIC_COLUMNS}
    draws = []
    if config.iterations == 0:
        draws.append(sampler.state.snapshot(bank))
    for it in range(1, config.iterations + 1):
        rate = sampler.step()
        s = sampler.state
        diag["iteration"].append(it)
        diag["K"].append(s.table.K)
        diag["kappa"].append(s.kappa)
        diag["acceptance_rate"].append(rate)
        diag["log_likelihood"].append(sampler.log_likelihood())
        if it in keep:
            draws.append(s.snapshot(bank))
        if it % 1000 == 0:
            log.debug("iteration %d: K=%d kappa=%.3f", it, s.table.K, s.kappa)
    return ChainOutput(config, data.grid, sampler.lengthscales, draws, diag, prior)


def run_alt_chain(data, config: ChainConfig, prior: GammaPriorTable | None = None, lam=None) -> ChainOutput:
    """Chain for the hard-coupled prior, where each atom owns one length-scale."""
    if config.variant != "alt-dp":
        config = ChainConfig.from_dict({**config.to_dict(), "variant": "alt-dp"})
    return run_chain(data, config, prior, lam)
