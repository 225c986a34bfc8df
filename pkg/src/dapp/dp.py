"""Dirichlet-process machinery for the weight-curve features.

Atoms are ``(phi, psi, pi)`` drawn from the kappa-dependent base measure::

    pi ~ Dir(a_1..a_L),  psi | kappa ~ Be(1, kappa),  phi | psi ~ N(0, sigma0^2 (1 - psi))

In the alternative (hard-coupled) variant an atom carries a length-scale
index instead of ``pi``; it is stored as the one-hot ``pi`` of that index so
both variants share one table layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.special import gammaln, logsumexp

from .core import DomainError
from .gp import KernelBank

PSI_EPS = 1e-12


def default_dirichlet_shapes(L: int, total: float = 2.0) -> np.ndarray:
    a = np.arange(1, L + 1, dtype=float)
    return total * a / a.sum()


@dataclass
class DPHyper:
    sigma0: float = 1.87
    dirichlet: np.ndarray | None = None
    kappa_shape: float = 1.0
    kappa_rate: float = 1.0
    n_aux: int = 5

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise DomainError("sigma0 must be positive")
        if self.n_aux < 1:
            raise DomainError("auxiliary sample size must be >= 1")
        if self.dirichlet is not None:
            self.dirichlet = np.asarray(self.dirichlet, dtype=float)
            if np.any(self.dirichlet <= 0):
                raise DomainError("Dirichlet shapes must be positive")

    def shapes(self, L: int) -> np.ndarray:
        if self.dirichlet is None:
            return default_dirichlet_shapes(L)
        if self.dirichlet.shape != (L,):
            raise DomainError(f"need {L} Dirichlet shapes, got {self.dirichlet.shape}")
        return self.dirichlet


@dataclass(frozen=True)
class GPFeature:
    phi: float
    psi: float
    pi: np.ndarray
    ell: float

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        if not 0 < self.psi < 1:
            raise DomainError(f"psi must lie in (0, 1), got {self.psi}")
        if np.any(pi < 0) or abs(pi.sum() - 1) > 1e-12:
            raise DomainError("pi must be a probability vector")
        object.__setattr__(self, "pi", pi)


@dataclass
class ClusterTable:
    """Cluster labels for the AB trials and the atoms they point at.

    ``atom_ell`` is only used by the hard-coupled variant (-1 otherwise).
    """

    labels: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    pi: np.ndarray
    atom_ell: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.phi = np.asarray(self.phi, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float)
        self.pi = np.atleast_2d(np.asarray(self.pi, dtype=float))
        if self.atom_ell is None:
            self.atom_ell = np.full(self.phi.shape[0], -1, dtype=np.int64)
        self.atom_ell = np.asarray(self.atom_ell, dtype=np.int64)

    @property
    def K(self) -> int:
        return self.phi.shape[0]

    @property
    def occupancy(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)

    def copy(self) -> "ClusterTable":
        return ClusterTable(
            self.labels.copy(), self.phi.copy(), self.psi.copy(), self.pi.copy(), self.atom_ell.copy()
        )

    def check(self):
        occ = self.occupancy
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise AssertionError("label points at a missing atom")
        if np.any(occ == 0):
            raise AssertionError("empty atom retained")
        if occ.sum() != self.labels.size:
            raise AssertionError("occupancies do not sum to the number of trials")

    def compact(self) -> "ClusterTable":
        """Drop empty atoms and renumber labels by order of first appearance."""
        _, first, inv = np.unique(self.labels, return_index=True, return_inverse=True)
        order = np.argsort(first)
        old = np.unique(self.labels)[order]
        remap = np.empty(order.size, dtype=np.int64)
        remap[order] = np.arange(order.size)
        self.labels = remap[inv.ravel()]
        self.phi = self.phi[old]
        self.psi = self.psi[old]
        self.pi = self.pi[old]
        self.atom_ell = self.atom_ell[old]
        return self

    def features(self, j: int) -> tuple[float, float, np.ndarray]:
        c = self.labels[j]
        return self.phi[c], self.psi[c], self.pi[c]


def _clamp_psi(psi):
    return np.clip(psi, PSI_EPS, 1.0 - PSI_EPS)


def sample_base_measure(kappa: float, hyper: DPHyper, L: int, rng, size: int | None = None):
    """Draw ``(phi*, psi*, pi*)`` from the base measure ``G_kappa``."""
    if not kappa > 0:
        raise DomainError("kappa must be positive")
    n = 1 if size is None else size
    pi = rng.dirichlet(hyper.shapes(L), size=n)
    psi = _clamp_psi(rng.beta(1.0, kappa, size=n))
    phi = rng.normal(0.0, hyper.sigma0 * np.sqrt(1.0 - psi))
    if size is None:
        return float(phi[0]), float(psi[0]), pi[0]
    return phi, psi, pi


def sample_alt_base_measure(kappa: float, hyper: DPHyper, L: int, rng, size: int | None = None):
    """Base measure of the hard-coupled variant: ``(phi*, psi*, ell index)``."""
    if not kappa > 0:
        raise DomainError("kappa must be positive")
    n = 1 if size is None else size
    a = hyper.shapes(L)
    idx = rng.choice(L, size=n, p=a / a.sum())
    psi = _clamp_psi(rng.beta(1.0, kappa, size=n))
    phi = rng.normal(0.0, hyper.sigma0 * np.sqrt(1.0 - psi))
    if size is None:
        return float(phi[0]), float(psi[0]), int(idx[0])
    return phi, psi, idx


def stick_breaking_prefix(kappa: float, hyper: DPHyper, L: int, H: int, rng):
    """First ``H`` stick-breaking weights and atoms of a ``DP(kappa G_kappa)`` draw.

    Returns ``(weights, (phi, psi, pi), residual)`` where ``residual`` is the
    unassigned stick mass ``prod_h (1 - beta_h)``.
    """
    if H < 1:
        raise DomainError("truncation must be >= 1")
    beta = rng.beta(1.0, kappa, size=H)
    log_remaining = np.concatenate([[0.0], np.cumsum(np.log1p(-beta))])
    weights = beta * np.exp(log_remaining[:-1])
    atoms = sample_base_measure(kappa, hyper, L, rng, size=H)
    return weights, atoms, float(np.exp(log_remaining[-1]))


def _aux_atoms(kappa, hyper: DPHyper, L, rng, size, alt):
    if alt:
        phi, psi, idx = sample_alt_base_measure(kappa, hyper, L, rng, size=size)
        return phi, psi, np.eye(L)[idx], np.asarray(idx, dtype=np.int64)
    phi, psi, pi = sample_base_measure(kappa, hyper, L, rng, size=size)
    return phi, psi, pi, np.full(size, -1, dtype=np.int64)


def neal8_candidates(i, table: ClusterTable, aux, kappa):
    """Candidate atoms for trial ``i`` in one Algorithm-8 step.

    ``aux`` holds ``r`` auxiliary atoms ``(phi, psi, pi, ell)`` drawn from the
    base measure. Returns ``(phi, psi, pi, atom_ell, log_s, keep)`` where the
    first ``len(keep)`` entries are the clusters of the other trials (``keep``
    holds their table indices) followed by the auxiliary atoms, the first of
    which is replaced by trial ``i``'s own atom when it was a singleton.
    """
    aphi, apsi, api, aell = (np.array(a, copy=True) for a in aux)
    r = aphi.size
    occ = table.occupancy.astype(float)
    ci = table.labels[i]
    occ[ci] -= 1.0
    keep = np.flatnonzero(occ > 0)
    if occ[ci] == 0:
        aphi[0], apsi[0], api[0], aell[0] = table.phi[ci], table.psi[ci], table.pi[ci], table.atom_ell[ci]
    return (
        np.concatenate([table.phi[keep], aphi]),
        np.concatenate([table.psi[keep], apsi]),
        np.concatenate([table.pi[keep], api]),
        np.concatenate([table.atom_ell[keep], aell]),
        np.concatenate([np.log(occ[keep]), np.full(r, math.log(kappa / r))]),
        keep,
    )


def neal8_log_weights(eta_i, ell_i, phi, psi, pi, atom_ell, log_s, bank: KernelBank, alt=False):
    """Unnormalized log reassignment weights, evaluated directly per candidate.

    ``log s_c + log pi_c(ell_i) + log N(eta_i | phi_c 1, psi_c C)`` with ``C``
    the covariance of ``ell_i`` (or of the candidate's own length-scale in the
    hard-coupled variant, which has no ``pi`` term).
    """
    eta = np.broadcast_to(eta_i, (phi.size, np.size(eta_i)))
    if alt:
        return log_s + bank.log_normal(eta, atom_ell, phi, psi)
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi[:, ell_i])
    return log_s + log_pi + bank.log_normal(eta, np.full(phi.size, ell_i), phi, psi)


@nb.njit(cache=True)
def _reassign_one(i, labels, counts, K, phi, psi, pi, atom_ell, ell_idx,
                  qa, qb, u, logdet, M, aphi, apsi, api, aell, log_kr, unif, alt, logw):
    """Algorithm-8 move of trial ``i``; atoms live in the first ``K`` slots.

    ``qa[i, l]`` and ``qb[i, l]`` are ``eta_i' C_l^-1 eta_i`` and
    ``1' C_l^-1 eta_i``. Returns the new ``K``.
    """
    r = aphi.shape[0]
    ci = labels[i]
    counts[ci] -= 1
    singleton = counts[ci] == 0
    if singleton:
        aphi[0] = phi[ci]
        apsi[0] = psi[ci]
        api[0, :] = pi[ci, :]
        aell[0] = atom_ell[ci]
    li = ell_idx[i]
    c0 = 0.5 * M * math.log(2.0 * math.pi)
    n_cand = K + r
    mx = -math.inf
    for c in range(n_cand):
        if c < K:
            if counts[c] == 0:
                logw[c] = -math.inf
                continue
            f, s, l_atom, p_l = phi[c], psi[c], atom_ell[c], pi[c, li]
            ls = math.log(counts[c])
        else:
            h = c - K
            f, s, l_atom, p_l = aphi[h], apsi[h], aell[h], api[h, li]
            ls = log_kr
        l = l_atom if alt else li
        quad = (qa[i, l] - 2.0 * f * qb[i, l] + f * f * u[l]) / s
        val = ls - c0 - 0.5 * (M * math.log(s) + logdet[l] + quad)
        if not alt:
            val += math.log(p_l) if p_l > 0.0 else -math.inf
        logw[c] = val
        if val > mx:
            mx = val
    if mx == -math.inf:
        return -1
    tot = 0.0
    for c in range(n_cand):
        logw[c] = math.exp(logw[c] - mx)
        tot += logw[c]
    target = unif * tot
    choice = n_cand - 1
    acc = 0.0
    for c in range(n_cand):
        acc += logw[c]
        if target < acc:
            choice = c
            break
    if choice < K:
        labels[i] = choice
        counts[choice] += 1
        if singleton:
            # fill the vacated slot with the last atom
            last = K - 1
            if ci != last:
                phi[ci] = phi[last]
                psi[ci] = psi[last]
                pi[ci, :] = pi[last, :]
                atom_ell[ci] = atom_ell[last]
                counts[ci] = counts[last]
                for j in range(labels.shape[0]):
                    if labels[j] == last:
                        labels[j] = ci
            counts[last] = 0
            K -= 1
        return K
    h = choice - K
    slot = ci if singleton else K
    phi[slot] = aphi[h]
    psi[slot] = apsi[h]
    pi[slot, :] = api[h, :]
    atom_ell[slot] = aell[h]
    labels[i] = slot
    counts[slot] = 1
    return K if singleton else K + 1


@nb.njit(cache=True)
def _reassign_sweep(order, labels, counts, K, phi, psi, pi, atom_ell, ell_idx, qa, qb, u, logdet, M,
                    aphi, apsi, api, aell, log_kr, unif, alt):
    r = aphi.shape[1]
    logw = np.empty(labels.shape[0] + r + 1)
    for k in range(order.shape[0]):
        i = order[k]
        K = _reassign_one(i, labels, counts, K, phi, psi, pi, atom_ell, ell_idx, qa, qb, u, logdet, M,
                          aphi[k], apsi[k], api[k], aell[k], log_kr, unif[k], alt, logw)
        if K < 0:
            return -(i + 1)
        if alt:
            ell_idx[i] = atom_ell[labels[i]]
    return K


def _trial_quad_stats(eta, bank: KernelBank):
    """``eta' C_l^-1 eta`` and ``1' C_l^-1 eta`` for every trial and length-scale."""
    y = np.einsum("lkm,nm->nlk", bank.chol_inv, np.atleast_2d(eta))
    return np.einsum("nlk,nlk->nl", y, y), np.einsum("lk,nlk->nl", bank.whitened_ones, y)


def neal8_sweep(table: ClusterTable, eta, ell_idx, kappa, hyper: DPHyper, bank: KernelBank, rng,
                alt=False, trials=None):
    """Algorithm-8 updates of ``trials`` (default all, in order); mutates the table.

    Returns the length-scale indices, which change only in the hard-coupled
    variant. Auxiliary atoms for every visited trial are drawn up front; they
    are independent of the sweep's outcome so this changes nothing.
    """
    n = table.labels.size
    order = np.arange(n) if trials is None else np.atleast_1d(np.asarray(trials, dtype=np.int64))
    L = len(bank.lengthscales)
    r = hyper.n_aux
    m = order.size
    aphi, apsi, api, aell = _aux_atoms(kappa, hyper, L, rng, m * r, alt)
    unif = rng.random(m)
    cap = n + 1
    K = table.K
    phi = np.zeros(cap)
    psi = np.full(cap, 0.5)
    pi = np.full((cap, L), 1.0 / L)
    atom_ell = np.full(cap, -1, dtype=np.int64)
    counts = np.zeros(cap, dtype=np.int64)
    phi[:K], psi[:K], pi[:K], atom_ell[:K] = table.phi, table.psi, table.pi, table.atom_ell
    counts[:K] = table.occupancy
    labels = table.labels.copy()
    ell = np.asarray(ell_idx, dtype=np.int64).copy()
    qa, qb = _trial_quad_stats(eta, bank)
    K = _reassign_sweep(
        order, labels, counts, K, phi, psi, pi, atom_ell, ell, qa, qb, bank.u, bank.logdet, bank.n_bins,
        aphi.reshape(m, r), apsi.reshape(m, r), api.reshape(m, r, L), aell.reshape(m, r),
        math.log(kappa / r), unif, alt,
    )
    if K < 0:
        raise FloatingPointError(f"all reassignment weights vanish for trial {-K - 1}")
    table.labels = labels
    table.phi, table.psi, table.pi, table.atom_ell = phi[:K], psi[:K], pi[:K], atom_ell[:K]
    table.compact()
    if alt:
        ell = table.atom_ell[table.labels]
    return ell


def neal8_reassign(i, table: ClusterTable, eta_i, ell_i, kappa, hyper: DPHyper, bank: KernelBank, rng, alt=False):
    """Algorithm-8 update of trial ``i``'s cluster; mutates and returns ``table``.

    ``eta_i`` is the trial's curve and ``ell_i`` its length-scale index. In the
    hard-coupled variant the trial's length-scale follows its new atom; read
    it back from ``table.atom_ell[table.labels[i]]``.
    """
    n = table.labels.size
    eta = np.zeros((n, np.size(eta_i)))
    eta[i] = eta_i
    ell = np.zeros(n, dtype=np.int64)
    ell[i] = ell_i
    neal8_sweep(table, eta, ell, kappa, hyper, bank, rng, alt=alt, trials=[i])
    return table


def update_kappa(K, psi_stars, n_ab, kappa, rng, hyper: DPHyper | None = None) -> float:
    """Two-step auxiliary-variable Gibbs update of the DP precision."""
    hyper = hyper or DPHyper()
    if K < 1 and n_ab > 0:
        raise DomainError("need at least one cluster")
    psi = np.clip(np.asarray(psi_stars, dtype=float), 0.0, 1.0 - PSI_EPS)
    b = hyper.kappa_rate - np.sum(np.log1p(-psi))
    if n_ab > 0:
        omega = rng.beta(kappa, n_ab)
        b -= math.log(max(omega, 1e-300))
    return float(rng.gamma(2 * K + hyper.kappa_shape, 1.0 / b))


def kappa_log_conditional(kappa, K, psi_stars, n_ab, hyper: DPHyper | None = None):
    """Unnormalized log conditional density of kappa (for checking the update)."""
    hyper = hyper or DPHyper()
    kappa = np.asarray(kappa, dtype=float)
    b = hyper.kappa_rate - np.sum(np.log1p(-np.asarray(psi_stars, dtype=float)))
    out = (2 * K + hyper.kappa_shape - 1) * np.log(kappa) - b * kappa
    if n_ab > 0:
        out = out + gammaln(kappa) - gammaln(kappa + n_ab)
    return out


def cluster_summary(eta, ell_idx, bank: KernelBank):
    """``(u, v, w, z)``: summed ``1'C^-1 1``, ``1'C^-1 eta``, ``eta'C^-1 eta`` and ``v/u``."""
    u, v, w = bank.quad_stats(np.atleast_2d(eta), np.atleast_1d(ell_idx))
    u, v, w = float(u.sum()), float(v.sum()), float(w.sum())
    return u, v, w, v / u


def _log_f(psi, z, u, kappa, s2):
    # Be(psi | 2, kappa) * N(z | 0, psi/u + s2 (1 - psi)), up to a constant
    if not 0.0 < psi < 1.0:
        return -math.inf
    var = psi / u + s2 * (1.0 - psi)
    return math.log(psi) + (kappa - 1.0) * math.log1p(-psi) - 0.5 * math.log(var) - 0.5 * z * z / var


def psi_proposal_params(u, w, z, n_members, M):
    shape = 0.5 * (M * n_members - 1)
    rate = 0.5 * max(w - z * z * u, 1e-12)
    return shape, rate


def _log_lik_psi(psi, z, u, w, n_members, M, s2):
    # phi-integrated member likelihood as a function of psi
    if not 0.0 < psi < 1.0:
        return -math.inf
    var = psi / u + s2 * (1.0 - psi)
    return (-0.5 * (M * n_members - 1) * math.log(psi) - 0.5 * max(w - z * z * u, 0.0) / psi
            - 0.5 * math.log(var) - 0.5 * z * z / var)


def update_psi(psi, u, w, z, n_members, M, kappa, sigma0, rng):
    """Metropolis-Hastings refresh of ``psi*``; returns ``(psi, accepted)``.

    An independence step with the inverse-gamma proposal is followed by one
    whose proposal is the ``Be(1, kappa)`` prior. The second reaches the
    spike of the conditional at ``psi -> 1`` (for small ``kappa``) that the
    inverse-gamma proposal essentially never visits. ``accepted`` refers to
    the inverse-gamma step.
    """
    shape, rate = psi_proposal_params(u, w, z, n_members, M)
    prop = rate / rng.gamma(shape)
    s2 = sigma0 * sigma0
    log_ratio = _log_f(prop, z, u, kappa, s2) - _log_f(psi, z, u, kappa, s2)
    accepted = log_ratio >= 0 or math.log(rng.random()) < log_ratio
    if accepted:
        psi = float(np.clip(prop, PSI_EPS, 1 - PSI_EPS))
    prop = float(_clamp_psi(rng.beta(1.0, kappa)))
    log_ratio = _log_lik_psi(prop, z, u, w, n_members, M, s2) - _log_lik_psi(psi, z, u, w, n_members, M, s2)
    if log_ratio >= 0 or math.log(rng.random()) < log_ratio:
        psi = prop
    return psi, bool(accepted)


def phi_conditional(psi, u, v, sigma0):
    """Mean and variance of ``phi* | psi*``: prior ``N(0, sigma0^2 (1 - psi))`` times the members."""
    s2 = sigma0 * sigma0
    denom = psi + s2 * (1.0 - psi) * u
    return s2 * (1.0 - psi) * v / denom, s2 * psi * (1.0 - psi) / denom


def update_cluster_params(eta, ell_idx, psi_current, kappa, hyper: DPHyper, bank: KernelBank, rng, alt=False):
    """Refresh one cluster's atom given its members' curves and length-scales.

    ``eta`` is (n_c, M) and ``ell_idx`` (n_c,). Returns
    ``(phi, psi, pi, accepted, atom_ell)``; ``atom_ell`` is -1 outside the
    hard-coupled variant.
    """
    eta = np.atleast_2d(eta)
    ell_idx = np.atleast_1d(ell_idx)
    n_c, M = eta.shape
    L = len(bank.lengthscales)
    a = hyper.shapes(L)
    if alt:
        pi = None
    else:
        pi = rng.dirichlet(a + np.bincount(ell_idx, minlength=L))
    u, v, w, z = cluster_summary(eta, ell_idx, bank)
    psi, accepted = update_psi(psi_current, u, w, z, n_c, M, kappa, hyper.sigma0, rng)
    m, s2 = phi_conditional(psi, u, v, hyper.sigma0)
    phi = float(rng.normal(m, math.sqrt(s2)))
    atom_ell = -1
    if alt:
        # length-scale of the atom given (phi, psi): all members move together
        logp = np.log(a / a.sum()) + np.array(
            [bank.log_normal(eta, np.full(n_c, k), phi, psi).sum() for k in range(L)]
        )
        p = np.exp(logp - logsumexp(logp))
        atom_ell = int(rng.choice(L, p=p / p.sum()))
        pi = np.eye(L)[atom_ell]
    return phi, psi, pi, accepted, atom_ell
