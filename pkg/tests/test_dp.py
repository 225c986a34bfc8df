import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from dapp.core import DomainError, TimeGrid
from dapp.dp import (
    ClusterTable,
    DPHyper,
    GPFeature,
    _aux_atoms,
    _log_f,
    cluster_summary,
    default_dirichlet_shapes,
    kappa_log_conditional,
    neal8_candidates,
    neal8_log_weights,
    neal8_reassign,
    neal8_sweep,
    phi_conditional,
    sample_alt_base_measure,
    sample_base_measure,
    stick_breaking_prefix,
    update_cluster_params,
    update_kappa,
    update_psi,
)
from dapp.gp import KernelBank, default_lengthscale_grid

GRID = TimeGrid(1000.0, 10)
BANK = KernelBank(GRID, default_lengthscale_grid(1000), 1.87)
L = 6


def _density_cdf(logpdf, lo, hi, n=20_001):
    x = np.linspace(lo, hi, n)
    lp = np.array([logpdf(v) for v in x])
    p = np.exp(lp - lp[np.isfinite(lp)].max())
    p[~np.isfinite(p)] = 0.0
    c = integrate.cumulative_trapezoid(p, x, initial=0.0)
    return lambda q: np.interp(q, x, c / c[-1])


def test_dirichlet_shapes_proportional_to_index():
    a = default_dirichlet_shapes(6)
    assert a.sum() == pytest.approx(2.0)
    np.testing.assert_allclose(a / a[0], np.arange(1, 7))
    with pytest.raises(DomainError):
        DPHyper(dirichlet=np.ones(5)).shapes(6)


def test_base_measure_moments():
    rng = np.random.default_rng(0)
    kappa = 2.5
    phi, psi, pi = sample_base_measure(kappa, DPHyper(), L, rng, size=100_000)
    assert stats.kstest(psi, stats.beta(1, kappa).cdf).statistic < 0.01
    np.testing.assert_allclose(pi.mean(axis=0), default_dirichlet_shapes(6) / 2, atol=0.005)
    z = phi / (1.87 * np.sqrt(1 - psi))
    assert stats.kstest(z, "norm").statistic < 0.01
    with pytest.raises(DomainError):
        sample_base_measure(0.0, DPHyper(), L, rng)


def test_alt_base_measure_length_scale_weights():
    rng = np.random.default_rng(1)
    _, _, idx = sample_alt_base_measure(1.0, DPHyper(), L, rng, size=60_000)
    np.testing.assert_allclose(np.bincount(idx, minlength=L) / 60_000, np.arange(1, 7) / 21, atol=0.01)


def test_stick_breaking_mass_accounting():
    w, (phi, psi, pi), resid = stick_breaking_prefix(1.5, DPHyper(), L, 50, np.random.default_rng(2))
    assert w.sum() + resid == pytest.approx(1.0)
    assert np.all(w > 0) and phi.shape == (50,)


def test_feature_validation():
    GPFeature(0.1, 0.5, np.full(6, 1 / 6), 80.0)
    with pytest.raises(DomainError):
        GPFeature(0.1, 1.0, np.full(6, 1 / 6), 80.0)
    with pytest.raises(DomainError):
        GPFeature(0.1, 0.5, np.full(6, 0.2), 80.0)


def test_compact_renumbers_by_first_appearance():
    t = ClusterTable(np.array([2, 2, 0]), np.array([0.0, 1.0, 2.0]), np.full(3, 0.5), np.full((3, L), 1 / L))
    t.compact()
    np.testing.assert_array_equal(t.labels, [0, 0, 1])
    np.testing.assert_allclose(t.phi, [2.0, 0.0])
    t.check()
    t.labels[0] = 5
    with pytest.raises(AssertionError):
        t.check()


def _random_state(rng, n, K):
    labels = np.concatenate([np.arange(K), rng.integers(0, K, n - K)])
    rng.shuffle(labels)
    phi, psi, pi = sample_base_measure(1.0, DPHyper(), L, rng, size=K)
    psi = np.clip(psi, 0.05, 0.95)
    table = ClusterTable(labels, phi, psi, pi)
    ell = rng.integers(0, L, n)
    eta = BANK.sample(phi[labels], psi[labels], ell, rng)
    return table, eta, ell


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 7), st.booleans())
def test_single_move_matches_direct_weights(seed, n, alt):
    """The compiled move picks the candidate implied by the directly computed weights."""
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, n + 1))
    table, eta, ell = _random_state(rng, n, K)
    if alt:
        table.atom_ell = rng.integers(0, L, K)
        table.pi = np.eye(L)[table.atom_ell]
        ell = table.atom_ell[table.labels]
    i = int(rng.integers(n))
    kappa, hyper = 1.3, DPHyper()
    before = table.copy()

    sweep_rng = np.random.default_rng(seed + 1)
    neal8_sweep(table, eta, ell, kappa, hyper, BANK, sweep_rng, alt=alt, trials=[i])

    replay = np.random.default_rng(seed + 1)
    aux = _aux_atoms(kappa, hyper, L, replay, hyper.n_aux, alt)
    u = replay.random(1)[0]
    phi, psi, pi, aell, log_s, keep = neal8_candidates(i, before, aux, kappa)
    logw = neal8_log_weights(eta[i], ell[i], phi, psi, pi, aell, log_s, BANK, alt)
    p = np.exp(logw - logw.max())
    choice = min(int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right")), p.size - 1)
    table.check()
    c = table.labels[i]
    assert table.phi[c] == pytest.approx(phi[choice])
    assert table.psi[c] == pytest.approx(psi[choice])
    # the other trials keep their atoms
    for j in range(n):
        if j != i:
            assert table.phi[table.labels[j]] == before.phi[before.labels[j]]


def test_reassign_wrapper_keeps_invariants():
    rng = np.random.default_rng(5)
    table, eta, ell = _random_state(rng, 8, 3)
    for i in range(8):
        neal8_reassign(i, table, eta[i], ell[i], 1.0, DPHyper(), BANK, rng)
        table.check()


def test_kappa_update_stationary_density():
    rng = np.random.default_rng(6)
    K, n, psis = 3, 20, np.array([0.2, 0.5, 0.7])
    k, draws = 1.0, []
    for t in range(60_000):
        k = update_kappa(K, psis, n, k, rng)
        if t >= 1000 and t % 3 == 0:
            draws.append(k)
    cdf = _density_cdf(lambda x: kappa_log_conditional(x, K, psis, n) if x > 0 else -np.inf, 1e-6, 40.0)
    assert stats.kstest(draws, cdf).statistic < 0.02


def test_psi_mh_stationary_density():
    rng = np.random.default_rng(7)
    eta = BANK.sample(np.array([0.3, 0.3]), np.array([0.4, 0.4]), np.array([2, 4]), rng)
    u, v, w, z = cluster_summary(eta, np.array([2, 4]), BANK)
    kappa, s2 = 1.5, 1.87**2
    psi, draws, acc = 0.5, [], 0
    for t in range(40_000):
        psi, ok = update_psi(psi, u, w, z, 2, GRID.n_bins, kappa, 1.87, rng)
        acc += ok
        if t >= 500 and t % 2 == 0:
            draws.append(psi)

    def log_target(p):
        # Be(1, kappa) times the phi-integrated member likelihood
        if not 0 < p < 1:
            return -np.inf
        return _log_f(p, z, u, kappa, s2) - 0.5 * (2 * GRID.n_bins - 1) * math.log(p) - 0.5 * (w - z * z * u) / p - math.log(p)

    cdf = _density_cdf(log_target, 1e-6, 1 - 1e-9)
    assert stats.kstest(draws, cdf).statistic < 0.02
    assert acc / 40_000 > 0.05


def test_phi_conditional_matches_grid_posterior():
    rng = np.random.default_rng(8)
    idx = np.array([1, 3, 3])
    eta = BANK.sample(np.full(3, -0.4), np.full(3, 0.3), idx, rng)
    u, v, w, z = cluster_summary(eta, idx, BANK)
    psi = 0.3
    m, var = phi_conditional(psi, u, v, 1.87)
    x = np.linspace(m - 10 * math.sqrt(var), m + 10 * math.sqrt(var), 4001)
    lp = stats.norm(0, 1.87 * math.sqrt(1 - psi)).logpdf(x) + np.array(
        [BANK.log_normal(eta, idx, f, psi).sum() for f in x])
    p = np.exp(lp - lp.max())
    p /= np.trapezoid(p, x)
    assert np.trapezoid(x * p, x) == pytest.approx(m, abs=1e-6)
    assert np.trapezoid((x - m) ** 2 * p, x) == pytest.approx(var, rel=1e-4)


def test_cluster_refresh_outputs():
    rng = np.random.default_rng(9)
    eta = BANK.sample(np.zeros(4), np.full(4, 0.2), np.full(4, 3), rng)
    phi, psi, pi, ok, aell = update_cluster_params(eta, np.full(4, 3), 0.5, 1.0, DPHyper(), BANK, rng)
    assert 0 < psi < 1 and pi.sum() == pytest.approx(1) and aell == -1
    phi, psi, pi, ok, aell = update_cluster_params(eta, np.full(4, 3), 0.5, 1.0, DPHyper(), BANK, rng, alt=True)
    assert 0 <= aell < L and pi[aell] == 1.0


def test_kappa_update_errors():
    with pytest.raises(DomainError):
        update_kappa(0, [], 5, 1.0, np.random.default_rng(0))
