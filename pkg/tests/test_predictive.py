import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dapp.core import DomainError, TimeGrid
from dapp.dp import DPHyper
from dapp.first_stage import GammaPriorTable
from dapp.gp import KernelBank, default_lengthscale_grid
from dapp.predictive import (
    PredictiveDraw,
    PredictiveSummary,
    chain_lengthscale_pmf,
    draw_alpha_star,
    lengthscale_pmf,
    mc_error,
    pool_summaries,
    predictive_draws,
    prior_predictive_draws,
    recovery_checks,
    recovery_statistics,
    summarize_predictive,
    upcrossing_support,
)
from dapp.sampler import ChainConfig, run_chain
from dapp.simulator import ExperimentSpec, simulate_dataset

GRID = TimeGrid(1000.0, 20)
LS = default_lengthscale_grid(1000)
BANK = KernelBank(GRID, LS, 1.87)
L = len(LS)


def _saved(kappa, occupancy, phi=None, psi=None):
    K = len(occupancy)
    return {
        "kappa": kappa,
        "atoms": {
            "phi": list(phi if phi is not None else np.linspace(-1, 1, K)),
            "psi": list(psi if psi is not None else np.full(K, 0.3)),
            "pi": np.full((K, L), 1 / L).tolist(),
            "ell_idx": [-1] * K,
            "occupancy": list(occupancy),
        },
    }


def _flat(c, ell_idx=0):
    return PredictiveDraw(np.full(GRID.n_bins, c), 0.0, 0.5, np.full(L, 1 / L), LS[ell_idx], ell_idx, False)


def test_large_kappa_always_new_atom():
    rng = np.random.default_rng(0)
    d = _saved(1e12, [10, 10])
    assert all(draw_alpha_star(d, BANK, DPHyper(), rng).new_atom for _ in range(200))


def test_small_kappa_reuses_single_cluster():
    rng = np.random.default_rng(1)
    d = _saved(1e-12, [20], phi=[0.7], psi=[0.4])
    for _ in range(200):
        p = draw_alpha_star(d, BANK, DPHyper(), rng)
        assert not p.new_atom and p.phi == 0.7 and p.psi == 0.4


def test_urn_weights_by_occupancy_or_equal():
    d = _saved(1.0, [3, 1])
    d["atoms"]["pi"] = np.eye(L)[[0, 5]].tolist()
    hyper = DPHyper()
    a = hyper.shapes(L) / hyper.shapes(L).sum()
    p = lengthscale_pmf(d, hyper, L)
    np.testing.assert_allclose(p, a / 5 + np.eye(L)[0] * 3 / 5 + np.eye(L)[5] / 5)
    q = lengthscale_pmf(d, hyper, L, equal_weights=True)
    np.testing.assert_allclose(q, (a + np.eye(L)[0] + np.eye(L)[5]) / 3)


def test_prior_alpha_uniform_at_one_bin():
    rng = np.random.default_rng(2)
    draws = prior_predictive_draws(TimeGrid(1000.0, 5), 20_000, rng)
    alpha = np.array([d.alpha[2] for d in draws])
    assert stats.kstest(alpha, "uniform").statistic < 0.05


def test_flat_curve_range_and_mean():
    s = summarize_predictive([_flat(0.3)])
    assert s.range[0] == 0.0 and s.mean[0] == pytest.approx(0.3)


def test_sinusoid_range():
    t = TimeGrid(1000.0, 1000).midpoints
    alpha = 0.01 + 0.49 * (1 + np.sin(2 * np.pi * (t + 0.5) / 200))
    d = PredictiveDraw(alpha, 0.0, 0.5, np.full(L, 1 / L), LS[0], 0, False)
    assert summarize_predictive([d]).range[0] == pytest.approx(0.98, abs=0.01)


def test_default_upcrossing_support():
    np.testing.assert_allclose(upcrossing_support(LS, 1000), [0.1, 0.5, 1, 2, 3, 4])
    s = summarize_predictive([_flat(0.5, i) for i in range(L)], lengthscales=LS)
    assert sorted(s.upcrossings.tolist()) == [0.1, 0.5, 1, 2, 3, 4]


def test_draw_validation():
    with pytest.raises(DomainError):
        _flat(1.0)
    with pytest.raises(DomainError):
        summarize_predictive([])


def test_mc_error_examples():
    assert mc_error([[0.2, 0.8], [0.2, 0.8], [0.2, 0.8]]) == pytest.approx(0.0, abs=1e-12)
    assert mc_error([[1, 0], [0, 1]]) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        mc_error([[1, 0], [0.5, 0.25, 0.25]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_summary_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    draws = prior_predictive_draws(GRID, n, rng)
    perm = rng.permutation(n)
    a = summarize_predictive(draws, lengthscales=LS)
    b = summarize_predictive([draws[i] for i in perm], lengthscales=LS)
    for stat in ("range", "mean"):
        np.testing.assert_array_equal(a.histogram(stat), b.histogram(stat))
        np.testing.assert_array_equal(np.sort(getattr(a, stat)), np.sort(getattr(b, stat)))
    np.testing.assert_array_equal(a.upcrossing_pmf(), b.upcrossing_pmf())
    assert np.all((a.range >= 0) & (a.range < 1)) and np.all((a.mean > 0) & (a.mean < 1))


@pytest.fixture(scope="module")
def small_chain():
    spec = ExperimentSpec(experiment=3, seed=1, n_AB=6, bin_width=100)
    _, data, _ = simulate_dataset(spec)
    prior = GammaPriorTable(np.full(10, 20.0), np.full(10, 50.0), np.full(10, 20.0), np.full(10, 200.0))
    return run_chain(data, ChainConfig(iterations=300, burnin=100, n_save=100, seed=3), prior)


def test_new_atom_fraction_matches_urn(small_chain):
    rng = np.random.default_rng(4)
    n = len(small_chain.draws[0]["labels"])
    draws = predictive_draws(small_chain, 20_000, rng)
    k = np.array([d["kappa"] for d in small_chain.draws])
    p = np.mean(k / (k + n))
    hits = sum(d.new_atom for d in draws)
    assert stats.binomtest(hits, len(draws), p).pvalue > 1e-3
    for d in draws[:50]:
        assert d.alpha.shape == (10,) and d.ell in list(small_chain.lengthscales)


def test_chain_lengthscale_pmf_is_distribution(small_chain):
    p = chain_lengthscale_pmf(small_chain)
    assert p.shape == (L,) and p.sum() == pytest.approx(1.0) and np.all(p >= 0)


def test_summary_write_read_roundtrip(tmp_path):
    s = summarize_predictive(prior_predictive_draws(GRID, 50, np.random.default_rng(5)), lengthscales=LS,
                             ell_pmf=np.full(L, 1 / L))
    s.write(tmp_path, extra={"mc_error": 0.1})
    body = json.loads((tmp_path / "summary.json").read_text())
    back = PredictiveSummary.from_dict(body)
    for f in ("range", "mean", "upcrossings", "support", "edges", "ell_pmf"):
        np.testing.assert_array_equal(getattr(back, f), getattr(s, f))
    assert body["mc_error"] == 0.1
    rows = (tmp_path / "range_hist.csv").read_text().splitlines()
    assert rows[0] == "lower,upper,count" and len(rows) == 26
    assert sum(int(r.split(",")[2]) for r in rows[1:]) == 50


def test_pooled_statistics_average_fractions():
    a = summarize_predictive([_flat(0.1)] * 4, lengthscales=LS)
    b = summarize_predictive([_flat(0.9, 3)] * 4, lengthscales=LS)
    st_ = recovery_statistics(pool_summaries([a, b]))
    assert st_["mean_in_0_0.3"] == 0.5 and st_["mean_in_0.7_1"] == 0.5
    assert st_["range_below_0.2"] == 1.0
    checks = recovery_checks(1, st_)
    assert checks["mean_mass_near_zero"]["pass"] and checks["range_peaked_near_zero"]["pass"]
    assert set(recovery_checks(3, st_)) == {"range_mass_low", "range_mass_high",
                                           "upcross_mass_at_0.1", "upcross_mass_at_3"}
