import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dapp.core import (
    BinnedDataset,
    DomainError,
    RateCurve,
    SpikeTrain,
    TimeGrid,
    bin_spike_train,
    count_normalizer,
    exact_log_likelihood,
    mixture_intensity,
    read_spike_trains,
    riemann_log_likelihood,
    write_spike_trains,
)

GRID = TimeGrid(1000.0, 20)


def test_grid_geometry():
    assert GRID.width == 50.0
    assert GRID.n_bins * GRID.width == GRID.horizon
    np.testing.assert_allclose(GRID.midpoints[:3], [25.0, 75.0, 125.0])
    assert np.all(np.diff(GRID.midpoints) > 0)


@pytest.mark.parametrize("T, M", [(0.0, 10), (-5.0, 10), (1000.0, 1), (1000.0, 2.5)])
def test_grid_rejects_bad_args(T, M):
    with pytest.raises(DomainError):
        TimeGrid(T, M)


def test_from_bin_width():
    assert TimeGrid.from_bin_width(1000, 25).n_bins == 40
    with pytest.raises(DomainError):
        TimeGrid.from_bin_width(1000, 33)


def test_binning_interval_membership():
    # (50, 100] is bin 2; (400, 450] is bin 9; (450, 500] is bin 10
    counts = bin_spike_train(SpikeTrain([100, 450, 451], "1", "A"), GRID)
    expected = np.zeros(20, dtype=int)
    expected[1] = 1
    expected[8] = 1
    expected[9] = 1
    np.testing.assert_array_equal(counts, expected)


def test_binning_empty_and_midpoints():
    np.testing.assert_array_equal(bin_spike_train(SpikeTrain([], "1", "A"), GRID), np.zeros(20))
    mids = SpikeTrain(GRID.midpoints, "1", "A")
    np.testing.assert_array_equal(bin_spike_train(mids, GRID), np.ones(20))


def test_binning_endpoints():
    counts = bin_spike_train(SpikeTrain([0.0, 1000.0], "1", "A"), GRID)
    assert counts[0] == 1 and counts[-1] == 1


def test_binning_rejects_out_of_window():
    with pytest.raises(DomainError, match="1000.5"):
        bin_spike_train(SpikeTrain([10.0, 1000.5], "1", "A"), GRID)
    with pytest.raises(DomainError):
        SpikeTrain([-1.0], "1", "A")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1000, allow_nan=False), max_size=200), st.sampled_from([2, 5, 20, 40, 100]))
def test_binning_conserves_count(times, M):
    grid = TimeGrid(1000.0, M)
    counts = bin_spike_train(SpikeTrain(times, "1", "AB"), grid)
    assert counts.sum() == len(times)
    assert np.all(counts >= 0)


def test_riemann_zero_counts():
    rate = RateCurve.constant(0.4, GRID)
    assert riemann_log_likelihood(np.zeros(20, dtype=int), rate, GRID) == pytest.approx(-400.0)


def test_riemann_single_bin_pmf():
    # a 2-bin grid with zero-rate-free second bin isolates one Poisson term
    grid = TimeGrid(2.0, 2)
    rate = RateCurve(np.array([2.0, 1e-300]))
    val = riemann_log_likelihood(np.array([3, 0]), rate, grid)
    assert val == pytest.approx(-2 + 3 * math.log(2) - math.log(6))


def test_riemann_rejects_nonpositive_rate():
    with pytest.raises(DomainError):
        riemann_log_likelihood(np.zeros(20), np.zeros(20), GRID)
    with pytest.raises(DomainError):
        RateCurve(np.zeros(20))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_riemann_additive_over_trials(seed):
    rng = np.random.default_rng(seed)
    lam = RateCurve(rng.uniform(0.05, 1.0, 20))
    X = rng.poisson(5.0, size=(4, 20))
    total = riemann_log_likelihood(X, lam, GRID)
    assert total == pytest.approx(sum(riemann_log_likelihood(x, lam, GRID) for x in X))


def test_hz_conversion():
    np.testing.assert_allclose(RateCurve.constant(400, GRID, "Hz").values, 0.4)


def test_mixture_intensity_examples():
    la, lb = RateCurve.constant(0.4, GRID), RateCurve.constant(0.1, GRID)
    np.testing.assert_allclose(mixture_intensity(np.ones(20), la, lb).values, 0.4)
    np.testing.assert_allclose(mixture_intensity(np.zeros(20), la, lb).values, 0.1)
    np.testing.assert_allclose(mixture_intensity(np.full(20, 0.5), la, lb).values, 0.25)
    with pytest.raises(DomainError):
        mixture_intensity(np.full(20, 1.2), la, lb)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=20, max_size=20), st.integers(0, 2**31 - 1))
def test_mixture_envelope(alpha, seed):
    rng = np.random.default_rng(seed)
    la, lb = RateCurve(rng.uniform(0.01, 1, 20)), RateCurve(rng.uniform(0.01, 1, 20))
    mix = mixture_intensity(np.array(alpha), la, lb).values
    lo = np.minimum(la.values, lb.values)
    hi = np.maximum(la.values, lb.values)
    assert np.all(mix >= lo - 1e-15) and np.all(mix <= hi + 1e-15)


def test_riemann_converges_to_exact():
    # smooth rate, fixed spike set; error shrinks as w is halved
    T = 1000.0
    rate = lambda t: 0.2 + 0.15 * np.sin(2 * np.pi * np.asarray(t) / 700.0)
    rng = np.random.default_rng(3)
    times = np.sort(rng.uniform(0, T, 150))
    exact = exact_log_likelihood(times, rate, T)
    errs = []
    for M in (50, 100, 200):
        grid = TimeGrid(T, M)
        X = bin_spike_train(SpikeTrain(times, "1", "A"), grid)
        approx = riemann_log_likelihood(X, RateCurve(rate(grid.midpoints)), grid) - count_normalizer(X, grid)
        errs.append(abs(approx - exact))
    assert errs[0] > errs[1] > errs[2]


def test_spike_train_file_roundtrip(tmp_path):
    trains = [SpikeTrain([1.5, 20.25], "1", "A"), SpikeTrain([], "2", "B"), SpikeTrain([999.0], "x", "AB")]
    write_spike_trains(tmp_path / "t.txt", trains, 1000.0)
    back, T = read_spike_trains(tmp_path / "t.txt")
    assert T == 1000.0 and back == trains


def test_spike_train_file_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("A,1,1.0 abc\n")
    with pytest.raises(DomainError, match="bad.txt:1"):
        read_spike_trains(p)
    p.write_text("C,1,1.0\n")
    with pytest.raises(DomainError):
        read_spike_trains(p)


def test_binned_dataset_rows_match_trains():
    rng = np.random.default_rng(0)
    trains = [SpikeTrain(rng.uniform(0, 1000, k), str(k), c) for k, c in [(5, "A"), (7, "B"), (3, "AB"), (0, "AB")]]
    ds = BinnedDataset.from_trains(trains, GRID)
    assert ds.XA.sum() == 5 and ds.XB.sum() == 7
    np.testing.assert_array_equal(ds.XAB.sum(axis=1), [3, 0])
    assert ds.trial_ids["AB"] == ("3", "0")
    with pytest.raises(DomainError):
        BinnedDataset(GRID, {"A": -np.ones((1, 20))})
