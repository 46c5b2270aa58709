import io
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pamarctl.pamar import (
    DivergenceWarning,
    History,
    PamarModel,
    SeasonCalendar,
    forecast,
    periodic_mean,
    periodic_moments,
    replay,
    season_index,
    simulate_ensemble,
    simulate_path,
    stationary_history,
    write_ensemble_csv,
)

coef = st.floats(-0.9, 0.9, allow_nan=False)
level = st.floats(-5.0, 5.0, allow_nan=False)


def par1(mu, phi, sigma=1.0, periods=None):
    mu = np.asarray(mu, dtype=float)
    cal = SeasonCalendar(periods or (len(mu),))
    return PamarModel.build(cal, mu, phi=[list(phi)], sigma=sigma)


# calendar --------------------------------------------------------------------

@given(st.integers(2, 12), st.integers(2, 40))
def test_calendar_rejects_non_divisor(t1, T):
    if T <= t1 or T % t1 == 0:
        return
    with pytest.raises(ValueError, match="do not divide"):
        SeasonCalendar((t1, T))


def test_calendar_validation():
    with pytest.raises(ValueError):
        SeasonCalendar(())
    with pytest.raises(ValueError):
        SeasonCalendar((4, 2))
    with pytest.raises(ValueError):
        SeasonCalendar((0, 4))
    assert SeasonCalendar((2, 4, 12)).master_period == 12


@given(st.integers(0, 10_000))
def test_season_tuple_is_full(t):
    cal = SeasonCalendar((2, 6, 24))
    assert season_index(t, cal) == (t % 2, t % 6, t % 24)
    assert cal.season(t) == cal.seasons()[t % 24]


def test_season_index_rejects_negative_time():
    with pytest.raises(ValueError):
        season_index(-1, SeasonCalendar((3,)))


# model construction -------------------------------------------------------------

def test_build_broadcasts_and_freezes():
    m = PamarModel.build(SeasonCalendar((2, 4)), [1.0, 2.0, 3.0, 4.0], phi=[0.5], theta=[0.2])
    assert m.mu.shape == (4, 1) and m.phi.shape == (1, 4, 1, 1) and m.theta.shape == (2, 4, 1, 1)
    assert np.all(m.theta[0] == 1.0)
    with pytest.raises(ValueError):
        m.mu[0, 0] = 7.0


def test_build_rejects_bad_input():
    cal = SeasonCalendar((3,))
    with pytest.raises(ValueError):
        PamarModel.build(cal, [1.0, 2.0])
    with pytest.raises(ValueError):
        PamarModel.build(cal, [1.0, np.nan, 2.0])
    with pytest.raises(ValueError):
        PamarModel.build(cal, [1.0, 1.0, 1.0], sigma=-1.0)


def test_season_maps_match_phase_arrays():
    cal = SeasonCalendar((2, 4))
    mu = {s: [float(s[1])] for s in cal.seasons()}
    phi = {(1, s): [[0.1 * (1 + s[0])]] for s in cal.seasons()}
    m = PamarModel.from_season_maps(cal, mu, phi, {}, {t: [0.0] for t in range(4)}, 1.0, 1, 0)
    ref = PamarModel.build(cal, [0.0, 1.0, 2.0, 3.0], phi=[[0.1, 0.2, 0.1, 0.2]])
    np.testing.assert_array_equal(m.mu, ref.mu)
    np.testing.assert_array_equal(m.phi, ref.phi)
    with pytest.raises(ValueError, match="missing"):
        PamarModel.from_season_maps(cal, mu, {}, {}, {t: [0.0] for t in range(4)}, 1.0, 1, 0)


# simulation ------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.lists(level, min_size=3, max_size=3), st.lists(coef, min_size=3, max_size=3))
def test_periodic_mean_matches_linear_solve(mu, phi):
    # m_s = mu_s + phi_s m_{s-1} around the cycle
    T = 3
    A = np.eye(T)
    for s in range(T):
        A[s, (s - 1) % T] -= phi[s]
    oracle = np.linalg.solve(A, mu)
    got = periodic_mean(par1(mu, phi))
    np.testing.assert_allclose(got[:, 0], oracle, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_recursion_is_affine_in_innovations(seed, a):
    m = PamarModel.build(SeasonCalendar((2, 4)), [1.0, -1.0, 0.5, 2.0], phi=[0.4, -0.2],
                         theta=[0.3])
    rng = np.random.default_rng(seed)
    e1, e2 = rng.standard_normal((2, 8, 1))
    h = History(rng.standard_normal((2, 1)), rng.standard_normal((1, 1)))
    mix = replay(m, a * e1 + (1 - a) * e2, h)
    np.testing.assert_allclose(mix, a * replay(m, e1, h) + (1 - a) * replay(m, e2, h),
                               atol=1e-10)


def test_replay_reproduces_simulation():
    m = PamarModel.build(SeasonCalendar((4,)), [1.0, 2.0, 3.0, 4.0], phi=[0.5], theta=[0.1],
                         sigma=0.7)
    p = simulate_path(m, 12, stationary_history(m), seed=5, start=2)
    np.testing.assert_array_equal(replay(m, p.innovations, p.history, start=2), p.values)


def test_ensemble_is_deterministic_and_streams_differ():
    m = par1([1.0, 2.0], [0.5, 0.5])
    a = simulate_ensemble(m, 5, 4, 2, seed=9)
    b = simulate_ensemble(m, 5, 4, 2, seed=9)
    for p, q in zip(a, b):
        assert np.array_equal(p.values, q.values)
    assert not np.array_equal(a[0].values, a[1].values)
    c = simulate_ensemble(m, 5, 4, 2, seed=10)
    assert not np.array_equal(a[0].values, c[0].values)


def test_ensemble_prefix_is_stable_in_path_count():
    m = par1([1.0, 2.0], [0.5, 0.5])
    small = simulate_ensemble(m, 3, 4, 1, seed=1)
    big = simulate_ensemble(m, 7, 4, 1, seed=1)
    for p, q in zip(small, big):
        assert np.array_equal(p.values, q.values)


def test_noise_free_simulation_equals_forecast():
    m = PamarModel.build(SeasonCalendar((3,)), [1.0, 0.0, 2.0], phi=[0.3], theta=[0.5], sigma=0.0)
    h = History(np.array([[1.5]]), np.array([[0.2]]))
    p = simulate_path(m, 9, h, seed=0, start=1)
    np.testing.assert_allclose(forecast(m, h, 9, start=1), p.values, atol=1e-14)


def test_forecast_needs_enough_history():
    m = PamarModel.build(SeasonCalendar((3,)), [1.0, 0.0, 2.0], phi=[0.3, 0.1])
    with pytest.raises(ValueError):
        forecast(m, History(np.zeros((1, 1)), np.zeros((0, 1))), 3)


def test_moments_of_noise_free_ensemble_hit_the_orbit():
    m = par1([3.0, -1.0, 2.0, 0.5], [0.6, 0.2, -0.3, 0.8], sigma=0.0)
    paths = simulate_ensemble(m, 3, 8, burn_in_cycles=0, seed=0)
    st_ = periodic_moments(paths, m.calendar)
    np.testing.assert_allclose(st_.mean, periodic_mean(m), atol=1e-12)
    assert np.all(st_.counts == 6)


def test_moments_reject_ragged_and_partial_cycles():
    m = par1([1.0, 2.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        periodic_moments(simulate_ensemble(m, 2, 3, 0), m.calendar)


def test_explosive_model_warns():
    m = par1([1.0, 1.0], [1.6, 1.6])
    with pytest.warns(DivergenceWarning):
        simulate_ensemble(m, 20, 16, 0, seed=0, cold_start="zeros")


def test_stable_model_does_not_warn():
    m = par1([1.0, 1.0], [0.5, 0.5])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        simulate_ensemble(m, 20, 16, 2, seed=0)


def test_burn_in_history_is_tail_of_burn_in():
    m = par1([1.0, 2.0], [0.5, 0.5])
    (p,) = simulate_ensemble(m, 1, 2, burn_in_cycles=1, seed=3)
    full = simulate_path(m, 4, stationary_history(m), seed=3, stream=0)
    np.testing.assert_array_equal(p.history.values[-1], full.values[1])
    np.testing.assert_array_equal(p.values, full.values[2:])


def test_csv_layout():
    m = PamarModel.build(SeasonCalendar((2,)), [[1.0, 2.0], [3.0, 4.0]], sigma=0.0, dim=2)
    buf = io.StringIO()
    write_ensemble_csv(simulate_ensemble(m, 2, 2, 0), buf)
    rows = buf.getvalue().splitlines()
    assert rows[0] == "path_id,t,component,value"
    assert len(rows) == 1 + 2 * 2 * 2
    assert rows[1] == "0,0,0,1.0"
