import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chronosync.clock import (ClockParams, ClockState, free_phase_variance, process_noise_cov,
                              sample_process_noise, stacked_noise_cov, step_clock, system_matrices)
from chronosync.errors import InvalidTau


def test_process_noise_cov_examples():
    np.testing.assert_array_equal(process_noise_cov(ClockParams(1.0, 0.0), 1.0), [[1, 0], [0, 0]])
    np.testing.assert_allclose(process_noise_cov(ClockParams(0.0, 3.0), 1.0), [[1, 1.5], [1.5, 3]])


def test_process_noise_cov_first_cesium_clock():
    q = process_noise_cov(ClockParams(0.0289e-18, 0.0227e-24), 1.0)
    np.testing.assert_allclose(q, [[0.0289e-18 + 0.0227e-24 / 3, 0.01135e-24],
                                   [0.01135e-24, 0.0227e-24]], rtol=1e-14)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_invalid_tau(tau):
    with pytest.raises(InvalidTau):
        process_noise_cov(ClockParams(1.0, 1.0), tau)
    with pytest.raises(InvalidTau):
        system_matrices(tau)


def test_negative_variance_rejected():
    with pytest.raises(ValueError):
        ClockParams(-1.0, 0.0)


def test_step_clock_examples():
    assert step_clock(ClockState(0, 0), 0.0, (0, 0), 1.0) == ClockState(0, 0)
    assert step_clock(ClockState(0, 1e-12), 0.0, (0, 0), 1.0) == ClockState(1e-12, 1e-12)
    assert step_clock(ClockState(0, 0), 2e-13, (0, 0), 1.0) == ClockState(2e-13, 2e-13)


def test_step_clock_matches_matrices():
    a, b, _ = system_matrices(2.5)
    x, u, v = np.array([1e-9, 3e-13]), 4e-14, np.array([1e-11, -2e-14])
    nxt = step_clock(ClockState(*x), u, v, 2.5).as_array()
    np.testing.assert_allclose(nxt, a @ x + b[:, 0] * u + v, rtol=1e-15)


def test_sample_zero_noise():
    rng = np.random.default_rng(0)
    for _ in range(5):
        np.testing.assert_array_equal(sample_process_noise(ClockParams(0, 0), 1.0, rng), 0.0)


def test_sample_reproducible():
    p = ClockParams(2.0, 0.5)
    a = [sample_process_noise(p, 1.0, np.random.default_rng(42)) for _ in range(3)]
    assert all(np.array_equal(a[0], x) for x in a)
    batch = sample_process_noise(p, 1.0, np.random.default_rng(42), size=4)
    np.testing.assert_array_equal(batch, sample_process_noise(p, 1.0, np.random.default_rng(42), size=4))


def test_sample_covariance_monte_carlo():
    p = ClockParams(0.0289e-18, 0.0227e-24)
    q = process_noise_cov(p, 1.0)
    v = sample_process_noise(p, 1.0, np.random.default_rng(1), size=1_000_000)
    emp = v.T @ v / len(v)
    big = np.abs(q) >= 0.1 * np.abs(q).max()
    np.testing.assert_allclose(emp[big], q[big], rtol=0.01)


def test_sample_covariance_correlated_block():
    p = ClockParams(0.0, 1.0)  # strongly correlated, singular-free case
    q = process_noise_cov(p, 1.0)
    v = sample_process_noise(p, 1.0, np.random.default_rng(2), size=1_000_000)
    np.testing.assert_allclose(v.T @ v / len(v), q, rtol=0.01)


def test_free_phase_variance_against_recursion_and_simulation():
    """Variance of x1[T] from a known start: closed form, the covariance
    recursion sum A^k Q A^kT, and 500 simulated paths."""
    p, T, reps = ClockParams(0.0289e-18, 0.0227e-24), 10_000, 500
    a, _, _ = system_matrices(1.0)
    q = process_noise_cov(p, 1.0)
    cov = np.zeros((2, 2))
    for _ in range(T):
        cov = a @ cov @ a.T + q
    closed = free_phase_variance(p, 1.0, T)
    assert closed == pytest.approx(cov[0, 0], rel=1e-3)

    rng = np.random.default_rng(7)
    x = np.zeros((reps, 2))
    for _ in range(T):
        x = x @ a.T + sample_process_noise(p, 1.0, rng, size=reps)
    assert np.var(x[:, 0], ddof=1) == pytest.approx(cov[0, 0], rel=0.15)


@settings(max_examples=100, deadline=None)
@given(s1=st.floats(0, 1e6), s2=st.floats(0, 1e6), tau=st.floats(1e-3, 1e3))
def test_process_noise_cov_is_psd(s1, s2, tau):
    q = process_noise_cov(ClockParams(s1, s2), tau)
    # (tau s1 + tau^3 s2 / 3)(tau s2) - (tau^2 s2 / 2)^2
    det = tau**2 * s1 * s2 + tau**4 * s2**2 / 12
    assert np.linalg.det(q) == pytest.approx(det, rel=1e-6, abs=1e-300)
    assert np.linalg.eigvalsh(q).min() >= -1e-12 * max(np.trace(q), 1e-300)


def test_stacked_noise_cov_is_block_diagonal():
    ps = [ClockParams(1.0, 2.0), ClockParams(3.0, 0.0)]
    q = stacked_noise_cov(ps, 1.0)
    np.testing.assert_array_equal(q[:2, :2], process_noise_cov(ps[0], 1.0))
    np.testing.assert_array_equal(q[2:, 2:], process_noise_cov(ps[1], 1.0))
    np.testing.assert_array_equal(q[:2, 2:], 0.0)
