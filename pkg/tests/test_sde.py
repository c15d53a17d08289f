import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treedsb.errors import HorizonTooSmall, NonFiniteDrift, OddN, StepOutOfRange
from treedsb.measures import SampleSet
from treedsb.sde import (
    brownian_forward,
    em_forward,
    extract_marginal,
    make_schedule,
    trajectory_noise,
)


def golden_gamma_bar(N, gamma0, T):
    # sum_{k=1}^{N/2} 2 * (gamma0 + (2k/N)(gb - gamma0)) = N gamma0 + (N/2 + 1)(gb - gamma0)
    return gamma0 + (T - N * gamma0) / (N / 2 + 1)


class TestSchedule:
    def test_two_steps(self):
        s = make_schedule(2, 1e-3, 0.4)
        np.testing.assert_allclose(s.steps, [0.2, 0.2], rtol=1e-14)

    def test_default_schedule(self):
        s = make_schedule(50, 1e-5, 0.15)
        assert s.gamma_bar == pytest.approx(golden_gamma_bar(50, 1e-5, 0.15), rel=1e-14)
        assert s.gamma_bar == pytest.approx(0.00576, rel=1e-12)
        assert np.sum(s.steps) == pytest.approx(0.15, abs=1e-12)
        # middle steps reach gamma_bar
        assert s.steps[24] == pytest.approx(s.gamma_bar, rel=1e-14)

    def test_palindrome(self):
        s = make_schedule(50, 1e-5, 0.15)
        np.testing.assert_array_equal(s.steps, s.steps[::-1])
        np.testing.assert_array_equal(s.reversed().steps, s.steps)

    def test_cumulative(self):
        s = make_schedule(10, 1e-4, 1.0)
        assert s.cumulative[0] == 0.0
        assert s.cumulative[-1] == pytest.approx(1.0, abs=1e-12)

    def test_errors(self):
        with pytest.raises(OddN):
            make_schedule(3, 1e-5, 1.0)
        with pytest.raises(OddN):
            make_schedule(0, 1e-5, 1.0)
        with pytest.raises(HorizonTooSmall):
            make_schedule(10, 0.1, 1.0)


class TestSimulation:
    def test_one_step_zero_drift(self):
        s = make_schedule(2, 1e-3, 0.5)
        x0 = SampleSet(np.zeros((4, 3)))
        b = brownian_forward(s, x0, 7)
        z = trajectory_noise(7, np.arange(4), 2, 3)
        np.testing.assert_array_equal(b.states[:, 1], np.sqrt(s.steps[0]) * z[:, 0])

    def test_brownian_equals_zero_drift(self):
        s = make_schedule(10, 1e-4, 0.3)
        x0 = SampleSet(np.random.default_rng(0).standard_normal((50, 2)))
        a = brownian_forward(s, x0, 3).states
        b = em_forward(lambda t, x: np.zeros_like(x), s, x0, 3).states
        np.testing.assert_array_equal(a, b)

    def test_terminal_variance(self):
        T = 0.15
        s = make_schedule(50, 1e-5, T)
        M = 100_000
        x0 = SampleSet(np.full((M, 2), 0.5))
        xN = brownian_forward(s, x0, 11).states[:, -1]
        var = xN.var(axis=0, ddof=1)
        se = T * np.sqrt(2.0 / (M - 1))
        assert np.all(np.abs(var - T) < 3 * se)
        np.testing.assert_allclose(xN.mean(axis=0), 0.5, atol=3 * np.sqrt(T / M))
        # normality smoke check: excess kurtosis near zero
        z = (xN - xN.mean(0)) / xN.std(0)
        assert np.all(np.abs((z**4).mean(0) - 3.0) < 0.1)

    def test_increment_variance(self):
        s = make_schedule(10, 1e-3, 1.0)
        x = brownian_forward(s, SampleSet(np.zeros((20000, 1))), 5).states[:, :, 0]
        inc_var = np.diff(x, axis=1).var(axis=0)
        np.testing.assert_allclose(inc_var, s.steps, rtol=0.05)

    def test_gaussian_start_marginals(self):
        sigma = 0.7
        s = make_schedule(10, 1e-3, 0.5)
        x0 = SampleSet(sigma * np.random.default_rng(1).standard_normal((50000, 1)))
        states = brownian_forward(s, x0, 2).states[:, :, 0]
        np.testing.assert_allclose(states.var(axis=0), sigma**2 + s.cumulative, rtol=0.03)

    def test_constant_drift(self):
        c = np.array([1.0, -2.0])
        s = make_schedule(20, 1e-4, 0.4)
        x0 = SampleSet(np.zeros((20000, 2)))
        xN = em_forward(lambda t, x: np.broadcast_to(c, x.shape), s, x0, 0).states[:, -1]
        np.testing.assert_allclose(xN.mean(0), c * 0.4, atol=4 * np.sqrt(0.4 / 20000))

    def test_chunking_and_threads_do_not_change_results(self):
        s = make_schedule(8, 1e-4, 0.2)
        x0 = SampleSet(np.random.default_rng(2).standard_normal((37, 2)))
        drift = lambda t, x: -x * (1 + t)  # noqa: E731
        full = em_forward(drift, s, x0, 9).states
        chunked = em_forward(drift, s, x0, 9, chunk_size=5, workers=3).states
        np.testing.assert_array_equal(full, chunked)

    def test_initial_slice(self):
        s = make_schedule(4, 1e-3, 0.1)
        x0 = SampleSet(np.arange(6.0).reshape(3, 2))
        b = brownian_forward(s, x0, 0)
        np.testing.assert_array_equal(extract_marginal(b, 0).data, x0.data)
        np.testing.assert_array_equal(extract_marginal(b, 4).data, b.states[:, -1])
        with pytest.raises(StepOutOfRange):
            extract_marginal(b, 5)
        with pytest.raises(StepOutOfRange):
            extract_marginal(b, -1)

    def test_non_finite_drift(self):
        s = make_schedule(4, 1e-3, 0.1)
        with pytest.raises(NonFiniteDrift):
            em_forward(lambda t, x: np.full_like(x, np.nan), s, SampleSet(np.zeros((2, 1))), 0)

    def test_reversed_schedule_uses_same_steps(self):
        s = make_schedule(12, 1e-4, 0.3)
        x0 = SampleSet(np.random.default_rng(3).standard_normal((10, 2)))
        a = brownian_forward(s, x0, 4).states
        b = brownian_forward(s.reversed(), x0, 4).states
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# invariants, 1000 random cases each
# ---------------------------------------------------------------------------

PROPS = settings(max_examples=1000, deadline=None)


@st.composite
def schedule_args(draw):
    N = 2 * draw(st.integers(1, 100))
    T = draw(st.floats(1e-3, 10.0))
    gamma0 = draw(st.floats(1e-3, 0.999)) * T / N
    return N, gamma0, T


@PROPS
@given(schedule_args())
def test_schedule_invariants(args):
    N, gamma0, T = args
    s = make_schedule(N, gamma0, T)
    assert s.n_steps == N
    assert abs(np.sum(s.steps) - T) <= 1e-12 * max(1.0, T)
    np.testing.assert_array_equal(s.steps, s.steps[::-1])
    assert np.min(s.steps) >= gamma0
    assert s.gamma_bar >= gamma0
    assert s.cumulative[0] == 0.0
    assert np.all(np.diff(s.cumulative) > 0)


@PROPS
@given(st.integers(1, 60).map(lambda k: 2 * k + 1), st.floats(1e-6, 1e-2), st.floats(0.1, 5.0))
def test_odd_n_rejected(N, gamma0, T):
    with pytest.raises(OddN):
        make_schedule(N, gamma0, T)


@PROPS
@given(st.integers(1, 50).map(lambda k: 2 * k), st.floats(1e-3, 5.0), st.floats(1.001, 10.0))
def test_horizon_too_small(N, T, factor):
    with pytest.raises(HorizonTooSmall):
        make_schedule(N, factor * T / N, T)


@settings(max_examples=1000, deadline=None)
@given(
    st.integers(0, 2**32),
    st.integers(1, 12),
    st.integers(1, 6),
    st.integers(1, 4),
)
def test_trajectory_determinism_across_chunks(seed, M, chunk, dim):
    s = make_schedule(4, 1e-4, 0.1)
    x0 = SampleSet(np.linspace(-1, 1, M * dim).reshape(M, dim))
    full = brownian_forward(s, x0, seed).states
    parts = brownian_forward(s, x0, seed, chunk_size=chunk).states
    np.testing.assert_array_equal(full, parts)
    np.testing.assert_array_equal(full[:, 0], x0.data)
