import numpy as np
import pytest
from hypothesis import given, settings

from conftest import stationary_specs
from gma.ar import (
    PAPER_OMEGA_DELTA0,
    PAPER_OMEGA_DELTA05,
    ErrorSeries,
    MarSpec,
    NoiseCov,
    companion_matrix,
    is_stationary,
    lag_covariance,
    scenario_transition,
    simulate_error_batch,
    simulate_errors,
    solve_transition,
    stationary_covariance,
)
from gma.errors import ConvergenceError, DataError, NonStationaryError


def _xi(mar):
    p = mar.p
    X = np.zeros((2 * p, 2 * p))
    X[:2, :2] = mar.noise.matrix
    return X


PAPER05 = MarSpec((np.array(PAPER_OMEGA_DELTA05),), NoiseCov(1, 2, 0.5))
PAPER0 = MarSpec((np.array(PAPER_OMEGA_DELTA0),), NoiseCov(1, 2, 0.0))


class TestNoiseAndSpec:
    @pytest.mark.parametrize("args", [(0, 1, 0), (1, -1, 0), (1, 1, 1.0), (1, 1, -1.0), (np.nan, 1, 0)])
    def test_invalid_noise(self, args):
        with pytest.raises(DataError):
            NoiseCov(*args)

    def test_noise_matrix(self):
        S = NoiseCov(1.0, 2.0, 0.5).matrix
        np.testing.assert_allclose(S, [[1, 1], [1, 4]])
        assert np.all(np.linalg.eigvalsh(S) > 0)

    def test_omegas_are_readonly(self):
        mar = MarSpec((np.eye(2) * 0.1,), NoiseCov(1, 1, 0))
        with pytest.raises(ValueError):
            mar.omegas[0][0, 0] = 5.0

    def test_error_series_validation(self):
        with pytest.raises(DataError):
            ErrorSeries(np.zeros(3), np.zeros(4))


class TestCompanion:
    def test_p1_is_transpose(self):
        om = np.array([[1.0, 2.0], [3.0, 4.0]])
        F = companion_matrix(MarSpec((om,), NoiseCov(1, 1, 0)))
        np.testing.assert_array_equal(F, om.T)

    def test_p2_zero(self):
        F = companion_matrix(MarSpec((np.zeros((2, 2)),) * 2, NoiseCov(1, 1, 0)))
        expected = np.zeros((4, 4))
        expected[2:, :2] = np.eye(2)
        np.testing.assert_array_equal(F, expected)

    def test_p0_errors(self):
        with pytest.raises(DataError, match="no dynamics"):
            companion_matrix(MarSpec.independent(NoiseCov(1, 1, 0)))

    def test_paper_eigenvalues(self):
        ev = np.linalg.eigvals(companion_matrix(PAPER05))
        assert np.iscomplexobj(ev) and abs(ev[0].imag) > 0
        np.testing.assert_allclose(np.abs(ev), np.sqrt(np.linalg.det(PAPER_OMEGA_DELTA05)), rtol=1e-12)
        np.testing.assert_allclose(np.abs(ev), 0.707, atol=1e-3)

    @given(stationary_specs(max_p=3))
    @settings(max_examples=50, deadline=None)
    def test_layout_roundtrip(self, mar):
        F = companion_matrix(mar)
        for j, om in enumerate(mar.omegas):
            np.testing.assert_array_equal(F[:2, 2 * j:2 * j + 2].T, om)
        np.testing.assert_array_equal(F[2:, :-2], np.eye(2 * mar.p - 2))
        np.testing.assert_array_equal(F[2:, -2:], 0.0)


class TestStationarity:
    def test_zero(self):
        assert is_stationary(MarSpec((np.zeros((2, 2)),), NoiseCov(1, 1, 0))) == (0.0, True)

    def test_p0(self):
        assert is_stationary(MarSpec.independent(NoiseCov(1, 1, 0))) == (0.0, True)

    def test_unit_root(self):
        rho, ok = is_stationary(MarSpec((np.eye(2),), NoiseCov(1, 1, 0)))
        assert rho == pytest.approx(1.0) and not ok

    def test_paper_delta0(self):
        rho, ok = is_stationary(PAPER0)
        assert ok and rho == pytest.approx(np.sqrt(0.5), abs=1e-12)

    def test_margin(self):
        mar = MarSpec((np.eye(2) * 0.99,), NoiseCov(1, 1, 0))
        assert is_stationary(mar, margin=0.0)[1]
        assert not is_stationary(mar, margin=0.02)[1]


class TestStationaryCovariance:
    def test_white(self):
        mar = MarSpec((np.zeros((2, 2)),), NoiseCov(1, 2, 0.3))
        np.testing.assert_allclose(stationary_covariance(mar), mar.noise.matrix, atol=1e-15)

    def test_paper_delta05(self):
        G0 = stationary_covariance(PAPER05)
        np.testing.assert_allclose(G0, [[2, 2], [2, 8]], atol=5e-3)

    def test_paper_delta0_exact(self):
        np.testing.assert_allclose(stationary_covariance(PAPER0), [[2, 0], [0, 8]], atol=1e-10)

    def test_nonstationary(self):
        with pytest.raises(NonStationaryError, match="stationary covariance undefined"):
            stationary_covariance(MarSpec((np.eye(2) * 1.1,), NoiseCov(1, 1, 0)))

    @given(stationary_specs(max_p=3))
    @settings(max_examples=60, deadline=None)
    def test_lyapunov_fixed_point(self, mar):
        F = companion_matrix(mar)
        Pi = stationary_covariance(mar)
        resid = Pi - F @ Pi @ F.T - _xi(mar)
        assert np.abs(resid).max() < 1e-10 * max(1.0, np.abs(Pi).max())
        assert np.abs(Pi - Pi.T).max() < 1e-12 * max(1.0, np.abs(Pi).max())
        assert np.linalg.eigvalsh(Pi).min() > -1e-10

    def test_lag_covariance(self):
        Pi = stationary_covariance(PAPER05)
        F = companion_matrix(PAPER05)
        np.testing.assert_array_equal(lag_covariance(PAPER05, 0), Pi)
        np.testing.assert_allclose(lag_covariance(PAPER05, 3), F @ F @ F @ Pi, atol=1e-14)
        white = MarSpec((np.zeros((2, 2)),), NoiseCov(1, 1, 0.2))
        np.testing.assert_array_equal(lag_covariance(white, 2), 0.0)
        with pytest.raises(DataError):
            lag_covariance(PAPER05, -1)


class TestSimulation:
    def test_deterministic(self):
        a = simulate_errors(PAPER05, 200, 50, seed=4)
        b = simulate_errors(PAPER05, 200, 50, seed=4)
        np.testing.assert_array_equal(a.e1, b.e1)
        np.testing.assert_array_equal(a.e2, b.e2)

    def test_batch_matches_single(self):
        mar = MarSpec((np.array(PAPER_OMEGA_DELTA05), 0.1 * np.eye(2)), NoiseCov(1, 2, 0.5))
        batch = simulate_error_batch(mar, [30, 80, 55], 10, [1, 2, 3])
        for T, seed, got in zip([30, 80, 55], [1, 2, 3], batch):
            ref = simulate_errors(mar, T, 10, seed)
            np.testing.assert_array_equal(got.e1, ref.e1)
            np.testing.assert_array_equal(got.e2, ref.e2)

    def test_white_noise_uncorrelated(self):
        mar = MarSpec((np.zeros((2, 2)),), NoiseCov(1, 1, 0))
        e = simulate_errors(mar, 10_000, 0, seed=1)
        assert abs(np.corrcoef(e.e1, e.e2)[0, 1]) < 0.05

    def test_paper_long_run_covariance(self):
        e = simulate_errors(PAPER05, 100_000, 1000, seed=2)
        S = np.cov(np.vstack([e.e1, e.e2]))
        target = np.array([[2, 2], [2, 8]])
        assert np.abs(S - target).max() / np.abs(target).max() < 0.05
        np.testing.assert_allclose(S, target, rtol=0.05)

    def test_lag1_cross_covariance(self):
        e = simulate_errors(PAPER05, 100_000, 1000, seed=3)
        E = np.vstack([e.e1, e.e2])
        S1 = (E[:, 1:] @ E[:, :-1].T) / (E.shape[1] - 1)
        P1 = lag_covariance(PAPER05, 1)[:2, :2]
        assert np.abs(S1 - P1).max() / np.abs(P1).max() < 0.05

    @given(stationary_specs(max_p=2, max_rho=0.8))
    @settings(max_examples=5, deadline=None)
    def test_random_spec_covariance(self, mar):
        e = simulate_errors(mar, 100_000, 200, seed=9)
        S = np.cov(np.vstack([e.e1, e.e2]))
        G0 = stationary_covariance(mar)[:2, :2]
        assert np.abs(S - G0).max() / np.abs(G0).max() < 0.05

    def test_nonstationary_rejected(self):
        with pytest.raises(NonStationaryError):
            simulate_errors(MarSpec((np.eye(2),), NoiseCov(1, 1, 0)), 10, 0, seed=0)

    def test_bad_lengths(self):
        with pytest.raises(DataError):
            simulate_errors(PAPER05, 0, 0, seed=0)

    def test_independent_errors(self):
        e = simulate_errors(MarSpec.independent(NoiseCov(1, 2, 0.5)), 50_000, 0, seed=0)
        assert np.corrcoef(e.e1, e.e2)[0, 1] == pytest.approx(0.5, abs=0.02)

    def test_no_blowup(self):
        e = simulate_errors(PAPER05, 1_000_000, 1000, seed=11)
        assert np.abs(e.e1).max() < 1e6 and np.abs(e.e2).max() < 1e6


class TestSolveTransition:
    def _resid(self, om, noise):
        S = noise.matrix
        return np.abs(2 * S - om.T @ (2 * S) @ om - S).max()

    def test_delta0_exact(self):
        noise = NoiseCov(1, 2, 0)
        om = solve_transition(noise, 0.25, np.array(PAPER_OMEGA_DELTA0))
        np.testing.assert_allclose(om, PAPER_OMEGA_DELTA0, atol=1e-12)
        assert self._resid(om, noise) < 1e-12

    def test_delta05_near_paper(self):
        noise = NoiseCov(1, 2, 0.5)
        om = solve_transition(noise, 0.154, np.array(PAPER_OMEGA_DELTA05))
        np.testing.assert_allclose(om, PAPER_OMEGA_DELTA05, atol=1e-2)
        assert om[1, 0] == 0.154
        assert self._resid(om, noise) < 1e-8
        assert is_stationary(MarSpec((om,), noise))[1]

    def test_infeasible_pin(self):
        with pytest.raises(ConvergenceError, match="no stationary solution found from guess"):
            solve_transition(NoiseCov(1, 2, 0.5), 10.0, np.zeros((2, 2)))

    @pytest.mark.parametrize("delta", [-0.5, -0.25, 0.0, 0.25, 0.5])
    def test_scenario_family(self, delta):
        om = scenario_transition(delta)
        noise = NoiseCov(1, 2, delta)
        assert self._resid(om, noise) < 1e-8
        rho, ok = is_stationary(MarSpec((om,), noise))
        assert ok and rho == pytest.approx(1 / np.sqrt(2), abs=1e-8)
        G0 = stationary_covariance(MarSpec((om,), noise))
        np.testing.assert_allclose(G0, 2 * noise.matrix, atol=1e-8)
