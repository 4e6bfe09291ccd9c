"""Bivariate MAR(p) error dynamics.

The error vector follows ``E_t = sum_j Omega_j^T E_{t-j} + eps_t`` with
``eps_t ~ N(0, Sigma)``.  Stacking ``xi_t = (E_t, ..., E_{t-p+1})`` gives the
first-order form ``xi_t = F xi_{t-1} + v_t`` with companion matrix ``F``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConvergenceError, DataError, NonStationaryError

DEFAULT_MARGIN = 1e-8
_EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class NoiseCov:
    """Innovation standard deviations and their correlation ``delta``."""

    sigma1: float
    sigma2: float
    delta: float

    def __post_init__(self):
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise DataError(f"innovation SDs must be positive, got {self.sigma1}, {self.sigma2}")
        if not -1.0 < self.delta < 1.0:
            raise DataError(f"delta must lie in (-1, 1), got {self.delta}")

    @property
    def matrix(self) -> np.ndarray:
        s1, s2, d = self.sigma1, self.sigma2, self.delta
        return np.array([[s1 * s1, d * s1 * s2], [d * s1 * s2, s2 * s2]])


@dataclass(frozen=True)
class MarSpec:
    """Transition matrices ``Omega_1..Omega_p`` plus innovation covariance.

    ``Omega_j = [[w11, w12], [w21, w22]]``; ``w21`` is the weight of
    ``E_2,t-j`` in the ``E_1t`` equation.
    """

    omegas: tuple
    noise: NoiseCov

    def __post_init__(self):
        mats = tuple(np.array(o, dtype=float).reshape(2, 2) for o in self.omegas)
        for o in mats:
            if not np.all(np.isfinite(o)):
                raise DataError("transition matrices must be finite")
            o.setflags(write=False)
        object.__setattr__(self, "omegas", mats)

    @property
    def p(self) -> int:
        return len(self.omegas)

    @classmethod
    def independent(cls, noise: NoiseCov) -> "MarSpec":
        return cls((), noise)


@dataclass
class ErrorSeries:
    e1: np.ndarray
    e2: np.ndarray

    def __post_init__(self):
        self.e1 = np.asarray(self.e1, dtype=float)
        self.e2 = np.asarray(self.e2, dtype=float)
        if self.e1.shape != self.e2.shape or self.e1.ndim != 1:
            raise DataError("error channels must be 1-d and of equal length")
        if not (np.all(np.isfinite(self.e1)) and np.all(np.isfinite(self.e2))):
            raise NonStationaryError("simulated errors are not finite")


def companion_matrix(mar: MarSpec) -> np.ndarray:
    """Return the ``2p x 2p`` companion matrix with ``Omega_j^T`` in the first block row."""
    p = mar.p
    if p == 0:
        raise DataError("no dynamics: companion matrix undefined for p = 0")
    F = np.zeros((2 * p, 2 * p))
    for j, om in enumerate(mar.omegas):
        F[:2, 2 * j:2 * j + 2] = om.T
    if p > 1:
        F[2:, :-2] = np.eye(2 * (p - 1))
    return F


def is_stationary(mar: MarSpec, margin: float = DEFAULT_MARGIN) -> tuple[float, bool]:
    """Spectral radius of the companion matrix and whether it is below ``1 - margin``."""
    if margin < 0:
        raise DataError("margin must be non-negative")
    if mar.p == 0:
        return 0.0, True
    rho = float(np.max(np.abs(np.linalg.eigvals(companion_matrix(mar)))))
    return rho, rho < 1.0 - margin


def _require_stationary(mar: MarSpec) -> None:
    rho, ok = is_stationary(mar)
    if not ok:
        raise NonStationaryError(
            f"stationary covariance undefined: companion spectral radius {rho:.6g} >= 1"
        )


def stationary_covariance(mar: MarSpec) -> np.ndarray:
    """Solve ``Pi = F Pi F^T + Xi`` via ``vec(Pi) = (I - F kron F)^{-1} vec(Xi)``."""
    if mar.p == 0:
        raise DataError("no dynamics: stationary covariance of the stacked state needs p >= 1")
    _require_stationary(mar)
    F = companion_matrix(mar)
    k = F.shape[0]
    Xi = np.zeros((k, k))
    Xi[:2, :2] = mar.noise.matrix
    vec = np.linalg.solve(np.eye(k * k) - np.kron(F, F), Xi.reshape(-1))
    Pi = vec.reshape(k, k)
    return 0.5 * (Pi + Pi.T)


def lag_covariance(mar: MarSpec, j: int) -> np.ndarray:
    """``Pi_j = E[xi_t xi_{t-j}^T] = F^j Pi``."""
    if j < 0:
        raise DataError("lag must be non-negative")
    Pi = stationary_covariance(mar)
    return np.linalg.matrix_power(companion_matrix(mar), j) @ Pi


def _psd_cholesky(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    w = np.maximum(w, _EIG_FLOOR)
    return np.linalg.cholesky((V * w) @ V.T)


def _draw(mar: MarSpec, n_steps: int, rng: np.random.Generator):
    """Initial stacked state and innovations from one generator, in a fixed order."""
    p = mar.p
    if p:
        xi0 = _psd_cholesky(stationary_covariance(mar)) @ rng.standard_normal(2 * p)
    else:
        xi0 = np.zeros(0)
    eps = rng.standard_normal((n_steps, 2)) @ np.linalg.cholesky(mar.noise.matrix).T
    return xi0, eps


def _propagate(omegas: Sequence[np.ndarray], xi0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Run the recursion for a batch; ``xi0`` is (N, 2p), ``eps`` is (n, N, 2).

    Arithmetic is elementwise and identical for every batch size, so a series
    is bit-identical whether simulated alone or in a batch.
    """
    p = len(omegas)
    n, N, _ = eps.shape
    if p == 0:
        return eps.copy()
    buf = np.empty((p + n, N, 2))
    for k in range(p):
        # xi0 stacks (E_0, E_-1, ..., E_-p+1)
        buf[p - 1 - k] = xi0[:, 2 * k:2 * k + 2]
    coef = [(float(o[0, 0]), float(o[1, 0]), float(o[0, 1]), float(o[1, 1])) for o in omegas]
    if N == 1:
        h1 = buf[:p, 0, 0].tolist()
        h2 = buf[:p, 0, 1].tolist()
        for u1, u2 in eps[:, 0, :].tolist():
            y1 = 0.0
            y2 = 0.0
            for j, (a, c, b, d) in enumerate(coef):
                x1 = h1[-1 - j]
                x2 = h2[-1 - j]
                y1 = y1 + (x1 * a + x2 * c)
                y2 = y2 + (x1 * b + x2 * d)
            h1.append(y1 + u1)
            h2.append(y2 + u2)
        buf[:, 0, 0] = h1
        buf[:, 0, 1] = h2
        return buf[p:]
    for t in range(n):
        s = t + p
        y1 = np.zeros(N)
        y2 = np.zeros(N)
        for j, (a, c, b, d) in enumerate(coef):
            x1 = buf[s - 1 - j, :, 0]
            x2 = buf[s - 1 - j, :, 1]
            # row form: E_t^T = sum_j E_{t-j}^T Omega_j
            y1 = y1 + (x1 * a + x2 * c)
            y2 = y2 + (x1 * b + x2 * d)
        buf[s, :, 0] = y1 + eps[t, :, 0]
        buf[s, :, 1] = y2 + eps[t, :, 1]
    return buf[p:]


def simulate_errors(mar: MarSpec, T: int, burn_in: int = 0, seed=None) -> ErrorSeries:
    """Simulate ``T`` error pairs after discarding ``burn_in`` steps.

    The initial stacked state is drawn from the stationary distribution, so
    the output is exactly stationary even with ``burn_in = 0``.  ``seed`` is
    anything accepted by :func:`numpy.random.default_rng`.
    """
    return simulate_error_batch(mar, [T], burn_in, [seed])[0]


def simulate_error_batch(mar: MarSpec, lengths: Sequence[int], burn_in: int, seeds: Sequence) -> list[ErrorSeries]:
    """Simulate several independent series with a shared ``mar``.

    Each series draws from its own generator, so the result for a given seed
    does not depend on which other series are simulated alongside it.
    """
    if len(lengths) != len(seeds):
        raise DataError("one seed per series is required")
    if any(int(T) < 1 for T in lengths) or burn_in < 0:
        raise DataError("T must be >= 1 and burn_in >= 0")
    if mar.p:
        _require_stationary(mar)
    total = [burn_in + int(T) for T in lengths]
    n = max(total)
    N = len(lengths)
    eps = np.zeros((n, N, 2))
    xi0 = np.zeros((N, 2 * mar.p))
    for i, (steps, seed) in enumerate(zip(total, seeds)):
        x, e = _draw(mar, steps, np.random.default_rng(seed))
        xi0[i] = x
        eps[:steps, i] = e
    path = _propagate(mar.omegas, xi0, eps)
    return [
        ErrorSeries(path[burn_in:steps, i, 0].copy(), path[burn_in:steps, i, 1].copy())
        for i, steps in enumerate(total)
    ]


def _lyapunov_residual(omega: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    """Residual of ``2 Sigma = Omega^T (2 Sigma) Omega + Sigma``."""
    return Sigma - 2.0 * omega.T @ Sigma @ omega


def solve_transition(
    noise: NoiseCov,
    pinned_omega21: float,
    initial_guess,
    max_iter: int = 100,
    tol: float = 1e-13,
) -> np.ndarray:
    """Find ``Omega`` with ``Gamma_0 = 2 Sigma`` and a prescribed ``omega_21``.

    The three free entries are found by damped Newton on the three distinct
    entries of the symmetric residual.
    """
    Sigma = noise.matrix
    guess = np.array(initial_guess, dtype=float).reshape(2, 2)
    if not np.all(np.isfinite(guess)):
        raise DataError("initial guess must be finite")
    free = [(0, 0), (0, 1), (1, 1)]
    rows = [(0, 0), (0, 1), (1, 1)]

    def build(x):
        om = np.array([[x[0], x[1]], [pinned_omega21, x[2]]])
        return om

    def resid(x):
        R = _lyapunov_residual(build(x), Sigma)
        return np.array([R[i, j] for i, j in rows])

    x = np.array([guess[i, j] for i, j in free])
    r = resid(x)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < tol:
            break
        om = build(x)
        J = np.empty((3, 3))
        for c, (i, j) in enumerate(free):
            dO = np.zeros((2, 2))
            dO[i, j] = 1.0
            dR = -2.0 * (dO.T @ Sigma @ om + om.T @ Sigma @ dO)
            J[:, c] = [dR[a, b] for a, b in rows]
        try:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
        except np.linalg.LinAlgError as exc:  # pragma: no cover - lstsq rarely raises
            raise ConvergenceError("no stationary solution found from guess") from exc
        norm0 = np.linalg.norm(r)
        lam = 1.0
        while lam > 1e-8:
            cand = x + lam * step
            rc = resid(cand)
            if np.linalg.norm(rc) < norm0:
                x, r = cand, rc
                break
            lam *= 0.5
        else:
            raise ConvergenceError("no stationary solution found from guess")
    omega = build(x)
    if np.max(np.abs(_lyapunov_residual(omega, Sigma))) >= 1e-8:
        raise ConvergenceError("no stationary solution found from guess")
    _, ok = is_stationary(MarSpec((omega,), noise))
    if not ok:
        raise NonStationaryError("Newton root is not stationary")
    return omega


# transition matrices used in the single-level simulation study
PAPER_OMEGA_DELTA05 = np.array([[-0.809, -0.618], [0.154, -0.500]])
PAPER_OMEGA_DELTA0 = np.array([[-0.5, -1.0], [0.25, -0.5]])


def scenario_transition(delta: float, sigma1: float = 1.0, sigma2: float = 2.0) -> np.ndarray:
    """Transition matrix with ``Gamma_0 = 2 Sigma`` for an arbitrary ``delta``.

    The pinned ``omega_21`` and the Newton start interpolate linearly between
    the published ``delta = 0`` and ``delta = 0.5`` matrices.
    """
    w = delta / 0.5
    pin = PAPER_OMEGA_DELTA0[1, 0] + w * (PAPER_OMEGA_DELTA05[1, 0] - PAPER_OMEGA_DELTA0[1, 0])
    guess = PAPER_OMEGA_DELTA0 + w * (PAPER_OMEGA_DELTA05 - PAPER_OMEGA_DELTA0)
    return solve_transition(NoiseCov(sigma1, sigma2, delta), pin, guess)
