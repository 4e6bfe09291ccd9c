"""Single-subject Granger mediation analysis.

Mediator and outcome equations are rewritten so that the MAR(p) errors are
absorbed into lagged regressors::

    M_t = X_t' theta1 + eps_1t
    R_t = M_t B + X_t' theta2 + eps_2t

with ``X_t = (Z_t, Z_{t-1..t-p}, M_{t-1..t-p}, R_{t-1..t-p})``.  For a fixed
innovation correlation ``delta`` the conditional MLE is available in closed
form; ``delta`` itself is not identified from a single subject, which is why
:func:`sensitivity_curve` exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ar import MarSpec, stationary_covariance
from .errors import DataError, NumericalError, RankDeficiencyError

Z95 = 1.959963984540054


@dataclass
class SubjectSeries:
    """Aligned treatment, mediator and outcome series of one participant."""

    id: str
    z: np.ndarray
    m: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.id = str(self.id)
        self.z = np.asarray(self.z, dtype=float)
        self.m = np.asarray(self.m, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        if not (self.z.ndim == self.m.ndim == self.r.ndim == 1):
            raise DataError(f"subject {self.id}: series must be one-dimensional")
        if not (len(self.z) == len(self.m) == len(self.r)):
            raise DataError(f"subject {self.id}: z, m, r lengths differ")
        for name in ("z", "m", "r"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"subject {self.id}: non-finite values in {name}")

    @property
    def T(self) -> int:
        return len(self.z)

    def demeaned(self) -> "SubjectSeries":
        return SubjectSeries(self.id, self.z - self.z.mean(), self.m - self.m.mean(), self.r - self.r.mean())


@dataclass(frozen=True)
class PathCoefficients:
    a: float
    b: float
    c: float

    @property
    def ab(self) -> float:
        return self.a * self.b


@dataclass
class ThetaVector:
    """Reparameterized coefficients.

    ``theta1 = (A, phi1_1..p, psi11_1..p, psi21_1..p)``,
    ``theta2 = (C, phi2_1..p, psi12_1..p, psi22_1..p)`` and the scalar ``b``.
    The flat layout ``(theta1, theta2, b)`` has length ``6p + 3``.
    """

    p: int
    theta1: np.ndarray
    theta2: np.ndarray
    b: float

    def __post_init__(self):
        self.theta1 = np.asarray(self.theta1, dtype=float)
        self.theta2 = np.asarray(self.theta2, dtype=float)
        self.b = float(self.b)
        k = 3 * self.p + 1
        if self.theta1.shape != (k,) or self.theta2.shape != (k,):
            raise DataError(f"theta blocks must have length 3p+1 = {k}")

    @property
    def a(self) -> float:
        return float(self.theta1[0])

    @property
    def c(self) -> float:
        return float(self.theta2[0])

    @property
    def path(self) -> PathCoefficients:
        return PathCoefficients(self.a, self.b, self.c)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta1, self.theta2, [self.b]])

    @classmethod
    def from_flat(cls, p: int, vec) -> "ThetaVector":
        vec = np.asarray(vec, dtype=float)
        k = 3 * p + 1
        if vec.shape != (2 * k + 1,):
            raise DataError(f"flat theta must have length 6p+3 = {2 * k + 1}")
        return cls(p, vec[:k], vec[k:2 * k], vec[-1])

    def eta(self, j: int) -> np.ndarray:
        """``(phi1_j, phi2_j, psi11_j, psi21_j, psi12_j, psi22_j)`` for lag ``j`` (1-based)."""
        p = self.p
        if not 1 <= j <= p:
            raise DataError(f"lag {j} outside 1..{p}")
        t1, t2 = self.theta1, self.theta2
        return np.array([t1[j], t2[j], t1[p + j], t1[2 * p + j], t2[p + j], t2[2 * p + j]])


@dataclass
class SingleLevelFit:
    delta: float
    theta: ThetaVector
    sigma1_sq: float
    sigma2_sq: float
    kappa: float
    omegas_hat: list
    loglik: float
    vcov: Optional[np.ndarray] = None
    n_obs: int = 0
    series_id: str = ""

    @property
    def path(self) -> PathCoefficients:
        return self.theta.path

    @property
    def p(self) -> int:
        return self.theta.p


# -- design and reparameterization -------------------------------------------------


def build_design(series: SubjectSeries, p: int):
    """Lagged design ``X`` (rows t = p+1..T) and the responses ``M_t``, ``R_t``."""
    if p < 0:
        raise DataError("lag order must be non-negative")
    T = series.T
    if T <= p:
        raise DataError(f"subject {series.id}: T = {T} must exceed p = {p}")
    n = T - p
    X = np.empty((n, 3 * p + 1))
    X[:, 0] = series.z[p:]
    for j in range(1, p + 1):
        X[:, j] = series.z[p - j:T - j]
        X[:, p + j] = series.m[p - j:T - j]
        X[:, 2 * p + j] = series.r[p - j:T - j]
    return X, series.m[p:].copy(), series.r[p:].copy()


def transform_matrix(path: PathCoefficients) -> np.ndarray:
    """6x4 matrix ``D`` with ``eta_j = D vec(omega_j)``, ``vec = (w11, w21, w12, w22)``."""
    A, B, C = path.a, path.b, path.c
    return np.array([
        [-A, -C, 0.0, 0.0],
        [0.0, 0.0, -A, -C],
        [1.0, -B, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, -B],
        [0.0, 0.0, 0.0, 1.0],
    ])


def reparam_forward(path: PathCoefficients, omega_j) -> np.ndarray:
    omega_j = np.asarray(omega_j, dtype=float).reshape(2, 2)
    return transform_matrix(path) @ omega_j.reshape(-1, order="F")


def reparam_inverse(path: PathCoefficients, eta_j) -> np.ndarray:
    """Least-squares recovery ``omega_j = (D'D)^{-1} D' eta_j``, returned as a 2x2 matrix."""
    D = transform_matrix(path)
    w = np.linalg.solve(D.T @ D, D.T @ np.asarray(eta_j, dtype=float))
    return w.reshape(2, 2, order="F")


def omega_from_lags(path: PathCoefficients, eta_j) -> np.ndarray:
    """Recover ``omega_j`` from the lagged-M and lagged-R coefficients alone.

    These four rows of ``D`` are unit upper triangular in ``B``, so the
    solve is exact and never touches the noisier lagged-Z coefficients.
    Agrees with :func:`reparam_inverse` whenever ``eta_j`` lies in the
    column space of ``D``.
    """
    p11, p21, p12, p22 = np.asarray(eta_j, dtype=float)[2:]
    b = path.b
    return np.array([[p11 + b * p21, p12 + b * p22], [p21, p22]])


# -- likelihood ---------------------------------------------------------------------


def _check_params(sigma1, sigma2, delta):
    if not (sigma1 > 0 and sigma2 > 0):
        raise DataError("sigma1 and sigma2 must be positive")
    if not -1.0 < delta < 1.0:
        raise DataError("delta must lie in (-1, 1)")


def conditional_loglik(series: SubjectSeries, p: int, theta: ThetaVector, sigma1: float, sigma2: float, delta: float) -> float:
    """Conditional log-likelihood given the first ``p`` observations, without the 2*pi constant."""
    _check_params(sigma1, sigma2, delta)
    X, M, R = build_design(series, p)
    n = len(M)
    kappa = delta * sigma2 / sigma1
    e1 = M - X @ theta.theta1
    u = (R - M * theta.b - X @ theta.theta2) - kappa * e1
    s2 = sigma2 ** 2 * (1.0 - delta ** 2)
    return float(
        -0.5 * n * np.log(sigma1 ** 2 * s2)
        - (e1 @ e1) / (2.0 * sigma1 ** 2)
        - (u @ u) / (2.0 * s2)
    )


def loglik_score(series: SubjectSeries, p: int, theta: ThetaVector, sigma1: float, sigma2: float, delta: float) -> np.ndarray:
    """Analytic gradient of :func:`conditional_loglik` w.r.t. ``(theta1, theta2, B, sigma1, sigma2)``."""
    _check_params(sigma1, sigma2, delta)
    X, M, R = build_design(series, p)
    n = len(M)
    one_m_d2 = 1.0 - delta ** 2
    kappa = delta * sigma2 / sigma1
    e1 = M - X @ theta.theta1
    e2 = R - M * theta.b - X @ theta.theta2
    s = sigma2 ** 2 * one_m_d2
    g1 = X.T @ e1 / (sigma1 ** 2 * one_m_d2) - kappa / s * (X.T @ e2)
    g2 = X.T @ e2 / s - kappa / s * (X.T @ e1)
    gb = (M @ e2) / s - kappa / s * (M @ e1)
    # sigma derivatives from the bivariate-normal form of the same likelihood
    S11, S12, S22 = e1 @ e1, e1 @ e2, e2 @ e2
    gs1 = -n / sigma1 + (S11 / sigma1 ** 3 - delta * S12 / (sigma1 ** 2 * sigma2)) / one_m_d2
    gs2 = -n / sigma2 + (S22 / sigma2 ** 3 - delta * S12 / (sigma1 * sigma2 ** 2)) / one_m_d2
    return np.concatenate([g1, g2, [gb, gs1, gs2]])


# -- closed-form CMLE ---------------------------------------------------------------


@dataclass
class SubjectSummary:
    """Delta-free least-squares quantities of one subject.

    Every closed-form estimate at any ``delta`` is a cheap function of these,
    which is what makes profiling and bootstrapping over many subjects fast.
    """

    series_id: str
    p: int
    n: int
    theta1: np.ndarray        # regression of M on X
    theta2_0: np.ndarray      # X-coefficients of R on (M, X)
    b_0: float                # M-coefficient of R on (M, X)
    rss_m: float              # M'(I - P_X)M
    rss_r: float              # R'(I - P_M - P_MX)R
    gram: np.ndarray = field(repr=False)  # [X, M, R]'[X, M, R]


def summarize(series: SubjectSeries, p: int) -> SubjectSummary:
    X, M, R = build_design(series, p)
    n, k = X.shape
    min_rows = 6 * p + 5 if p else 4
    if n < min_rows:
        raise DataError(f"subject {series.id}: {n} usable rows at p = {p}, need at least {min_rows}")
    theta1, _, rank_x, _ = np.linalg.lstsq(X, M, rcond=None)
    if rank_x < k:
        raise RankDeficiencyError(f"subject {series.id}: lagged design X has rank {rank_x} < {k}")
    MX = np.column_stack([M, X])
    coef, _, rank_mx, _ = np.linalg.lstsq(MX, R, rcond=None)
    if rank_mx < k + 1:
        raise RankDeficiencyError(f"subject {series.id}: mediator M lies in the column space of X")
    e1 = M - X @ theta1
    e2 = R - MX @ coef
    rss_m, rss_r = float(e1 @ e1), float(e2 @ e2)
    if rss_m <= 0 or rss_r <= 0:
        raise RankDeficiencyError(f"subject {series.id}: perfect fit, residual variance is zero")
    V = np.column_stack([X, M, R])
    return SubjectSummary(series.id, p, n, theta1, coef[1:], float(coef[0]), rss_m, rss_r, V.T @ V)


def information_from_gram(gram: np.ndarray, k: int, sigma1_sq, sigma2_sq, delta: float) -> np.ndarray:
    """Negative Hessian of the conditional log-likelihood w.r.t. ``(theta1, theta2, B)``.

    ``gram`` holds ``[X, M, ...]'[X, M, ...]`` (only the X/M blocks are used);
    passing expected second moments instead gives the Fisher information.
    Leading axes are treated as a batch, with ``sigma1_sq``/``sigma2_sq``
    broadcast over them.
    """
    gram = np.asarray(gram, dtype=float)
    batch = gram.shape[:-2]
    s1 = np.broadcast_to(np.asarray(sigma1_sq, dtype=float), batch)[..., None, None]
    s2 = np.broadcast_to(np.asarray(sigma2_sq, dtype=float), batch)[..., None, None]
    Sxx = gram[..., :k, :k]
    Sxm = gram[..., :k, k:k + 1]
    Smm = gram[..., k:k + 1, k:k + 1]
    one_m_d2 = 1.0 - delta ** 2
    s = s2 * one_m_d2
    kappa = delta * np.sqrt(s2 / s1)
    d = 2 * k + 1
    info = np.empty(batch + (d, d))
    info[..., :k, :k] = Sxx / (s1 * one_m_d2)
    info[..., :k, k:2 * k] = -kappa * Sxx / s
    info[..., :k, -1:] = -kappa * Sxm / s
    info[..., k:2 * k, k:2 * k] = Sxx / s
    info[..., k:2 * k, -1:] = Sxm / s
    info[..., -1:, -1:] = Smm / s
    iu = np.triu_indices(d, 1)
    info[..., iu[1], iu[0]] = info[..., iu[0], iu[1]]
    return info


def _invert_information(info: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(info)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("single-level: observed information is singular or indefinite") from exc
    Linv = np.linalg.solve(L, np.eye(len(info)))
    return Linv.T @ Linv


def fit_from_summary(summary: SubjectSummary, delta: float, with_vcov: bool = True) -> SingleLevelFit:
    if not -1.0 < delta < 1.0:
        raise DataError("delta must lie in (-1, 1)")
    n, p = summary.n, summary.p
    one_m_d2 = 1.0 - delta ** 2
    sigma1_sq = summary.rss_m / n
    sigma2_sq = summary.rss_r / (n * one_m_d2)
    kappa = delta * np.sqrt(sigma2_sq / sigma1_sq)
    theta = ThetaVector(p, summary.theta1, summary.theta2_0 + kappa * summary.theta1, summary.b_0 - kappa)
    path = theta.path
    omegas = [omega_from_lags(path, theta.eta(j)) for j in range(1, p + 1)]
    loglik = -0.5 * n * np.log(sigma1_sq * sigma2_sq * one_m_d2) - n
    vcov = None
    if with_vcov:
        k = 3 * p + 1
        vcov = _invert_information(information_from_gram(summary.gram, k, sigma1_sq, sigma2_sq, delta))
    return SingleLevelFit(
        delta=float(delta), theta=theta, sigma1_sq=float(sigma1_sq), sigma2_sq=float(sigma2_sq),
        kappa=float(kappa), omegas_hat=omegas, loglik=float(loglik), vcov=vcov, n_obs=n,
        series_id=summary.series_id,
    )


def fit_cmle(series: SubjectSeries, p: int, delta: float, with_vcov: bool = True) -> SingleLevelFit:
    """Closed-form conditional MLE at a fixed ``delta``.

    The variances are computed first because they depend only on the data
    and ``delta``; ``kappa = delta * sigma2 / sigma1`` then shifts the
    unconfounded regression coefficients: ``theta2 = theta2_0 + kappa * theta1``
    and ``B = B_0 - kappa``.
    """
    if not -1.0 < delta < 1.0:
        raise DataError("delta must lie in (-1, 1)")
    return fit_from_summary(summarize(series, p), delta, with_vcov)


def observed_information(series: SubjectSeries, p: int, fit: SingleLevelFit) -> np.ndarray:
    X, M, _ = build_design(series, p)
    V = np.column_stack([X, M])
    return information_from_gram(V.T @ V, X.shape[1], fit.sigma1_sq, fit.sigma2_sq, fit.delta)


def fisher_information_theoretical(path: PathCoefficients, mar: MarSpec, q: float, p: int) -> np.ndarray:
    """Per-observation Fisher information for a mean-zero treatment with ``E[Z^2] = q``.

    Lags beyond ``mar.p`` are padded with zero transition matrices.
    """
    if q <= 0:
        raise DataError("q = E[Z^2] must be positive")
    if p < mar.p:
        raise DataError(f"fitted lag order {p} is below the MAR order {mar.p}")
    A, B, C = path.a, path.b, path.c
    tot = C + A * B
    sig = mar.noise
    k = 3 * p + 1
    omegas = list(mar.omegas) + [np.zeros((2, 2))] * (p - mar.p)
    theta1 = np.empty(k)
    theta1[0] = A
    Sxx = np.zeros((k, k))
    Sxx[0, 0] = q
    if p:
        Pi = stationary_covariance(MarSpec(tuple(omegas), sig))
        J1 = np.kron(np.eye(p), [[1.0], [0.0]])
        J2 = np.kron(np.eye(p), [[0.0], [1.0]])
        P11, P12, P21, P22 = J1.T @ Pi @ J1, J1.T @ Pi @ J2, J2.T @ Pi @ J1, J2.T @ Pi @ J2
        I = np.eye(p)
        Q_mm = A * A * q * I + P11
        Q_mr = A * tot * q * I + B * P11 + P12
        Q_rr = tot * tot * q * I + B * B * P11 + B * P12 + B * P21 + P22
        zs, ms, rs = slice(1, p + 1), slice(p + 1, 2 * p + 1), slice(2 * p + 1, k)
        Sxx[zs, zs] = q * I
        Sxx[zs, ms] = A * q * I
        Sxx[zs, rs] = tot * q * I
        Sxx[ms, ms] = Q_mm
        Sxx[ms, rs] = Q_mr
        Sxx[rs, rs] = Q_rr
        Sxx[ms, zs] = Sxx[zs, ms].T
        Sxx[rs, zs] = Sxx[zs, rs].T
        Sxx[rs, ms] = Q_mr.T
        etas = np.array([reparam_forward(path, om) for om in omegas])  # (p, 6)
        phi1, psi11, psi21 = etas[:, 0], etas[:, 2], etas[:, 3]
        theta1[zs], theta1[ms], theta1[rs] = phi1, psi11, psi21
        Sxm = np.empty(k)
        Sxm[0] = A * q
        Sxm[zs] = q * phi1 + A * q * psi11 + tot * q * psi21
        Sxm[ms] = A * q * phi1 + Q_mm @ psi11 + Q_mr @ psi21
        Sxm[rs] = tot * q * phi1 + Q_mr.T @ psi11 + Q_rr @ psi21
    else:
        Sxm = np.array([A * q])
    Smm = theta1 @ Sxx @ theta1 + sig.sigma1 ** 2
    moments = np.zeros((k + 1, k + 1))
    moments[:k, :k] = Sxx
    moments[:k, k] = moments[k, :k] = Sxm
    moments[k, k] = Smm
    return information_from_gram(moments, k, sig.sigma1 ** 2, sig.sigma2 ** 2, sig.delta)


# -- inference on the indirect effect -------------------------------------------------


@dataclass
class IndirectEffect:
    ab: float
    variance: float
    ci95: tuple


def ab_gradient(theta: ThetaVector) -> np.ndarray:
    """Gradient of ``A * B`` w.r.t. the flat theta; ``J_1d theta`` swaps the end entries."""
    g = np.zeros(6 * theta.p + 3)
    g[0] = theta.b
    g[-1] = theta.a
    return g


def indirect_effect(fit: SingleLevelFit) -> IndirectEffect:
    """Product-method indirect effect with a Delta-method variance."""
    if fit.vcov is None:
        raise DataError("indirect effect variance requires a fit with vcov")
    ab = fit.theta.a * fit.theta.b
    g = ab_gradient(fit.theta)
    var = float(g @ fit.vcov @ g)
    half = Z95 * np.sqrt(max(var, 0.0))
    return IndirectEffect(float(ab), var, (float(ab - half), float(ab + half)))


@dataclass
class SensitivityPoint:
    delta: float
    fit: SingleLevelFit
    effect: IndirectEffect


@dataclass
class SensitivityCurve:
    series_id: str
    points: list

    @property
    def deltas(self) -> np.ndarray:
        return np.array([pt.delta for pt in self.points])

    @property
    def logliks(self) -> np.ndarray:
        """Profiled log-likelihood at each grid value; constant in theory."""
        return np.array([pt.fit.loglik for pt in self.points])


def sensitivity_curve(series: SubjectSeries, p: int, grid: Sequence[float]) -> SensitivityCurve:
    grid = [float(d) for d in grid]
    if not grid:
        raise DataError("sensitivity grid is empty")
    bad = [d for d in grid if not -1.0 < d < 1.0]
    if bad:
        raise DataError(f"grid values outside (-1, 1): {bad}")
    summary = summarize(series, p)
    points = []
    for d in grid:
        fit = fit_from_summary(summary, d)
        points.append(SensitivityPoint(d, fit, indirect_effect(fit)))
    return SensitivityCurve(series.id, points)


def fit_baron_kenny(series: SubjectSeries):
    """Two independent regressions (M on Z; R on Z and M), ignoring dynamics and confounding."""
    if series.T < 4:
        raise DataError(f"subject {series.id}: Baron-Kenny needs T >= 4")
    fit = fit_cmle(series, 0, 0.0)
    V = fit.vcov
    eff = indirect_effect(fit)
    variances = {
        "sigma1_sq": fit.sigma1_sq,
        "sigma2_sq": fit.sigma2_sq,
        "a": float(V[0, 0]),
        "c": float(V[1, 1]),
        "b": float(V[2, 2]),
        "ab": eff.variance,
    }
    return fit.path, variances
