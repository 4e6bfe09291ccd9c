"""Two-level GMA: subject-level fits pooled by a random-coefficient model.

Each subject follows the single-level model with its own ``(A_i, B_i, C_i)``
and MAR coefficients.  The path coefficients are drawn around a population
vector ``b`` with covariance ``Lambda``, and the innovation correlation
``delta`` is shared by all subjects, which makes it estimable.

The joint log-likelihood (constants dropped) is ``h = h1 + h2``, where ``h1``
sums the subject conditional log-likelihoods and::

    h2 = -1/2 * sum_i [log|Lambda| + (b_i - b)' Lambda^{-1} (b_i - b)]

All per-subject work is expressed through the Gram matrix of ``[X, M, R]``
so a whole dataset is processed with stacked array operations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConvergenceError, DataError, GMAError, MonotonicityError, NumericalError
from .single import (
    SingleLevelFit,
    SubjectSeries,
    SubjectSummary,
    ThetaVector,
    information_from_gram,
    omega_from_lags,
    summarize,
)

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-10
LAMBDA_FLOOR = 1e-8
MONOTONE_SLACK = 1e-10


@dataclass
class MultiSubjectDataset:
    subjects: list

    def __post_init__(self):
        self.subjects = list(self.subjects)
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DataError("subject ids must be unique")

    @property
    def N(self) -> int:
        return len(self.subjects)

    def demeaned(self) -> "MultiSubjectDataset":
        return MultiSubjectDataset([s.demeaned() for s in self.subjects])


@dataclass
class PopulationParams:
    b: np.ndarray       # (A, B, C)
    lam: np.ndarray     # 3x3 random-effect covariance

    @property
    def a(self) -> float:
        return float(self.b[0])

    @property
    def indirect(self) -> float:
        return float(self.b[0] * self.b[1])

    @property
    def direct(self) -> float:
        return float(self.b[2])


@dataclass
class SearchOpts:
    """Grid scan followed by golden-section refinement of the delta profile."""

    lo: float = -0.95
    hi: float = 0.95
    n_grid: int = 21
    xtol: float = 1e-4
    bcd_tol: float = 1e-12
    bcd_max_iter: int = 200

    def __post_init__(self):
        if not -1.0 < self.lo < self.hi < 1.0:
            raise DataError("search bracket must satisfy -1 < lo < hi < 1")
        if self.n_grid < 3:
            raise DataError("search grid needs at least 3 points")

    def grid(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_grid)


@dataclass
class TwoLevelFit:
    delta_hat: float
    method: str
    subject_fits: list
    population: PopulationParams
    h: float
    h1: float
    h2: float
    iterations: int = 0
    converged: bool = True
    h_trace: list = field(default_factory=list)
    profile: list = field(default_factory=list)   # (delta, h, h2) at grid points

    @property
    def subject_b(self) -> np.ndarray:
        return np.array([[f.theta.a, f.theta.b, f.theta.c] for f in self.subject_fits])


# -- stacked subject statistics -------------------------------------------------


@dataclass
class SubjectStack:
    """Per-subject least-squares summaries stacked along axis 0."""

    ids: list
    p: int
    n: np.ndarray          # (N,)
    theta1: np.ndarray     # (N, k)
    theta2_0: np.ndarray   # (N, k)
    b_0: np.ndarray        # (N,)
    rss_m: np.ndarray
    rss_r: np.ndarray
    gram: np.ndarray       # (N, k+2, k+2)

    @property
    def N(self) -> int:
        return len(self.ids)

    @property
    def k(self) -> int:
        return 3 * self.p + 1

    @classmethod
    def from_summaries(cls, summaries: list) -> "SubjectStack":
        if not summaries:
            raise DataError("no subjects")
        p = summaries[0].p
        return cls(
            ids=[s.series_id for s in summaries], p=p,
            n=np.array([s.n for s in summaries], dtype=float),
            theta1=np.array([s.theta1 for s in summaries]),
            theta2_0=np.array([s.theta2_0 for s in summaries]),
            b_0=np.array([s.b_0 for s in summaries]),
            rss_m=np.array([s.rss_m for s in summaries]),
            rss_r=np.array([s.rss_r for s in summaries]),
            gram=np.array([s.gram for s in summaries]),
        )

    def take(self, idx) -> "SubjectStack":
        idx = np.asarray(idx)
        return SubjectStack(
            [self.ids[i] for i in idx], self.p, self.n[idx], self.theta1[idx], self.theta2_0[idx],
            self.b_0[idx], self.rss_m[idx], self.rss_r[idx], self.gram[idx],
        )


def stack_dataset(dataset: MultiSubjectDataset, p: int, min_subjects: int = 2) -> SubjectStack:
    if dataset.N < min_subjects:
        raise DataError(f"two-level fitting needs at least {min_subjects} subjects, got {dataset.N}")
    summaries = []
    for s in dataset.subjects:
        try:
            summaries.append(summarize(s, p))
        except GMAError as exc:
            raise type(exc)(f"stage-1 fit failed for subject {s.id}: {exc}") from exc
    return SubjectStack.from_summaries(summaries)


@dataclass
class _State:
    """Free parameters of the joint likelihood at a fixed delta."""

    theta: np.ndarray     # (N, 6p+3) flat theta per subject
    s1: np.ndarray        # (N,) sigma1^2
    s2: np.ndarray        # (N,) sigma2^2
    b: np.ndarray         # (3,)
    lam: np.ndarray       # (3, 3)

    def copy(self) -> "_State":
        return _State(self.theta.copy(), self.s1.copy(), self.s2.copy(), self.b.copy(), self.lam.copy())


def _path_index(p: int) -> np.ndarray:
    """Positions of (A, B, C) in the flat theta."""
    k = 3 * p + 1
    return np.array([0, 2 * k, k])


def _floor_psd(S: np.ndarray, floor: float = LAMBDA_FLOOR) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    L = (V * np.maximum(w, floor)) @ V.T
    return 0.5 * (L + L.T)


def _population_mle(bi: np.ndarray):
    b = bi.mean(axis=0)
    d = bi - b
    return b, _floor_psd(d.T @ d / len(bi))


def _scatter(stack: SubjectStack, theta: np.ndarray):
    """Residual cross-products ``S11, S12, S22`` per subject from the Gram matrices."""
    k = stack.k
    N = stack.N
    c1 = np.zeros((N, k + 2))
    c2 = np.zeros((N, k + 2))
    c1[:, :k] = -theta[:, :k]
    c1[:, k] = 1.0
    c2[:, :k] = -theta[:, k:2 * k]
    c2[:, k] = -theta[:, -1]
    c2[:, k + 1] = 1.0
    G = stack.gram
    Gc1 = (G @ c1[:, :, None])[:, :, 0]
    Gc2 = (G @ c2[:, :, None])[:, :, 0]
    S11 = (c1 * Gc1).sum(axis=1)
    S12 = (c2 * Gc1).sum(axis=1)
    S22 = (c2 * Gc2).sum(axis=1)
    # cancellation can leave tiny negatives for near-perfect fits
    return np.maximum(S11, 0.0), S12, np.maximum(S22, 0.0)


def _h1_terms(stack: SubjectStack, delta: float, st: _State) -> np.ndarray:
    S11, S12, S22 = _scatter(stack, st.theta)
    om = 1.0 - delta ** 2
    sd = np.sqrt(st.s1 * st.s2)
    quad = (S11 / st.s1 - 2.0 * delta * S12 / sd + S22 / st.s2) / (2.0 * om)
    return -0.5 * stack.n * np.log(st.s1 * st.s2 * om) - quad


def _h2(bi: np.ndarray, b: np.ndarray, lam: np.ndarray) -> float:
    N = len(bi)
    sign, logdet = np.linalg.slogdet(lam)
    if sign <= 0:
        raise NumericalError("multi-level: random-effect covariance is not positive definite")
    d = bi - b
    quad = np.einsum("ni,ni->", d, np.linalg.solve(lam, d.T).T)
    return float(-0.5 * (N * logdet + quad))


def _objective(stack: SubjectStack, delta: float, st: _State):
    h1 = float(_h1_terms(stack, delta, st).sum())
    h2 = _h2(st.theta[:, _path_index(stack.p)], st.b, st.lam)
    return h1 + h2, h1, h2


# -- two-stage estimator ------------------------------------------------------


def _two_stage_state(stack: SubjectStack, delta: float) -> _State:
    if not -1.0 < delta < 1.0:
        raise DataError("delta must lie in (-1, 1)")
    om = 1.0 - delta ** 2
    s1 = stack.rss_m / stack.n
    s2 = stack.rss_r / (stack.n * om)
    kappa = delta * np.sqrt(s2 / s1)
    theta = np.concatenate(
        [stack.theta1, stack.theta2_0 + kappa[:, None] * stack.theta1, (stack.b_0 - kappa)[:, None]], axis=1
    )
    b, lam = _population_mle(theta[:, _path_index(stack.p)])
    return _State(theta, s1, s2, b, lam)


def _two_stage_h(stack: SubjectStack, delta: float) -> tuple:
    st = _two_stage_state(stack, delta)
    om = 1.0 - delta ** 2
    # subject likelihoods at their own CMLE have this closed form
    h1 = float(np.sum(-0.5 * stack.n * np.log(st.s1 * st.s2 * om) - stack.n))
    h2 = _h2(st.theta[:, _path_index(stack.p)], st.b, st.lam)
    return h1 + h2, h1, h2, st


def _assemble(stack: SubjectStack, delta: float, st: _State, method: str, **extra) -> TwoLevelFit:
    p = stack.p
    h1_terms = _h1_terms(stack, delta, st)
    h1 = float(h1_terms.sum())
    h2 = _h2(st.theta[:, _path_index(p)], st.b, st.lam)
    fits = []
    for i, sid in enumerate(stack.ids):
        theta = ThetaVector.from_flat(p, st.theta[i])
        path = theta.path
        fits.append(SingleLevelFit(
            delta=float(delta), theta=theta, sigma1_sq=float(st.s1[i]), sigma2_sq=float(st.s2[i]),
            kappa=float(delta * math.sqrt(st.s2[i] / st.s1[i])),
            omegas_hat=[omega_from_lags(path, theta.eta(j)) for j in range(1, p + 1)],
            loglik=float(h1_terms[i]), n_obs=int(stack.n[i]), series_id=sid,
        ))
    return TwoLevelFit(
        delta_hat=float(delta), method=method, subject_fits=fits,
        population=PopulationParams(st.b.copy(), st.lam.copy()), h=h1 + h2, h1=h1, h2=h2, **extra,
    )


def two_stage_fixed_delta(dataset: MultiSubjectDataset, p: int, delta: float) -> TwoLevelFit:
    """Per-subject closed-form fits at ``delta`` followed by the Gaussian MLE of ``(b, Lambda)``."""
    stack = stack_dataset(dataset, p)
    return _assemble(stack, delta, _two_stage_state(stack, delta), "two-stage")


# -- block coordinate ascent ----------------------------------------------------


def _update_sigma(stack: SubjectStack, delta: float, st: _State) -> None:
    S11, S12, S22 = _scatter(stack, st.theta)
    om = 1.0 - delta ** 2
    S11 = np.maximum(S11, SIGMA_FLOOR)
    S22 = np.maximum(S22, SIGMA_FLOOR)
    st.s1 = np.maximum((S11 - delta * S12 * np.sqrt(S11 / S22)) / (stack.n * om), SIGMA_FLOOR)
    st.s2 = np.maximum((S22 - delta * S12 * np.sqrt(S22 / S11)) / (stack.n * om), SIGMA_FLOOR)


def _update_theta(stack: SubjectStack, delta: float, st: _State) -> None:
    k = stack.k
    G = stack.gram
    om = 1.0 - delta ** 2
    s = st.s2 * om
    kappa = delta * np.sqrt(st.s2 / st.s1)
    H = information_from_gram(G, k, st.s1, st.s2, delta)
    xm, xr = G[:, :k, k], G[:, :k, k + 1]
    mm, mr = G[:, k, k], G[:, k, k + 1]
    rhs = np.concatenate([
        xm / (st.s1 * om)[:, None] - (kappa / s)[:, None] * xr,
        (xr - kappa[:, None] * xm) / s[:, None],
        ((mr - kappa * mm) / s)[:, None],
    ], axis=1)
    idx = _path_index(stack.p)
    lam_inv = np.linalg.inv(st.lam)
    lam_inv = 0.5 * (lam_inv + lam_inv.T)
    H[:, idx[:, None], idx[None, :]] += lam_inv
    rhs[:, idx] += lam_inv @ st.b
    st.theta = np.linalg.solve(H, rhs[..., None])[..., 0]


def _update_b(stack: SubjectStack, st: _State) -> None:
    st.b = st.theta[:, _path_index(stack.p)].mean(axis=0)


def _update_lambda(stack: SubjectStack, st: _State) -> None:
    d = st.theta[:, _path_index(stack.p)] - st.b
    st.lam = _floor_psd(d.T @ d / stack.N)


def _bcd(stack: SubjectStack, delta: float, st: _State, tol: float, max_iter: int):
    if tol <= 0:
        raise DataError("tol must be positive")
    st = st.copy()
    h, _, _ = _objective(stack, delta, st)
    trace = [h]
    steps = (
        ("sigma", lambda: _update_sigma(stack, delta, st)),
        ("theta", lambda: _update_theta(stack, delta, st)),
        ("b", lambda: _update_b(stack, st)),
        ("lambda", lambda: _update_lambda(stack, st)),
    )
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        h_prev = h
        for name, step in steps:
            step()
            h_new, _, _ = _objective(stack, delta, st)
            if not math.isfinite(h_new):
                raise NumericalError(f"multi-level: non-finite objective after {name} update")
            if h_new < h - MONOTONE_SLACK * max(1.0, abs(h)):
                raise MonotonicityError(
                    f"multi-level: objective decreased by {h - h_new:.3e} in the {name} update"
                )
            h = h_new
        trace.append(h)
        if abs(h - h_prev) <= tol * max(1.0, abs(h_prev)):
            converged = True
            break
    return st, it, converged, trace


def bcd_fixed_delta(
    dataset: MultiSubjectDataset,
    p: int,
    delta: float,
    init: Optional[TwoLevelFit] = None,
    tol: float = 1e-12,
    max_iter: int = 500,
) -> TwoLevelFit:
    """Cyclic exact maximization of ``h`` over (sigmas, thetas, b, Lambda) at fixed ``delta``.

    Starts from ``init`` when given, otherwise from the two-stage estimate.
    """
    stack = stack_dataset(dataset, p)
    st0 = _state_from_fit(stack, init) if init is not None else _two_stage_state(stack, delta)
    st, it, conv, trace = _bcd(stack, delta, st0, tol, max_iter)
    return _assemble(stack, delta, st, "bcd", iterations=it, converged=conv, h_trace=trace)


def _state_from_fit(stack: SubjectStack, fit: TwoLevelFit) -> _State:
    if len(fit.subject_fits) != stack.N:
        raise DataError("initial fit does not match the dataset")
    return _State(
        np.array([f.theta.flat() for f in fit.subject_fits]),
        np.array([f.sigma1_sq for f in fit.subject_fits]),
        np.array([f.sigma2_sq for f in fit.subject_fits]),
        np.array(fit.population.b, dtype=float),
        np.array(fit.population.lam, dtype=float),
    )


def joint_loglik(dataset: MultiSubjectDataset, p: int, fit: TwoLevelFit) -> tuple:
    """Recompute ``(h, h1, h2)`` for the parameters stored in ``fit``."""
    stack = stack_dataset(dataset, p)
    return _objective(stack, fit.delta_hat, _state_from_fit(stack, fit))


# -- delta profile search ---------------------------------------------------------

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def _maximize_profile(f: Callable[[float], float], opts: SearchOpts):
    """Grid scan then golden-section search around the best grid point.

    Returns ``(delta_best, value_best, grid_values)``; failing evaluations
    count as ``-inf``.
    """
    cache = {}

    def g(x):
        x = float(x)
        if x not in cache:
            try:
                cache[x] = f(x)
            except NumericalError as exc:
                log.debug("profile evaluation failed at delta=%g: %s", x, exc)
                cache[x] = -math.inf
        return cache[x]

    grid = opts.grid()
    values = np.array([g(x) for x in grid])
    if not np.any(np.isfinite(values)):
        raise ConvergenceError("multi-level: every delta grid evaluation failed")
    i = int(np.argmax(values))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, len(grid) - 1)]
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    while b - a > opts.xtol:
        if g(c) >= g(d):
            b, d = d, c
            c = b - _INV_PHI * (b - a)
        else:
            a, c = c, d
            d = a + _INV_PHI * (b - a)
    best = max(cache, key=lambda x: (cache[x], -abs(x - grid[i])))
    return best, cache[best], values


def _profile_ts(stack: SubjectStack, opts: SearchOpts) -> TwoLevelFit:
    delta, _, _ = _maximize_profile(lambda d: _two_stage_h(stack, d)[0], opts)
    profile = []
    for x in opts.grid():
        try:
            h, _, h2, _ = _two_stage_h(stack, x)
        except NumericalError:
            h = h2 = -math.inf
        profile.append((float(x), float(h), float(h2)))
    return _assemble(stack, delta, _two_stage_state(stack, delta), "two-stage", profile=profile)


def _profile_bcd(stack: SubjectStack, opts: SearchOpts) -> TwoLevelFit:
    runs = {}

    def f(d):
        st, it, conv, trace = _bcd(stack, d, _two_stage_state(stack, d), opts.bcd_tol, opts.bcd_max_iter)
        runs[d] = (st, it, conv, trace)
        return trace[-1]

    delta, _, values = _maximize_profile(f, opts)
    profile = []
    for x, h in zip(opts.grid(), values):
        h2 = _h2(runs[x][0].theta[:, _path_index(stack.p)], runs[x][0].b, runs[x][0].lam) if x in runs else -math.inf
        profile.append((float(x), float(h), float(h2)))
    st, it, conv, trace = runs[delta]
    return _assemble(stack, delta, st, "bcd", iterations=it, converged=conv, h_trace=trace, profile=profile)


def profile_delta_ts(dataset: MultiSubjectDataset, p: int, search: Optional[SearchOpts] = None) -> TwoLevelFit:
    """Two-stage estimate with ``delta`` chosen to maximize ``h``."""
    return _profile_ts(stack_dataset(dataset, p), search or SearchOpts())


def profile_delta_bcd(dataset: MultiSubjectDataset, p: int, search: Optional[SearchOpts] = None) -> TwoLevelFit:
    """Block-coordinate estimate with ``delta`` chosen to maximize the converged ``h``."""
    return _profile_bcd(stack_dataset(dataset, p), search or SearchOpts())


def fit_stack(stack: SubjectStack, method: str, search: Optional[SearchOpts] = None) -> TwoLevelFit:
    search = search or SearchOpts()
    if method in ("ts", "two-stage"):
        return _profile_ts(stack, search)
    if method == "bcd":
        return _profile_bcd(stack, search)
    raise DataError(f"unknown method {method!r}; expected 'ts' or 'bcd'")


def population_effects(fit: TwoLevelFit):
    """``(direct, indirect, omega_mean)`` with the transition matrices averaged over subjects."""
    pop = fit.population
    p = fit.subject_fits[0].p if fit.subject_fits else 0
    omega_mean = [np.mean([f.omegas_hat[j] for f in fit.subject_fits], axis=0) for j in range(p)]
    return pop.direct, pop.indirect, omega_mean
