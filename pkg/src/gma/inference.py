"""Participant bootstrap for population effects, and Wald tests."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Optional

import numpy as np
from scipy.stats import norm

from .errors import DataError, GMAError, NumericalError
from .multilevel import fit_stack, population_effects, stack_dataset
from .parallel import pmap

log = logging.getLogger(__name__)

MAX_MISSING = 0.10


def wald_test(estimate: float, variance: float, null: float = 0.0, alpha: float = 0.05):
    """Two-sided normal test; returns ``(z, p_value, reject)`` with ``reject = p < alpha``."""
    if not variance > 0:
        raise DataError("Wald test needs a positive variance")
    if not 0 < alpha < 1:
        raise DataError("alpha must lie in (0, 1)")
    z = (estimate - null) / math.sqrt(variance)
    p = float(2.0 * norm.sf(abs(z)))
    return float(z), p, p < alpha


@dataclass
class BootstrapResult:
    target: str
    point: float
    replicates: np.ndarray    # NaN marks a failed replicate
    ci95: tuple
    seed: int
    ci_method: str = "percentile"

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.replicates).sum())


def percentile_ci(values: np.ndarray, level: float = 0.95) -> tuple:
    """Order-statistic interval; uses the inverse empirical CDF so endpoints are sample values."""
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    lo, hi = np.quantile(v, [(1 - level) / 2, (1 + level) / 2], method="inverted_cdf")
    return float(lo), float(hi)


def normal_ci(point: float, values: np.ndarray, level: float = 0.95) -> tuple:
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    half = norm.ppf((1 + level) / 2) * v.std(ddof=1)
    return float(point - half), float(point + half)


def fit_summary(fit) -> dict:
    """Scalar targets tracked by the bootstrap."""
    direct, indirect, omega_mean = population_effects(fit)
    b = fit.population.b
    out = {"delta": fit.delta_hat, "A": float(b[0]), "B": float(b[1]), "C": float(b[2]),
           "AB": indirect, "direct": direct}
    for j, om in enumerate(omega_mean, start=1):
        for (r, c) in ((0, 0), (0, 1), (1, 0), (1, 1)):
            out[f"omega{r + 1}{c + 1}_{j}"] = float(om[r, c])
    return out


def replicate_seed(seed: int, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(r)])


def _one_replicate(r, stack, method, search, seed):
    rng = np.random.default_rng(replicate_seed(seed, r))
    idx = rng.integers(0, stack.N, stack.N)
    try:
        return fit_summary(fit_stack(stack.take(idx), method, search))
    except GMAError as exc:
        log.info("bootstrap replicate %d failed: %s", r, exc)
        return None


def bootstrap_population(dataset, p: int, method: str = "ts", B: int = 200, seed: int = 0,
                         jobs: Optional[int] = 1, ci_method: str = "percentile", search=None,
                         stack=None, point_fit=None) -> list:
    """Resample subjects with replacement and rerun the full fit, delta search included.

    Returns one :class:`BootstrapResult` per target.  Precomputed ``stack``
    and ``point_fit`` may be passed to avoid refitting.
    """
    if B < 20:
        raise DataError("bootstrap needs B >= 20")
    if ci_method not in ("percentile", "normal"):
        raise DataError("ci_method must be 'percentile' or 'normal'")
    if stack is None:
        stack = stack_dataset(dataset, p)
    point = fit_summary(point_fit if point_fit is not None else fit_stack(stack, method, search))
    reps = pmap(partial(_one_replicate, stack=stack, method=method, search=search, seed=seed), range(B), jobs)
    missing = sum(r is None for r in reps)
    if missing > MAX_MISSING * B:
        raise NumericalError(f"bootstrap: {missing} of {B} replicates failed (limit {MAX_MISSING:.0%})")
    results = []
    for target, value in point.items():
        draws = np.array([np.nan if r is None else r[target] for r in reps])
        ci = percentile_ci(draws) if ci_method == "percentile" else normal_ci(value, draws)
        results.append(BootstrapResult(target, value, draws, ci, int(seed), ci_method))
    return results
