"""Scenario generators and Monte-Carlo drivers for estimator comparisons.

Random streams are keyed by ``SeedSequence([seed, scenario, replicate,
subject, stream])`` so any replicate can be regenerated on its own and
parallel runs reproduce sequential ones exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .ar import (
    MarSpec,
    NoiseCov,
    PAPER_OMEGA_DELTA0,
    PAPER_OMEGA_DELTA05,
    is_stationary,
    scenario_transition,
    simulate_error_batch,
)
from .errors import DataError
from .inference import wald_test
from .multilevel import MultiSubjectDataset, SearchOpts, fit_stack, population_effects, stack_dataset
from .parallel import pmap
from .single import PathCoefficients, SubjectSeries, fit_cmle, indirect_effect

T_MIN = 20
_ERR, _TREAT, _POP, _LEN, _SCALE = 0, 1, 2, 3, 4


@dataclass
class ScenarioSpec:
    level: str                       # "single" or "two"
    path: PathCoefficients
    mar: MarSpec
    T: int = 100                      # fixed length, or Poisson mean when t_dist == "poisson"
    t_dist: str = "fixed"
    N: int = 1
    lam: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    burn_in: int = 1000
    z_coding: str = "bernoulli01"     # or "centered_pm_half"
    seed: int = 0
    key: tuple = ()                   # extra stream keys (scenario id, replicate index)
    sigma2_spread: float = 0.0        # log-SD of per-subject outcome noise scales (two-level only)

    def __post_init__(self):
        if self.level not in ("single", "two"):
            raise DataError("level must be 'single' or 'two'")
        if self.t_dist not in ("fixed", "poisson"):
            raise DataError("t_dist must be 'fixed' or 'poisson'")
        if self.z_coding not in ("bernoulli01", "centered_pm_half"):
            raise DataError("z_coding must be 'bernoulli01' or 'centered_pm_half'")
        if self.level == "two" and self.N < 2:
            raise DataError("two-level scenarios need N >= 2")
        if self.sigma2_spread < 0:
            raise DataError("sigma2_spread must be non-negative")
        if self.T < 1 or self.burn_in < 0:
            raise DataError("T must be >= 1 and burn_in >= 0")
        self.lam = np.asarray(self.lam, dtype=float)
        if self.mar.p and not is_stationary(self.mar)[1]:
            raise DataError("scenario MAR process is not stationary")

    def stream(self, *parts) -> np.random.SeedSequence:
        return np.random.SeedSequence([int(self.seed), *map(int, self.key), *map(int, parts)])


def _treatment(rng: np.random.Generator, T: int, coding: str) -> np.ndarray:
    z = (rng.random(T) < 0.5).astype(float)
    return z - 0.5 if coding == "centered_pm_half" else z


def _subject_errors(spec: ScenarioSpec, lengths, seeds) -> list:
    if spec.sigma2_spread == 0:
        return simulate_error_batch(spec.mar, lengths, spec.burn_in, seeds)
    # per-subject outcome noise scale; the transition matrices stay shared
    rng = np.random.default_rng(spec.stream(_SCALE))
    scales = np.exp(spec.sigma2_spread * rng.standard_normal(len(lengths)))
    nz = spec.mar.noise
    out = []
    for T, seed, sc in zip(lengths, seeds, scales):
        mar = MarSpec(spec.mar.omegas, NoiseCov(nz.sigma1, nz.sigma2 * sc, nz.delta))
        out.extend(simulate_error_batch(mar, [T], spec.burn_in, [seed]))
    return out


def _simulate_subjects(spec: ScenarioSpec, lengths, paths, ids) -> list:
    seeds = [spec.stream(i, _ERR) for i in range(len(lengths))]
    errors = _subject_errors(spec, lengths, seeds)
    out = []
    for i, (T, path, e) in enumerate(zip(lengths, paths, errors)):
        z = _treatment(np.random.default_rng(spec.stream(i, _TREAT)), T, spec.z_coding)
        m = path.a * z + e.e1
        r = path.c * z + path.b * m + e.e2
        out.append(SubjectSeries(ids[i], z, m, r))
    return out


def simulate_single(spec: ScenarioSpec) -> SubjectSeries:
    """One series with ``M = A Z + E1`` and ``R = C Z + B M + E2``."""
    if spec.level != "single":
        raise DataError("simulate_single needs a single-level scenario")
    return _simulate_subjects(spec, [spec.T], [spec.path], ["s1"])[0]


def simulate_single_batch(spec: ScenarioSpec, replicates: Sequence[int]) -> list:
    """Independent single-level series, replicate ``r`` keyed exactly as ``simulate_single``."""
    specs = [replace(spec, key=tuple(spec.key) + (r,)) for r in replicates]
    seeds = [s.stream(0, _ERR) for s in specs]
    errors = simulate_error_batch(spec.mar, [spec.T] * len(specs), spec.burn_in, seeds)
    out = []
    for s, e in zip(specs, errors):
        z = _treatment(np.random.default_rng(s.stream(0, _TREAT)), spec.T, spec.z_coding)
        m = spec.path.a * z + e.e1
        out.append(SubjectSeries("s1", z, m, spec.path.c * z + spec.path.b * m + e.e2))
    return out


def draw_lengths(spec: ScenarioSpec) -> list:
    if spec.t_dist == "fixed":
        return [spec.T] * spec.N
    rng = np.random.default_rng(spec.stream(_LEN))
    lengths = []
    while len(lengths) < spec.N:
        t = int(rng.poisson(spec.T))
        if t >= T_MIN:
            lengths.append(t)
    return lengths


def draw_coefficients(spec: ScenarioSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.stream(_POP))
    b = np.array([spec.path.a, spec.path.b, spec.path.c])
    w, V = np.linalg.eigh(0.5 * (spec.lam + spec.lam.T))
    root = V * np.sqrt(np.maximum(w, 0.0))
    return b + rng.standard_normal((spec.N, 3)) @ root.T


def simulate_two_level(spec: ScenarioSpec) -> MultiSubjectDataset:
    """Subjects with ``(A_i, B_i, C_i) ~ N(b, Lambda)`` and a shared MAR error model."""
    if spec.level != "two":
        raise DataError("simulate_two_level needs a two-level scenario")
    lengths = draw_lengths(spec)
    bi = draw_coefficients(spec)
    paths = [PathCoefficients(*row) for row in bi]
    ids = [f"s{i + 1}" for i in range(spec.N)]
    return MultiSubjectDataset(_simulate_subjects(spec, lengths, paths, ids))


# -- single-level replication -------------------------------------------------------

TRUE_A, TRUE_B, TRUE_C = 0.5, -1.0, 0.5

TABLE1_BLOCKS = (
    # name, delta, B, C, Omega
    ("alt", 0.5, TRUE_B, TRUE_C, PAPER_OMEGA_DELTA05),
    ("b_zero", 0.5, 0.0, TRUE_C, PAPER_OMEGA_DELTA05),
    ("c_zero", 0.5, TRUE_B, 0.0, PAPER_OMEGA_DELTA05),
    ("delta_zero", 0.0, TRUE_B, TRUE_C, PAPER_OMEGA_DELTA0),
)


def table1_spec(block: int, seed: int, T: int = 100) -> ScenarioSpec:
    name, delta, B, C, omega = TABLE1_BLOCKS[block]
    mar = MarSpec((np.array(omega),), NoiseCov(1.0, 2.0, delta))
    return ScenarioSpec("single", PathCoefficients(TRUE_A, B, C), mar, T=T, burn_in=1000, seed=seed, key=(block,))


def _fit_row(series: SubjectSeries, p: int, delta: float, alpha: float) -> dict:
    fit = fit_cmle(series, p, delta)
    eff = indirect_effect(fit)
    k = 3 * p + 1
    var_c = float(fit.vcov[k, k])
    row = {
        "c": fit.theta.c, "ab": eff.ab, "sigma1_sq": fit.sigma1_sq, "sigma2_sq": fit.sigma2_sq,
        "reject_c": wald_test(fit.theta.c, var_c, 0.0, alpha)[2],
        "reject_ab": wald_test(eff.ab, eff.variance, 0.0, alpha)[2],
    }
    if p:
        om = fit.omegas_hat[0]
        row.update(w11=om[0, 0], w12=om[0, 1], w21=om[1, 0], w22=om[1, 1])
    return row


def _table1_chunk(args) -> list:
    block, seed, reps, alpha, T = args
    spec = table1_spec(block, seed, T)
    delta = spec.mar.noise.delta
    rows = []
    for s in simulate_single_batch(spec, reps):
        rows.append({
            "GMA-delta": _fit_row(s, 1, delta, alpha),
            "GMA-0": _fit_row(s, 1, 0.0, alpha),
            "BK": _fit_row(s, 0, 0.0, alpha),
        })
    return rows


def _summarize(records: list) -> dict:
    out = {}
    for key in records[0]:
        vals = np.array([rec[key] for rec in records], dtype=float)
        if key.startswith("reject_"):
            out["power_" + key[len("reject_"):]] = float(vals.mean())
        else:
            out["mean_" + key] = float(vals.mean())
            if key in ("c", "ab"):
                out["se_" + key] = float(vals.std(ddof=1))
    return out


@dataclass
class ReplicationResult:
    rows: list                 # one summary dict per (scenario, method)
    records: dict = field(default_factory=dict, repr=False)   # raw per-replicate values


def replicate_table1(reps: int = 1000, seed: int = 0, alpha: float = 0.05, jobs: Optional[int] = 1, T: int = 100,
                     min_reps: int = 100) -> ReplicationResult:
    """Monte-Carlo comparison of GMA at the true delta, GMA at delta = 0 and Baron-Kenny."""
    if reps < min_reps:
        raise DataError(f"reps must be at least {min_reps}")
    chunk = 50
    tasks = [
        (b, seed, tuple(range(lo, min(lo + chunk, reps))), alpha, T)
        for b in range(len(TABLE1_BLOCKS)) for lo in range(0, reps, chunk)
    ]
    results = pmap(_table1_chunk, tasks, jobs)
    rows, records = [], {}
    for b, (name, delta, B, C, _) in enumerate(TABLE1_BLOCKS):
        block_rows = [row for t, res in zip(tasks, results) if t[0] == b for row in res]
        for method in ("GMA-delta", "GMA-0", "BK"):
            recs = [row[method] for row in block_rows]
            records[(name, method)] = recs
            rows.append({"scenario": name, "delta": delta, "true_b": B, "true_c": C, "method": method,
                         "reps": len(recs), **_summarize(recs)})
    return ReplicationResult(rows, records)


# -- two-level replication --------------------------------------------------------

SWEEP_DELTAS = (-0.5, -0.25, 0.0, 0.25, 0.5)
CONSISTENCY_SIZES = (50, 200, 500)
POP_LAMBDA = 0.5 * np.eye(3)


def two_level_spec(delta: float, seed: int, key: tuple, N: int = 50, T: int = 100, t_dist: str = "poisson",
                   burn_in: int = 2000, sigma2_spread: float = 0.0) -> ScenarioSpec:
    mar = MarSpec((scenario_transition(delta),), NoiseCov(1.0, 2.0, delta))
    return ScenarioSpec("two", PathCoefficients(TRUE_A, TRUE_B, TRUE_C), mar, T=T, t_dist=t_dist, N=N,
                        lam=POP_LAMBDA, burn_in=burn_in, seed=seed, key=key, sigma2_spread=sigma2_spread)


def single_level_spec(delta: float, seed: int, key: tuple, T: int = 100, path: PathCoefficients = None,
                      burn_in: int = 1000) -> ScenarioSpec:
    """Single-series scenario with an identity-satisfying transition matrix for ``delta``.

    The two published matrices are used verbatim at ``delta`` 0 and 0.5.
    """
    omega = {0.5: PAPER_OMEGA_DELTA05, 0.0: PAPER_OMEGA_DELTA0}.get(float(delta))
    omega = scenario_transition(delta) if omega is None else np.array(omega)
    mar = MarSpec((omega,), NoiseCov(1.0, 2.0, delta))
    path = path or PathCoefficients(TRUE_A, TRUE_B, TRUE_C)
    return ScenarioSpec("single", path, mar, T=T, burn_in=burn_in, seed=seed, key=key)


def _two_level_task(args) -> dict:
    spec, methods, search = args
    stack = stack_dataset(simulate_two_level(spec), 1)
    out = {}
    for method in methods:
        fit = fit_stack(stack, method, search)
        direct, indirect, omega_mean = population_effects(fit)
        om = omega_mean[0]
        out[method] = {
            "delta": fit.delta_hat, "a": fit.population.b[0], "b": fit.population.b[1], "c": direct,
            "ab": indirect, "w11": om[0, 0], "w12": om[0, 1], "w21": om[1, 0], "w22": om[1, 1],
        }
    return out


def _bias_mse(vals, truth):
    vals = np.asarray(vals, dtype=float)
    return float(vals.mean() - truth), float(np.mean((vals - truth) ** 2))


def replicate_two_level(kind: str, reps: int = 200, seed: int = 0, methods: Sequence[str] = ("ts", "bcd"),
                        jobs: Optional[int] = 1, deltas: Sequence[float] = SWEEP_DELTAS,
                        sizes: Sequence[int] = CONSISTENCY_SIZES, N: int = 50,
                        search: Optional[SearchOpts] = None, min_reps: int = 50) -> ReplicationResult:
    """Bias and MSE of the two-level estimators.

    ``delta_sweep`` varies the true delta at ``N`` subjects with Poisson(100)
    lengths; ``consistency`` holds delta at 0.5 and grows ``N = T``.
    """
    if reps < min_reps:
        raise DataError(f"reps must be at least {min_reps}")
    methods = tuple(methods)
    if kind == "delta_sweep":
        settings = [(i, float(d), N, 100, "poisson") for i, d in enumerate(deltas)]
    elif kind == "consistency":
        settings = [(100 + i, 0.5, n, n, "fixed") for i, n in enumerate(sizes)]
    else:
        raise DataError(f"unknown replication kind {kind!r}")
    tasks = [
        (two_level_spec(d, seed, (sid, r), N=n, T=t, t_dist=dist), methods, search)
        for sid, d, n, t, dist in settings for r in range(reps)
    ]
    results = pmap(_two_level_task, tasks, jobs)
    omega_true = {d: scenario_transition(d) for _, d, *_ in settings}
    rows, records = [], {}
    for j, (sid, d, n, t, dist) in enumerate(settings):
        chunk = results[j * reps:(j + 1) * reps]
        om = omega_true[d]
        for method in methods:
            recs = [res[method] for res in chunk]
            records[(d, n, method)] = recs
            bias_d, mse_d = _bias_mse([r_["delta"] for r_ in recs], d)
            bias_ab, mse_ab = _bias_mse([r_["ab"] for r_ in recs], TRUE_A * TRUE_B)
            row = {"delta": d, "N": n, "T": t, "method": method, "reps": reps,
                   "mean_delta": d + bias_d, "bias_delta": bias_d, "mse_delta": mse_d,
                   "mean_ab": TRUE_A * TRUE_B + bias_ab, "bias_ab": bias_ab, "mse_ab": mse_ab}
            for name, (i, k) in (("w11", (0, 0)), ("w12", (0, 1)), ("w21", (1, 0)), ("w22", (1, 1))):
                row["mean_" + name] = float(np.mean([r_[name] for r_ in recs]))
                row["true_" + name] = float(om[i, k])
            rows.append(row)
    return ReplicationResult(rows, records)
