import numpy as np
import pytest

from conftest import simulate_series
from gma import multilevel as ml
from gma.ar import MarSpec, NoiseCov, PAPER_OMEGA_DELTA05
from gma.errors import DataError, MonotonicityError, RankDeficiencyError
from gma.multilevel import (
    LAMBDA_FLOOR,
    MultiSubjectDataset,
    PopulationParams,
    SearchOpts,
    TwoLevelFit,
    bcd_fixed_delta,
    fit_stack,
    joint_loglik,
    population_effects,
    profile_delta_bcd,
    profile_delta_ts,
    stack_dataset,
    two_stage_fixed_delta,
)
from gma.simulation import simulate_two_level, two_level_spec
from gma.single import SingleLevelFit, SubjectSeries, ThetaVector, fit_cmle

MAR05 = MarSpec((np.array(PAPER_OMEGA_DELTA05),), NoiseCov(1, 2, 0.5))


@pytest.fixture(scope="module")
def data_t100():
    return simulate_two_level(two_level_spec(0.5, 11, (0,), N=20, T=100))


@pytest.fixture(scope="module")
def data_t400():
    # long series keep subject noise below Lambda, so BCD has an interior optimum
    return simulate_two_level(two_level_spec(0.5, 3, (9,), N=20, T=400))


def _rename(s, sid):
    return SubjectSeries(sid, s.z, s.m, s.r)


class TestDataset:
    def test_unique_ids(self):
        s = simulate_series(MAR05, 50, 0)
        with pytest.raises(DataError, match="unique"):
            MultiSubjectDataset([s, s])

    def test_needs_two_subjects(self):
        with pytest.raises(DataError, match="at least 2"):
            two_stage_fixed_delta(MultiSubjectDataset([simulate_series(MAR05, 50, 0)]), 1, 0.0)

    def test_failure_names_subject(self):
        good = simulate_series(MAR05, 50, 0, sid="good")
        bad = SubjectSeries("broken", np.zeros(50), good.m, good.r)
        with pytest.raises(RankDeficiencyError, match="subject broken"):
            two_stage_fixed_delta(MultiSubjectDataset([good, bad]), 1, 0.0)

    def test_search_opts(self):
        with pytest.raises(DataError):
            SearchOpts(lo=-1.0)
        with pytest.raises(DataError):
            SearchOpts(n_grid=2)
        assert len(SearchOpts().grid()) == 21


class TestTwoStage:
    def test_decomposition_and_stage1(self, data_t100):
        fit = two_stage_fixed_delta(data_t100, 1, 0.4)
        assert fit.h == pytest.approx(fit.h1 + fit.h2, abs=1e-9)
        h1 = 0.0
        for s, sf in zip(data_t100.subjects, fit.subject_fits):
            ref = fit_cmle(s, 1, 0.4, with_vcov=False)
            np.testing.assert_allclose(sf.theta.flat(), ref.theta.flat(), rtol=1e-9, atol=1e-12)
            h1 += ref.loglik
        assert fit.h1 == pytest.approx(h1, rel=1e-10)
        np.testing.assert_allclose(fit.population.b, fit.subject_b.mean(axis=0), atol=1e-14)
        d = fit.subject_b - fit.population.b
        np.testing.assert_allclose(fit.population.lam, d.T @ d / data_t100.N, atol=1e-12)
        np.testing.assert_array_equal(fit.population.lam, fit.population.lam.T)

    def test_two_identical_subjects(self):
        s = simulate_series(MAR05, 120, 1)
        fit = two_stage_fixed_delta(MultiSubjectDataset([_rename(s, "a"), _rename(s, "b")]), 1, 0.2)
        np.testing.assert_allclose(fit.population.b, fit.subject_b[0], atol=1e-14)
        np.testing.assert_allclose(fit.population.lam, LAMBDA_FLOOR * np.eye(3), atol=1e-15)
        assert np.isfinite(fit.h)

    def test_two_distinct_subjects(self):
        ds = MultiSubjectDataset([simulate_series(MAR05, 120, 1, sid="a"), simulate_series(MAR05, 150, 2, sid="b")])
        fit = two_stage_fixed_delta(ds, 1, -0.3)
        b1, b2 = fit.subject_b
        np.testing.assert_allclose(fit.population.b, (b1 + b2) / 2, atol=1e-14)
        np.testing.assert_allclose(fit.population.lam, np.outer(b1 - b2, b1 - b2) / 4, atol=2 * LAMBDA_FLOOR)

    def test_gap_is_delta_constant(self, data_t100):
        gaps = [(f.h - f.h2) for f in (two_stage_fixed_delta(data_t100, 1, d) for d in np.linspace(-0.9, 0.9, 19))]
        assert np.ptp(gaps) / abs(np.mean(gaps)) < 1e-6

    def test_profile(self, data_t100):
        fit = profile_delta_ts(data_t100, 1)
        assert -0.95 <= fit.delta_hat <= 0.95
        assert len(fit.profile) == 21
        assert fit.h >= max(h for _, h, _ in fit.profile) - 1e-9
        fixed = two_stage_fixed_delta(data_t100, 1, fit.delta_hat)
        assert fixed.h == pytest.approx(fit.h, rel=1e-12)

    def test_profile_unimodal_with_varying_noise(self):
        ds = simulate_two_level(two_level_spec(0.5, 5, (1,), N=40, T=100, sigma2_spread=0.7))
        hs = np.array([h for _, h, _ in profile_delta_ts(ds, 1).profile])
        i = int(np.argmax(hs))
        assert np.all(np.diff(hs[:i + 1]) > 0) and np.all(np.diff(hs[i:]) < 0)


class TestBCD:
    def test_structure(self, data_t100):
        ts = two_stage_fixed_delta(data_t100, 1, 0.3)
        fit = bcd_fixed_delta(data_t100, 1, 0.3, init=ts, max_iter=100)
        tr = np.array(fit.h_trace)
        assert tr[0] == pytest.approx(ts.h, rel=1e-12)
        assert np.all(np.diff(tr) >= -1e-10 * np.maximum(1, np.abs(tr[:-1])))
        assert fit.h >= ts.h
        assert fit.h == pytest.approx(fit.h1 + fit.h2, abs=1e-9)
        assert np.linalg.eigvalsh(fit.population.lam).min() >= LAMBDA_FLOOR * (1 - 1e-6)
        h, h1, h2 = joint_loglik(data_t100, 1, fit)
        assert h == pytest.approx(fit.h, rel=1e-12)

    def test_lambda_pd_every_iteration(self, data_t100, monkeypatch):
        seen = []
        orig = ml._update_lambda

        def spy(stack, st):
            orig(stack, st)
            seen.append(np.linalg.eigvalsh(st.lam).min())
            assert np.array_equal(st.lam, st.lam.T)

        monkeypatch.setattr(ml, "_update_lambda", spy)
        fit = bcd_fixed_delta(data_t100, 1, 0.0, max_iter=30)
        assert len(seen) == fit.iterations and min(seen) > 0

    def test_bad_update_detected(self, data_t100, monkeypatch):
        def wrong(stack, st):
            st.b = st.b + 1.0

        monkeypatch.setattr(ml, "_update_b", wrong)
        with pytest.raises(MonotonicityError, match="b update"):
            bcd_fixed_delta(data_t100, 1, 0.0, max_iter=5)

    def test_tol_validation(self, data_t100):
        with pytest.raises(DataError):
            bcd_fixed_delta(data_t100, 1, 0.0, tol=0.0)

    def test_init_mismatch(self, data_t100):
        small = MultiSubjectDataset(data_t100.subjects[:3])
        with pytest.raises(DataError):
            bcd_fixed_delta(data_t100, 1, 0.0, init=two_stage_fixed_delta(small, 1, 0.0))

    def test_converges_in_interior(self, data_t400):
        fit = bcd_fixed_delta(data_t400, 1, 0.3, tol=1e-15, max_iter=200)
        assert fit.converged and fit.iterations < 50
        assert np.linalg.eigvalsh(fit.population.lam).min() > 1e-2

    def test_blocks_at_two_stage_point(self, data_t100):
        stack = stack_dataset(data_t100, 1)
        st = ml._two_stage_state(stack, 0.4)
        st2 = st.copy()
        ml._update_sigma(stack, 0.4, st2)
        np.testing.assert_allclose(st2.s1, st.s1, rtol=1e-10)
        np.testing.assert_allclose(st2.s2, st.s2, rtol=1e-10)
        # without the population prior the theta update is the per-subject closed form
        st3 = st.copy()
        st3.lam = 1e12 * np.eye(3)
        ml._update_theta(stack, 0.4, st3)
        np.testing.assert_allclose(st3.theta, st.theta, atol=1e-6)


class TestProfileBCD:
    def test_improves_on_two_stage(self, data_t400):
        opts = SearchOpts(n_grid=7, xtol=1e-3, bcd_tol=1e-13)
        stack = stack_dataset(data_t400, 1)
        ts = fit_stack(stack, "ts", opts)
        bcd = fit_stack(stack, "bcd", opts)
        assert bcd.method == "bcd" and len(bcd.profile) == 7
        assert bcd.h >= ts.h
        direct = profile_delta_bcd(data_t400, 1, opts)
        assert direct.delta_hat == bcd.delta_hat and direct.h == bcd.h

    def test_unknown_method(self, data_t100):
        with pytest.raises(DataError, match="unknown method"):
            fit_stack(stack_dataset(data_t100, 1), "newton")


class TestPopulationEffects:
    def _fit(self, b):
        om = [np.array([[0.1, 0.2], [0.3, 0.4]])]
        subs = [SingleLevelFit(0.0, ThetaVector(1, np.zeros(4), np.zeros(4), 0), 1, 1, 0, [o * s for o in om], 0.0)
                for s in (1.0, 3.0)]
        return TwoLevelFit(0.0, "two-stage", subs, PopulationParams(np.array(b), np.eye(3)), 0, 0, 0)

    def test_examples(self):
        direct, indirect, om = population_effects(self._fit([0.5, -1.0, 0.5]))
        assert (direct, indirect) == (0.5, -0.5)
        np.testing.assert_allclose(om[0], [[0.2, 0.4], [0.6, 0.8]])
        assert population_effects(self._fit([0.7, 0.0, 0.1]))[1] == 0.0
