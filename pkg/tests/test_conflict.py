import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cutvi.conflict import (
    FfviRecipe,
    MfvbRecipe,
    conflict_check,
    imputation_conflict,
    kl_statistic,
    simulate_reference_dataset,
    tail_probability,
)
from cutvi.errors import NumericError, StructureError, UnsupportedCheckError
from cutvi.ffvi import GaussianVariational
from cutvi.hybrid import conditional_probs, run_algorithm1
from cutvi.models import AgriModel, BiasedNormalModel, HpvModel


def _q(m, v):
    return GaussianVariational([m], [[np.sqrt(v)]])


class TestStatistic:
    def test_general_form(self):
        qy, qz = _q(0.3, 0.5), _q(-0.2, 2.0)
        expected = 0.5 * (np.log(2.0 / 0.5) + 0.5 / 2.0 - 1.0 + 0.25 / 2.0)
        np.testing.assert_allclose(kl_statistic(qy, qz), expected, rtol=1e-14)

    def test_univariate_display_form(self):
        qy, qz = _q(0.3, 0.5), _q(-0.2, 2.0)
        expected = 0.5 * (np.log(2.0 / 0.5) + 0.25 / 2.0)
        np.testing.assert_allclose(kl_statistic(qy, qz, "sec53"), expected, rtol=1e-14)

    def test_zero_when_equal(self):
        q = _q(1.0, 0.3)
        assert abs(kl_statistic(q, q)) < 1e-15

    def test_unknown_variant(self):
        with pytest.raises(StructureError):
            kl_statistic(_q(0, 1), _q(0, 1), "eq99")


class TestTailProbability:
    def test_ties_count(self):
        assert tail_probability(2.0, [2.0, 2.0, 2.0]) == 1.0
        assert tail_probability(2.0, [1.0, 2.0, 3.0, 0.5]) == 0.5

    def test_resolution(self):
        p = tail_probability(0.7, np.linspace(0, 1, 100))
        assert p * 100 == int(p * 100)

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=50), st.integers(0, 1000))
    def test_invariant_under_increasing_transforms(self, ref, obs):
        # an integer grid keeps distinct values distinct after rounding
        ref, obs = np.array(ref, dtype=float), float(obs)
        p = tail_probability(obs, ref)
        for f in (np.sqrt, np.log1p, lambda x: 3 * x + 1, np.arctan):
            assert tail_probability(f(obs), f(ref)) == p

    def test_needs_references(self):
        with pytest.raises(StructureError):
            tail_probability(1.0, [])


class TestReferenceData:
    def test_biased_normal_composition(self, rng):
        m = BiasedNormalModel(np.zeros(10), np.zeros(1000), 1.0, 1e12)
        q = GaussianVariational([0.8], [[1e-9]])
        W = simulate_reference_dataset(m, q, rng)
        assert W.shape == (1000,)
        assert abs(W.mean() - 0.8) < 3 / np.sqrt(1000)

    def test_biased_normal_draw_moments(self):
        m = BiasedNormalModel.simulate(np.random.default_rng(1), n1=50, n2=20)
        mean, var = m.cut_phi_moments()
        q = GaussianVariational([mean], [[np.sqrt(var)]])
        rng = np.random.default_rng(2)
        wbar = np.array([simulate_reference_dataset(m, q, rng).mean() for _ in range(4000)])
        # W-bar = phi + eta + noise/sqrt(n2)
        np.testing.assert_allclose(wbar.mean(), mean, atol=4 * np.sqrt((var + 0.01 + 0.05) / 4000))
        np.testing.assert_allclose(wbar.var(), var + 1 / 100 + 1 / 20, rtol=0.1)

    def test_hpv_counts(self, rng):
        m = HpvModel.synthetic(np.random.default_rng(0))
        q = GaussianVariational(m.init_theta()[:13], 0.1 * np.eye(13))
        for _ in range(20):
            try:
                W = simulate_reference_dataset(m, q, rng)
            except NumericError:
                # Poisson mean beyond the sampler's range
                continue
            assert W.shape == (13,) and np.all(W >= 0) and np.all(W == np.round(W))

    def test_agri_has_no_simulator(self):
        model, _ = AgriModel.synthetic(np.random.default_rng(0), n_A=10, n_M=30)
        with pytest.raises(UnsupportedCheckError, match="imputation_conflict"):
            conflict_check(model, 5)


class TestConflictCheck:
    def test_demo_is_far_in_the_tail(self, demo_model):
        rep = conflict_check(demo_model, 100, "mfvb", seed=1)
        assert rep.p_tilde == 0.0
        assert rep.p_display() == "< 1/100"
        assert np.all(rep.t_ref >= 0) and rep.t_obs >= 0

    def test_observed_data_as_reference_gives_one(self, demo_model):
        rep = conflict_check(demo_model, 20, "mfvb", seed=1, simulate=lambda i, rng: demo_model.w)
        assert rep.p_tilde == 1.0

    def test_bit_reproducible_and_job_count_free(self, demo_model):
        small = demo_model.with_w(demo_model.w[:50])
        a = conflict_check(small, 30, "mfvb", seed=9)
        b = conflict_check(small, 30, "mfvb", seed=9)
        c = conflict_check(small, 30, "mfvb", seed=9, n_jobs=2)
        assert np.array_equal(a.t_ref, b.t_ref) and np.array_equal(a.t_ref, c.t_ref)
        assert a.t_obs == c.t_obs

    def test_ffvi_recipe_agrees_with_mfvb_on_observed(self):
        m = BiasedNormalModel.simulate(np.random.default_rng(4), n1=50, n2=60, eta=0.5)
        fast = FfviRecipe(K_z=3000, K_y=3000, K_rep=300)
        a = conflict_check(m, 3, fast, seed=2)
        b = conflict_check(m, 3, MfvbRecipe(), seed=2)
        # the mean-field phi marginal is narrower than the full-covariance one; same order of magnitude
        assert 0.2 < a.t_obs / b.t_obs < 5

    def test_failed_replications_are_excluded(self, demo_model):
        def sim(i, rng):
            if i % 3 == 0:
                raise StructureError("boom")
            return demo_model.w

        with pytest.warns(RuntimeWarning):
            rep = conflict_check(demo_model, 9, "mfvb", seed=0, simulate=sim)
        assert rep.failed == [0, 3, 6] and rep.n_used == 6

    def test_report_serializes(self, demo_model):
        d = conflict_check(demo_model.with_w(demo_model.w[:10]), 4, "mfvb", seed=3).to_dict()
        assert d["S"] == 4 and len(d["t_ref"]) == 4 and d["statistic"] == "eq18"


class TestImputationConflict:
    def test_identical_trails(self, rng):
        M = rng.integers(0, 3, size=(200, 7))
        tab = imputation_conflict(M, M)
        assert tab.max_discrepancy == 0.0

    def test_point_masses_at_different_levels(self):
        a = np.zeros((10, 4), dtype=int)
        b = np.full((10, 4), 2)
        tab = imputation_conflict(a, b)
        assert tab.max_discrepancy == 1.0
        np.testing.assert_array_equal((tab.abs_diff == 1.0).sum(axis=1), 2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 50), st.integers(1, 8), st.integers(0, 1000))
    def test_rows_are_stochastic(self, n_draws, n_obs, seed):
        r = np.random.default_rng(seed)
        tab = imputation_conflict(r.integers(0, 3, (n_draws, n_obs)), r.integers(0, 3, (n_draws + 3, n_obs)))
        np.testing.assert_allclose(tab.q_cut.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(tab.q_full.sum(axis=1), 1.0, atol=1e-9)

    def test_row_layout(self):
        tab = imputation_conflict(np.array([[0, 1]]), np.array([[1, 1]]))
        rows = list(tab.rows())
        assert rows[0] == [0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]

    def test_empty_and_mismatched(self):
        with pytest.raises(StructureError):
            imputation_conflict(np.zeros((0, 3)), np.zeros((5, 3)))
        with pytest.raises(StructureError):
            imputation_conflict(np.zeros((5, 2)), np.zeros((5, 3)))

    def test_trail_frequencies_match_enumeration(self):
        """Given the trail's rho draws the M draws are exact, so frequencies track averaged masses."""
        model, _ = AgriModel.synthetic(np.random.default_rng(12), n_A=10, n_M=80)
        hm = model.hybrid_cut()
        res = run_algorithm1(hm, GaussianVariational.initial(hm.graph.dim, model.init_hm()), 3000,
                             np.random.default_rng(0), n_keep=2000, log_every=0)
        probs = np.array([conditional_probs(hm.log_masses(r)) for r in res.trail.rho])
        expected = probs.mean(axis=0)
        freq = imputation_conflict(res.trail, res.trail).q_cut
        se = np.sqrt(np.maximum((probs * (1 - probs)).mean(axis=0), 1e-4) / len(res.trail))
        assert np.all(np.abs(freq - expected) <= 3 * se)
