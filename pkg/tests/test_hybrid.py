import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from cutvi.errors import StructureError
from cutvi.ffvi import GaussianVariational, fit
from cutvi.hybrid import (
    N_KEEP,
    Trail,
    conditional_probs,
    run_algorithm1,
    sample_discrete_conditional,
    stage2_with_imputation,
)
from cutvi.models import AgriModel, ToyDiscreteModel
from cutvi.models.agri import hm_level_loglik
from cutvi.oracle import batch_means_se, mwg_full


@pytest.fixture(scope="module")
def agri():
    return AgriModel.synthetic(np.random.default_rng(3), n_A=60)


def _hm_values(model, rng):
    part = model.hm_graph().partition
    return part, part.to_constrained(model.init_hm() + 0.1 * rng.normal(size=part.dim))


class TestDiscreteConditional:
    def test_indistinguishable_levels(self, agri, rng):
        model, _ = agri
        hm = model.hybrid_cut()
        part, values = _hm_values(model, rng)
        values["beta"][2:] = 0.0
        probs = conditional_probs(hm.log_masses(part.flatten(
            {k: part[k].transform.to_unconstrained(v) for k, v in values.items()})))
        np.testing.assert_allclose(probs, 1 / 3, rtol=1e-12)

    def test_single_row_enumeration(self, agri, rng):
        model, _ = agri
        g = model.hm_graph()
        _, values = _hm_values(model, rng)
        d = dict(g.data)
        i = 7
        beta, R = values["beta"], np.exp(values["logR"][i])
        var = values["sigma2"][0] * (values["upsilon"][0] if d["wheat_A"][i] else 1.0)
        dens = []
        for x in ([1, R, 0, 0], [1, R, 1, 0], [1, R, 0, 1]):
            mean = np.dot(x, beta) + values["zeta"][d["loc_A"][i]]
            dens.append(np.exp(-0.5 * (d["Z_A"][i] - mean) ** 2 / var) / np.sqrt(2 * np.pi * var) / 3)
        dens = np.array(dens)
        probs = conditional_probs(hm_level_loglik(values, d))[i]
        np.testing.assert_allclose(probs, dens / dens.sum(), rtol=0, atol=1e-12)

    def test_observation_at_med_mean_with_tiny_variance(self, agri, rng):
        model, _ = agri
        g = model.hm_graph()
        _, values = _hm_values(model, rng)
        d = dict(g.data)
        beta, R = values["beta"], np.exp(values["logR"])
        d["Z_A"] = beta[0] + beta[1] * R + beta[2] + values["zeta"][d["loc_A"]]
        values["sigma2"] = np.array([0.1])
        values["upsilon"] = np.array([1.0])
        probs = conditional_probs(hm_level_loglik(values, d))
        assert np.all(probs[:, 1] >= 0.999)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-800, 800), min_size=3, max_size=3))
    def test_masses_normalized_without_underflow(self, lm):
        p = conditional_probs(np.array([lm]))
        assert np.all(np.isfinite(p)) and np.all(p >= 0)
        np.testing.assert_allclose(p.sum(), 1.0, rtol=0, atol=1e-12)
        ref = np.array(lm) - logsumexp(lm)
        keep = ref > -700
        np.testing.assert_allclose(np.log(p[0][keep]), ref[keep], atol=1e-9)

    def test_draws_lie_in_support(self, agri, rng):
        model, _ = agri
        hm = model.hybrid_cut()
        M = sample_discrete_conditional(hm, model.init_hm(), rng)
        assert M.shape == (model.data.n_A,)
        assert set(np.unique(M)) <= {0, 1, 2}


class TestTrail:
    def test_ring_buffer_keeps_last_draws_in_order(self):
        toy = ToyDiscreteModel(np.array([0.2, 0.1]), 0.5)
        res = run_algorithm1(toy.hybrid(), GaussianVariational.initial(1), 57, np.random.default_rng(0),
                             n_keep=10, log_every=0)
        np.testing.assert_array_equal(res.trail.iterations, np.arange(48, 58))
        assert len(res.trail) == 10
        assert N_KEEP == 10000

    def test_short_run_keeps_everything(self):
        toy = ToyDiscreteModel(np.array([0.2]), 0.5)
        res = run_algorithm1(toy.hybrid(), GaussianVariational.initial(1), 5, np.random.default_rng(0),
                             n_keep=100, log_every=0)
        np.testing.assert_array_equal(res.trail.iterations, np.arange(1, 6))

    def test_empty_trail_rejected(self):
        with pytest.raises(StructureError):
            Trail(np.zeros((0, 1)), np.zeros((0, 1), dtype=int), np.zeros(0, dtype=int))

    def test_level_frequencies(self):
        t = Trail(np.zeros((4, 1)), np.array([[0, 2], [1, 2], [0, 2], [0, 1]]), np.arange(4))
        np.testing.assert_allclose(t.level_frequencies(), [[0.75, 0.25, 0.0], [0.0, 0.25, 0.75]])


class TestAlgorithm1:
    def test_toy_level_probabilities(self):
        toy = ToyDiscreteModel(np.random.default_rng(1).normal(0.3, 1.0, size=3), x=1.2)
        res = run_algorithm1(toy.hybrid(), GaussianVariational.initial(1), 20000, np.random.default_rng(2),
                             log_every=0)
        np.testing.assert_allclose(res.trail.level_frequencies()[0], toy.exact_level_probs(), atol=0.03)

    def test_constant_discrete_factor_matches_plain_fit(self):
        toy = ToyDiscreteModel(np.array([0.4, -0.1, 0.7]), x=0.3, shifts=(0.0, 0.0, 0.0))
        K, keep = 20000, 10000
        res = run_algorithm1(toy.hybrid(), GaussianVariational.initial(1), K, np.random.default_rng(4),
                             n_keep=keep, log_every=0)
        plain = []
        fit(toy.graph().value_and_grad, GaussianVariational.initial(1), K, np.random.default_rng(5), log_every=0,
            estimator="entropy", callback=lambda k, th: plain.append(th[0]) if k > K - keep else None)
        a, b = res.trail.rho[:, 0], np.array(plain)
        se = np.hypot(batch_means_se(a)[0], batch_means_se(b)[0])
        assert abs(a.mean() - b.mean()) < 3 * se

    def test_trail_moments_approach_q(self):
        """With K below N_keep the trail holds warm-up draws; with K well above it does not."""
        toy = ToyDiscreteModel(np.array([2.0, 2.5, 1.5, 2.2]), x=3.0)
        gaps = []
        for K in (5000, 50000):
            res = run_algorithm1(toy.hybrid(), GaussianVariational.initial(1), K, np.random.default_rng(8),
                                 log_every=0)
            rho = res.trail.rho[:, 0]
            gaps.append(abs(rho.mean() - res.q.mu[0]) + abs(rho.std() - res.q.sd[0]))
        assert gaps[1] < gaps[0]
        assert gaps[1] < 0.05


class TestStage2:
    def test_length_one_trail_is_fixed_M(self, agri):
        model, truth = agri
        po = model.po_graph()
        init = GaussianVariational.initial(po.dim, model.init_po())
        one = Trail(np.zeros((1, 2)), truth["M_A"][None, :], np.array([0]))
        a = stage2_with_imputation(po, one, 8000, np.random.default_rng(1), init=init, log_every=0)
        fixed = po.with_data(M_A=truth["M_A"])
        b = fit(fixed.value_and_grad, init, 8000, np.random.default_rng(2), log_every=0, estimator="entropy")
        np.testing.assert_allclose(a.q.mu, b.q.mu, atol=0.05)

    def test_identical_entries_equal_length_one(self, agri):
        model, truth = agri
        po = model.po_graph()
        init = GaussianVariational.initial(po.dim, model.init_po())
        one = Trail(np.zeros((1, 2)), truth["M_A"][None, :], np.array([0]))
        many = Trail(np.zeros((50, 2)), np.tile(truth["M_A"], (50, 1)), np.arange(50))
        a = stage2_with_imputation(po, one, 500, np.random.default_rng(1), init=init, log_every=0)
        b = stage2_with_imputation(po, many, 500, np.random.default_rng(1), init=init, log_every=0)
        # the trail index draw consumes randomness, so only the fits (not the bits) agree
        np.testing.assert_allclose(a.q.mu, b.q.mu, atol=0.1)

    def test_gamma_agrees_with_mcmc(self, agri):
        model, truth = agri
        po = model.po_graph()
        gi = po.partition.index_of(["gamma"])[0]
        one = Trail(np.zeros((1, 2)), truth["M_A"][None, :], np.array([0]))
        mus = [stage2_with_imputation(po, one, 10000, np.random.default_rng(s),
                                      init=GaussianVariational.initial(po.dim, model.init_po()),
                                      log_every=0).q.mu[gi] for s in range(3)]
        ch = mwg_full(po.with_data(M_A=truth["M_A"]), 20000, np.random.default_rng(0), init=model.init_po())
        se = np.sqrt(np.var(mus, ddof=1) / len(mus) + ch.mcse()[gi] ** 2)
        assert abs(np.mean(mus) - ch.mean()[gi]) < 3 * se
