import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import expit, logit
from scipy.stats import beta as beta_dist

from cutvi.core import finite_difference_grad
from cutvi.errors import StructureError
from cutvi.ffvi import GaussianVariational, fit
from cutvi.models import AgriData, AgriModel, BiasedNormalModel, HpvModel, build_hpv
from cutvi.models.agri import (
    ALPHA_GAP_PRIOR,
    ALPHA_LOW_PRIOR,
    G_PRIOR,
    GAMMA_PRIOR,
    po_log_masses,
)
from cutvi.models.biased_normal import DEMO
from cutvi.models.hpv import ETA_PRIOR_VAR

LOG_2PI = np.log(2 * np.pi)


def _check_factor_gradients(g, rng, n_points=20, spread=0.3, center=None, data_fn=None):
    center = np.zeros(g.partition.dim) if center is None else center
    for _ in range(n_points):
        values = g.partition.to_constrained(center + spread * rng.normal(size=g.partition.dim))
        data = g.data if data_fn is None else data_fn(rng)
        for f in g.factors:
            if not f.has_analytic_grad or not f.blocks:
                continue
            ana = f.gradient(values, data)
            num = finite_difference_grad(f, values, data)
            for b in f.blocks:
                scale = max(1.0, np.max(np.abs(ana[b])))
                np.testing.assert_allclose(ana[b], num[b], rtol=1e-5, atol=1e-5 * scale,
                                           err_msg=f"{f.name} / {b}")


class TestFactorGradients:
    def test_biased_normal(self, rng):
        m = BiasedNormalModel.simulate(rng, n1=20, n2=30)
        _check_factor_gradients(m.graph(), rng, spread=1.0)

    def test_hpv(self, rng):
        m = HpvModel.synthetic(np.random.default_rng(0))
        _check_factor_gradients(m.graph(), rng, center=m.init_theta())

    def test_agri(self, rng):
        model, _ = AgriModel.synthetic(np.random.default_rng(1), n_A=15, n_M=40, q_hm=8, q_po=3)
        g = model.graph()
        center = np.concatenate([model.init_hm(), model.init_po()])

        def data_fn(r):
            d = dict(g.data)
            d["M_A"] = r.integers(0, 3, size=model.data.n_A)
            return d

        _check_factor_gradients(g, rng, center=center, spread=0.2, data_fn=data_fn)


class TestBiasedNormal:
    def test_demo_settings(self):
        assert DEMO == {"n1": 100, "n2": 1000, "delta1": 1.0, "delta2": 100.0, "phi": 0.0, "eta": 1.0}
        m = BiasedNormalModel.demo(np.random.default_rng(0))
        assert m.n1 == 100 and m.n2 == 1000

    def test_no_w_cut_equals_full(self, rng):
        m = BiasedNormalModel(rng.normal(size=40), [], 1.0, 100.0)
        for a, b in zip(m.cut_posterior(), m.full_posterior()):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_simulated_w_mean(self, rng):
        m = BiasedNormalModel(np.zeros(5), np.zeros(1000))
        w = m.simulate_w({"phi": np.array([0.3]), "eta": np.array([0.5])}, rng)
        assert w.shape == (1000,)
        assert abs(w.mean() - 0.8) < 4 / np.sqrt(1000)

    def test_cut_posterior_matches_conditioning(self, rng):
        m = BiasedNormalModel.simulate(rng, n1=30, n2=40, delta1=2.0, delta2=5.0)
        mean, cov = m.cut_posterior()
        m_phi, v_phi = m.cut_phi_moments()
        np.testing.assert_allclose([mean[0], cov[0, 0]], [m_phi, v_phi], rtol=1e-14)
        draws = m.sample_eta_given_phi(np.full(20000, m_phi), rng)
        np.testing.assert_allclose(draws.var(), cov[1, 1] - m.cut_slope() ** 2 * v_phi, rtol=0.05)

    def test_rejects_non_positive_precision(self):
        with pytest.raises(StructureError):
            BiasedNormalModel([0.0], [0.0], 0.0, 1.0)


class TestHpv:
    def test_symmetric_counts_give_zero_gradient(self):
        m = HpvModel([50.0, 10.0], [100.0, 20.0], [3.0, 4.0], [1e4, 1e4])
        g = m.graph().phi_module()
        np.testing.assert_allclose(g.grad(np.zeros(2)), 0.0, atol=1e-12)

    def test_eta_prior_scale(self):
        assert ETA_PRIOR_VAR == 1000.0
        g = HpvModel.synthetic(np.random.default_rng(0)).graph()
        f = g.factor("prior_eta")
        lo = f.evaluate({"eta": np.zeros(2)}, g.data)
        hi = f.evaluate({"eta": np.array([0.0, np.sqrt(1000.0)])}, g.data)
        np.testing.assert_allclose(lo, -np.log(2 * np.pi * 1000.0), rtol=1e-14)
        np.testing.assert_allclose(lo - hi, 0.5, rtol=1e-12)

    def test_invalid_counts(self):
        with pytest.raises(StructureError):
            build_hpv([5.0, 12.0], [10.0, 10.0], [1.0, 1.0], [1.0, 1.0])
        with pytest.raises(StructureError):
            build_hpv([5.0], [10.0], [1.5], [1.0])

    def test_phi_module_fit_matches_quadrature(self):
        """One country: a Gaussian q over logit(gamma) against the exact logit-Beta moments."""
        a, b = 31.0, 71.0
        m = HpvModel([a - 1], [a + b - 2], [1.0], [1.0])

        def dens(u):
            return beta_dist(a, b).pdf(expit(u)) * expit(u) * expit(-u)

        lo, hi = logit(beta_dist(a, b).ppf([1e-12, 1 - 1e-12]))
        mean = integrate.quad(lambda u: u * dens(u), lo, hi)[0]
        sd = np.sqrt(integrate.quad(lambda u: (u - mean) ** 2 * dens(u), lo, hi)[0])
        g = m.graph().phi_module()
        res = fit(g.value_and_grad, GaussianVariational.initial(1, [0.0]), 20000, np.random.default_rng(0),
                  log_every=0)
        assert abs(res.q.mu[0] - mean) < 0.05
        np.testing.assert_allclose(res.q.sd[0], sd, rtol=0.1)

    def test_flat_slope_ignores_gamma(self):
        m = HpvModel.synthetic(np.random.default_rng(0))
        eta = np.array([-7.0, 0.0])
        ws = [m.simulate_w({"eta": eta, "gamma": g}, np.random.default_rng(4))
              for g in (np.full(13, 0.1), np.full(13, 0.9))]
        assert np.array_equal(ws[0], ws[1])
        np.testing.assert_allclose(ws[0].mean(), np.mean(m.T * np.exp(-7.0)), rtol=0.2)
        g = m.graph()
        f = g.factor("lik_w")
        vals = [f.evaluate({"eta": eta, "gamma": np.full(13, p)}, g.data) for p in (0.1, 0.9)]
        assert vals[0] == vals[1]

    def test_phi_sampler_is_beta(self):
        m = HpvModel.synthetic(np.random.default_rng(0))
        gam = expit(m.sample_phi_given_z(np.random.default_rng(1), 20000))
        a, b = m.gamma_posterior()
        np.testing.assert_allclose(gam.mean(axis=0), a / (a + b), rtol=0.01)


class TestAgri:
    def test_prior_constants(self):
        assert G_PRIOR == 1000.0
        assert GAMMA_PRIOR == (0.0, 4.0)
        assert ALPHA_LOW_PRIOR == (0.0, 1.5)
        assert ALPHA_GAP_PRIOR == (-5.0, 7.0)
        model, _ = AgriModel.synthetic(np.random.default_rng(0), n_A=5, n_M=20, q_hm=4, q_po=2)
        g = model.graph()
        np.testing.assert_allclose(g.factor("prior_beta").evaluate({"beta": np.zeros(4)}, g.data),
                                   -2 * np.log(2 * np.pi * 1000.0), rtol=1e-14)
        np.testing.assert_allclose(g.factor("prior_gamma").evaluate({"gamma": np.zeros(1)}, g.data),
                                   -0.5 * np.log(2 * np.pi * 4.0), rtol=1e-14)

    def test_cumulative_logits_without_covariates(self):
        S = np.linspace(-2, 2, 7)
        lm = po_log_masses(-0.5, 2.0, 0.0, np.zeros(7), S)
        cum = np.cumsum(np.exp(lm), axis=1)
        np.testing.assert_allclose(cum[:, 0], expit(-0.5), rtol=1e-13)
        np.testing.assert_allclose(cum[:, 1], expit(1.5), rtol=1e-13)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-20, 20), st.floats(1e-6, 20), st.floats(-5, 5), st.floats(-3, 3), st.floats(-5, 5))
    def test_masses_are_probabilities(self, alpha, gap, gamma, xi, S):
        p = np.exp(po_log_masses(alpha, gap, gamma, np.array([xi]), np.array([S])))
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p.sum(), 1.0, rtol=0, atol=1e-12)

    def test_row_permutation_invariance(self, rng):
        model, _ = AgriModel.synthetic(np.random.default_rng(2), n_A=12, n_M=30, q_hm=6, q_po=3)
        d = model.data
        pa, pm = rng.permutation(d.n_A), rng.permutation(d.n_M)
        perm = AgriData(
            Z_A=d.Z_A[pa], wheat_A=d.wheat_A[pa], loc_A=d.loc_A[pa], po_loc_A=d.po_loc_A[pa], S_A=d.S_A[pa],
            Z_M=d.Z_M[pm], wheat_M=d.wheat_M[pm], loc_M=d.loc_M[pm], R_M=d.R_M[pm], M_M=d.M_M[pm],
            location_labels=d.location_labels, po_location_labels=d.po_location_labels,
            logR_mean=d.logR_mean[pa], logR_var=d.logR_var[pa],
        )
        g, h = model.graph(), AgriModel(perm).graph()
        M = rng.integers(0, 3, size=d.n_A)
        g, h = g.with_data(M_A=M), h.with_data(M_A=M[pa])
        for _ in range(3):
            theta = np.concatenate([model.init_hm(), model.init_po()]) + 0.1 * rng.normal(size=g.partition.dim)
            theta_p = theta.copy()
            theta_p[: d.n_A] = theta[: d.n_A][pa]
            np.testing.assert_allclose(h.log_joint(theta_p), g.log_joint(theta), rtol=1e-12)

    def test_modules(self):
        model, _ = AgriModel.synthetic(np.random.default_rng(0), n_A=5, n_M=20, q_hm=4, q_po=2)
        hm, po = model.hm_graph(), model.po_graph()
        assert list(hm.partition.names) == ["logR", "beta", "sigma2", "zeta", "sigma_zeta2", "upsilon"]
        assert list(po.partition.names) == ["gamma", "alpha_low", "alpha_gap", "xi", "sigma_xi"]
        assert hm.dim + po.dim == model.graph().dim
        assert "lik_po" not in hm.factor_names

    def test_bad_rows(self):
        with pytest.raises(StructureError):
            AgriData(Z_A=[1.0, 2.0], wheat_A=[0], loc_A=[0, 0], po_loc_A=[0, 0], S_A=[0, 0],
                     Z_M=[], wheat_M=[], loc_M=[], R_M=[], M_M=[])
