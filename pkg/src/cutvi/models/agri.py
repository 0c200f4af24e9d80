"""Agricultural extensification model: HM regression + PO imputation module.

HM module (phi side), pooled over archaeological (A) and modern (M) rows::

    Z = (1, R, D_med, D_high)' beta + zeta_loc + eps,
    eps ~ N(0, sigma2) for barley, N(0, upsilon * sigma2) for wheat.

Rainfall R_A and manure level M_A are missing for archaeological rows;
``log R_A`` gets componentwise normal priors and M_A is a discrete latent
with a uniform prior on {low, med, high} (encoded 0, 1, 2).

PO module (eta side), archaeological rows only::

    logit P(M <= m) = alpha_m - gamma * S - xi_loc,   m in {low, med}

with ``alpha_med = alpha_low + exp(alpha_gap)`` so the cut points stay
ordered.

The discrete M_A is not a parameter block: factors read it from
``data["M_A"]`` and the hybrid sampler substitutes a fresh draw at every
iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from cutvi.core import (
    IDENTITY,
    LOG,
    Block,
    BlockPartition,
    Factor,
    FactorGraph,
    GeneralizedLogit,
)
from cutvi.errors import StructureError

G_PRIOR = 1000.0
LOG_2PI = float(np.log(2.0 * np.pi))
LEVELS = ("low", "med", "high")
N_LEVELS = 3
CROPS = ("barley", "wheat")

SIGMA2_BOUNDS = (0.1, 5.0)
SIGMA_XI_UPPER = 3.5
# PO priors given as (mean, variance).
GAMMA_PRIOR = (0.0, 4.0)
ALPHA_LOW_PRIOR = (0.0, 1.5)
ALPHA_GAP_PRIOR = (-5.0, 7.0)

# Synthetic default for the log-rainfall priors of archaeological rows.
DEFAULT_LOGR_PRIOR = (np.log(0.35), 0.05**2)


def _normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def _hm_design(R, M):
    n = R.size
    X = np.empty((n, 4))
    X[:, 0] = 1.0
    X[:, 1] = R
    X[:, 2] = M == 1
    X[:, 3] = M == 2
    return X


# -- HM factors ---------------------------------------------------------------


def _gaussian_rows(resid, var):
    return float(np.sum(-0.5 * (LOG_2PI + np.log(var)) - 0.5 * resid**2 / var))


def _row_var(v, wheat):
    s2 = v["sigma2"][0]
    return np.where(wheat, v["upsilon"][0] * s2, s2)


def _lik_modern(v, d):
    var = _row_var(v, d["wheat_M"])
    resid = d["Z_M"] - d["X_M"] @ v["beta"] - v["zeta"][d["loc_M"]]
    return _gaussian_rows(resid, var)


def _variance_grads(v, resid, var, wheat):
    # d/dvar of the Gaussian log density, pushed through var = sigma2 * (upsilon if wheat)
    dvar = -0.5 / var + 0.5 * resid**2 / var**2
    s2, ups = v["sigma2"][0], v["upsilon"][0]
    g_s2 = np.sum(dvar * np.where(wheat, ups, 1.0))
    g_ups = np.sum(dvar[wheat]) * s2
    return np.array([g_s2]), np.array([g_ups])


def _lik_modern_grad(v, d):
    var = _row_var(v, d["wheat_M"])
    resid = d["Z_M"] - d["X_M"] @ v["beta"] - v["zeta"][d["loc_M"]]
    scaled = resid / var
    g_zeta = np.bincount(d["loc_M"], weights=scaled, minlength=v["zeta"].size)
    g_s2, g_ups = _variance_grads(v, resid, var, d["wheat_M"])
    return {"beta": d["X_M"].T @ scaled, "zeta": g_zeta, "sigma2": g_s2, "upsilon": g_ups}


def _arch_resid(v, d):
    R = np.exp(v["logR"])
    X = _hm_design(R, d["M_A"])
    return R, X, d["Z_A"] - X @ v["beta"] - v["zeta"][d["loc_A"]]


def _lik_arch(v, d):
    _, _, resid = _arch_resid(v, d)
    return _gaussian_rows(resid, _row_var(v, d["wheat_A"]))


def _lik_arch_grad(v, d):
    R, X, resid = _arch_resid(v, d)
    var = _row_var(v, d["wheat_A"])
    scaled = resid / var
    g_zeta = np.bincount(d["loc_A"], weights=scaled, minlength=v["zeta"].size)
    g_s2, g_ups = _variance_grads(v, resid, var, d["wheat_A"])
    return {
        "logR": scaled * v["beta"][1] * R,
        "beta": X.T @ scaled,
        "zeta": g_zeta,
        "sigma2": g_s2,
        "upsilon": g_ups,
    }


def _uniform_logpdf(lo, hi, block):
    width = np.log(hi - lo)

    def f(v, d):
        x = v[block]
        return float(-width * x.size) if np.all((x > lo) & (x < hi)) else -np.inf

    def g(v, d):
        return {block: np.zeros_like(v[block])}

    return f, g


def _normal_prior(block, mean, var):
    def f(v, d):
        return float(np.sum(_normal_logpdf(v[block], mean, var)))

    def g(v, d):
        return {block: -(v[block] - mean) / var}

    return f, g


def _lognormal_prior(block, mean, var):
    """log(x) ~ N(mean, var), written as a density on x."""

    def f(v, d):
        x = v[block]
        return float(np.sum(_normal_logpdf(np.log(x), mean, var) - np.log(x)))

    def g(v, d):
        x = v[block]
        return {block: (-(np.log(x) - mean) / var - 1.0) / x}

    return f, g


def _logR_prior(v, d):
    return float(np.sum(_normal_logpdf(v["logR"], d["logR_mean"], d["logR_var"])))


def _logR_prior_grad(v, d):
    return {"logR": -(v["logR"] - d["logR_mean"]) / d["logR_var"]}


def _zeta_prior(v, d):
    s2 = v["sigma_zeta2"][0]
    return float(np.sum(_normal_logpdf(v["zeta"], 0.0, s2)))


def _zeta_prior_grad(v, d):
    s2 = v["sigma_zeta2"][0]
    z = v["zeta"]
    return {"zeta": -z / s2, "sigma_zeta2": np.array([np.sum(-0.5 / s2 + 0.5 * z**2 / s2**2)])}


def _M_prior(v, d):
    return -np.log(3.0) * d["Z_A"].size


# -- PO factors ---------------------------------------------------------------


def po_log_masses(alpha_low, gap, gamma, xi_rows, S) -> np.ndarray:
    """Log of ``(p_low, p_med - p_low, 1 - p_med)`` per row, shape ``(n, 3)``.

    ``gap = alpha_med - alpha_low > 0``; ``xi_rows`` is the location effect
    already gathered per row.
    """
    a = alpha_low - gamma * S - xi_rows
    b = a + gap
    out = np.empty((np.size(a), 3))
    out[:, 0] = log_expit(a)
    out[:, 1] = log_expit(b) + log_expit(-a) + np.log(-np.expm1(-gap))
    out[:, 2] = log_expit(-b)
    return out


def _lik_po(v, d):
    gap = v["alpha_gap"][0]
    lm = po_log_masses(v["alpha_low"][0], gap, v["gamma"][0], v["xi"][d["po_loc_A"]], d["S_A"])
    return float(np.sum(lm[np.arange(lm.shape[0]), d["M_A"]]))


def _lik_po_grad(v, d):
    gap = v["alpha_gap"][0]
    S, loc, M = d["S_A"], d["po_loc_A"], d["M_A"]
    a = v["alpha_low"][0] - v["gamma"][0] * S - v["xi"][loc]
    b = a + gap
    r = 1.0 / np.expm1(gap)
    da = np.where(M == 0, expit(-a), np.where(M == 1, -expit(a) - r, 0.0))
    db = np.where(M == 1, expit(-b) + r, np.where(M == 2, -expit(b), 0.0))
    s = da + db
    return {
        "gamma": np.array([-(s @ S)]),
        "alpha_low": np.array([s.sum()]),
        "alpha_gap": np.array([db.sum()]),
        "xi": -np.bincount(loc, weights=s, minlength=v["xi"].size),
    }


def _xi_prior(v, d):
    s = v["sigma_xi"][0]
    return float(np.sum(_normal_logpdf(v["xi"], 0.0, s * s)))


def _xi_prior_grad(v, d):
    s = v["sigma_xi"][0]
    x = v["xi"]
    return {"xi": -x / (s * s), "sigma_xi": np.array([np.sum(-1.0 / s + x**2 / s**3)])}


# -- data ---------------------------------------------------------------------


@dataclass(frozen=True)
class AgriData:
    """Archaeological and modern rows with integer-coded labels.

    ``loc_*`` index HM location slots; ``po_loc_A`` indexes PO location slots.
    Crops are booleans (True = wheat).  Manure levels are 0/1/2.
    """

    Z_A: np.ndarray
    wheat_A: np.ndarray
    loc_A: np.ndarray
    po_loc_A: np.ndarray
    S_A: np.ndarray
    Z_M: np.ndarray
    wheat_M: np.ndarray
    loc_M: np.ndarray
    R_M: np.ndarray
    M_M: np.ndarray
    location_labels: tuple = ()
    po_location_labels: tuple = ()
    logR_mean: np.ndarray | None = None
    logR_var: np.ndarray | None = None

    def __post_init__(self):
        conv = {
            "Z_A": float, "wheat_A": bool, "loc_A": int, "po_loc_A": int, "S_A": float,
            "Z_M": float, "wheat_M": bool, "loc_M": int, "R_M": float, "M_M": int,
        }
        for name, typ in conv.items():
            object.__setattr__(self, name, np.asarray(getattr(self, name)).astype(typ).reshape(-1))
        nA = self.Z_A.size
        for name in ("wheat_A", "loc_A", "po_loc_A", "S_A"):
            if getattr(self, name).size != nA:
                raise StructureError(f"{name} has {getattr(self, name).size} rows, expected {nA}")
        nM = self.Z_M.size
        for name in ("wheat_M", "loc_M", "R_M", "M_M"):
            if getattr(self, name).size != nM:
                raise StructureError(f"{name} has {getattr(self, name).size} rows, expected {nM}")
        if nM and (self.M_M.min() < 0 or self.M_M.max() > 2):
            raise StructureError("modern manure levels must be in {0, 1, 2}")
        mean, var = DEFAULT_LOGR_PRIOR
        lm = np.full(nA, mean) if self.logR_mean is None else np.broadcast_to(self.logR_mean, (nA,)).astype(float)
        lv = np.full(nA, var) if self.logR_var is None else np.broadcast_to(self.logR_var, (nA,)).astype(float)
        if np.any(lv <= 0):
            raise StructureError("log-rainfall prior variances must be positive")
        object.__setattr__(self, "logR_mean", np.array(lm))
        object.__setattr__(self, "logR_var", np.array(lv))

    @property
    def n_A(self) -> int:
        return self.Z_A.size

    @property
    def n_M(self) -> int:
        return self.Z_M.size

    @property
    def q_hm(self) -> int:
        n = max(self.loc_A.max(initial=-1), self.loc_M.max(initial=-1)) + 1
        return max(n, len(self.location_labels))

    @property
    def q_po(self) -> int:
        return max(self.po_loc_A.max(initial=-1) + 1, len(self.po_location_labels))

    def graph_data(self) -> dict:
        return {
            "Z_A": self.Z_A, "wheat_A": self.wheat_A, "loc_A": self.loc_A, "po_loc_A": self.po_loc_A,
            "S_A": self.S_A, "Z_M": self.Z_M, "wheat_M": self.wheat_M, "loc_M": self.loc_M,
            "R_M": self.R_M, "M_M": self.M_M, "X_M": _hm_design(self.R_M, self.M_M),
            "logR_mean": self.logR_mean, "logR_var": self.logR_var,
            "M_A": np.zeros(self.n_A, dtype=int),
        }


# -- graphs ---------------------------------------------------------------------


def hm_blocks(data: AgriData) -> list[Block]:
    lo, hi = SIGMA2_BOUNDS
    return [
        Block("logR", data.n_A, "phi", IDENTITY),
        Block("beta", 4, "phi", IDENTITY),
        Block("sigma2", 1, "phi", GeneralizedLogit(lo, hi)),
        Block("zeta", data.q_hm, "phi", IDENTITY),
        Block("sigma_zeta2", 1, "phi", GeneralizedLogit(lo, hi)),
        Block("upsilon", 1, "phi", LOG),
    ]


def po_blocks(data: AgriData) -> list[Block]:
    return [
        Block("gamma", 1, "eta", IDENTITY),
        Block("alpha_low", 1, "eta", IDENTITY),
        Block("alpha_gap", 1, "eta", LOG),
        Block("xi", data.q_po, "eta", IDENTITY),
        Block("sigma_xi", 1, "eta", GeneralizedLogit(0.0, SIGMA_XI_UPPER)),
    ]


def hm_factors(g: float = G_PRIOR) -> list[Factor]:
    lo, hi = SIGMA2_BOUNDS
    return [
        Factor("prior_logR", ("logR",), _logR_prior, _logR_prior_grad, kind="prior"),
        Factor("prior_beta", ("beta",), *_normal_prior("beta", 0.0, g), kind="prior"),
        Factor("prior_sigma2", ("sigma2",), *_uniform_logpdf(lo, hi, "sigma2"), kind="prior"),
        Factor("prior_sigma_zeta2", ("sigma_zeta2",), *_uniform_logpdf(lo, hi, "sigma_zeta2"), kind="prior"),
        Factor("prior_upsilon", ("upsilon",), *_lognormal_prior("upsilon", 0.0, g), kind="prior"),
        Factor("prior_zeta", ("zeta", "sigma_zeta2"), _zeta_prior, _zeta_prior_grad, kind="prior"),
        Factor("prior_M", (), _M_prior, lambda v, d: {}, kind="prior"),
        Factor("lik_modern", ("beta", "zeta", "sigma2", "upsilon"), _lik_modern, _lik_modern_grad),
        Factor("lik_arch", ("logR", "beta", "zeta", "sigma2", "upsilon"), _lik_arch, _lik_arch_grad),
    ]


def po_factors() -> list[Factor]:
    return [
        Factor("prior_gamma", ("gamma",), *_normal_prior("gamma", *GAMMA_PRIOR), kind="prior"),
        Factor("prior_alpha_low", ("alpha_low",), *_normal_prior("alpha_low", *ALPHA_LOW_PRIOR), kind="prior"),
        Factor("prior_alpha_gap", ("alpha_gap",), *_lognormal_prior("alpha_gap", *ALPHA_GAP_PRIOR), kind="prior"),
        Factor("prior_sigma_xi", ("sigma_xi",), *_uniform_logpdf(0.0, SIGMA_XI_UPPER, "sigma_xi"), kind="prior"),
        Factor("prior_xi", ("xi", "sigma_xi"), _xi_prior, _xi_prior_grad, kind="prior"),
        Factor("lik_po", ("gamma", "alpha_low", "alpha_gap", "xi"), _lik_po, _lik_po_grad),
    ]


def build_agri(data: AgriData, g: float = G_PRIOR) -> FactorGraph:
    """Full two-module graph: HM blocks (phi side) then PO blocks (eta side).

    ``lik_po`` is the factor whose feedback into the imputed M_A is cut.
    """
    part = BlockPartition(hm_blocks(data) + po_blocks(data))
    return FactorGraph(part, hm_factors(g) + po_factors(), data.graph_data())


# -- discrete conditionals ------------------------------------------------------


def hm_level_loglik(values, d) -> np.ndarray:
    """``log N(Z_i; x_i(m)' beta + zeta, v_i)`` for every row and level, ``(n_A, 3)``."""
    beta = values["beta"]
    R = np.exp(values["logR"])
    base = d["Z_A"] - beta[0] - beta[1] * R - values["zeta"][d["loc_A"]]
    shifts = np.array([0.0, beta[2], beta[3]])
    resid = base[:, None] - shifts[None, :]
    var = _row_var(values, d["wheat_A"])[:, None]
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * resid**2 / var


def po_level_logmass(values, d) -> np.ndarray:
    return po_log_masses(
        values["alpha_low"][0], values["alpha_gap"][0], values["gamma"][0],
        values["xi"][d["po_loc_A"]], d["S_A"],
    )


@dataclass(frozen=True)
class AgriModel:
    data: AgriData
    g: float = G_PRIOR

    name = "agri"
    cut_factors = ("lik_po",)

    def graph(self) -> FactorGraph:
        return build_agri(self.data, self.g)

    def hm_graph(self) -> FactorGraph:
        return self.graph().phi_module()

    def po_graph(self) -> FactorGraph:
        return self.graph().subgraph(self.graph().partition.module_names("eta"))

    def hybrid_cut(self):
        """Stage-1 hybrid target: HM module with M_A ~ p(M_A | rho, z)."""
        from cutvi.hybrid import HybridModel

        g = self.hm_graph()
        part = g.partition

        def log_masses(theta):
            return hm_level_loglik(part.to_constrained(theta), g.data) - np.log(3.0)

        return HybridModel(g, log_masses)

    def hybrid_full(self):
        """Uncut hybrid target: both modules, M_A informed by the PO module too."""
        from cutvi.hybrid import HybridModel

        g = self.graph()
        part = g.partition

        def log_masses(theta):
            v = part.to_constrained(theta)
            return hm_level_loglik(v, g.data) + po_level_logmass(v, g.data)

        return HybridModel(g, log_masses)

    def init_hm(self) -> np.ndarray:
        """Least-squares start for the HM blocks on the unconstrained scale."""
        d = self.data
        X = _hm_design(d.R_M, d.M_M)
        beta = np.linalg.lstsq(X, d.Z_M, rcond=None)[0] if d.n_M >= 4 else np.zeros(4)
        resid = d.Z_M - X @ beta
        zeta = np.zeros(d.q_hm)
        if d.n_M:
            sums = np.bincount(d.loc_M, weights=resid, minlength=d.q_hm)
            counts = np.bincount(d.loc_M, minlength=d.q_hm)
            zeta = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
            s2 = float(np.clip(np.var(resid - zeta[d.loc_M]), 0.15, 4.5))
            sz = float(np.clip(np.var(zeta[counts > 0]) if np.any(counts > 0) else 1.0, 0.15, 4.5))
        else:
            s2, sz = 1.0, 1.0
        values = {
            "logR": d.logR_mean, "beta": beta, "sigma2": [s2], "zeta": zeta,
            "sigma_zeta2": [sz], "upsilon": [1.0],
        }
        return BlockPartition(hm_blocks(d)).to_unconstrained(values)

    def init_po(self) -> np.ndarray:
        values = {"gamma": [0.0], "alpha_low": [-0.5], "alpha_gap": [1.0],
                  "xi": np.zeros(self.data.q_po), "sigma_xi": [1.0]}
        return BlockPartition(po_blocks(self.data)).to_unconstrained(values)

    # -- synthetic data ----------------------------------------------------

    @classmethod
    def synthetic(cls, rng, n_A=40, n_M=200, q_hm=24, q_po=5, beta=(1.0, 1.0, 3.0, 6.0),
                  sigma2=0.25, upsilon=1.2, sigma_zeta=0.5, gamma=-1.0, alpha=(-0.5, 1.5),
                  sigma_xi=0.5, size_sd=1.0, po_misspecified=False, steepness=4.0, n_reversed=3,
                  wheat_frac=0.3):
        """Generate both datasets plus the true M_A and log R_A.

        Archaeological rows sit in HM location slots ``0..q_po-1`` (which are
        also the PO slots); modern rows cover all ``q_hm`` slots.

        With ``po_misspecified`` manuring falls steeply with size (slope
        ``-steepness``) except at the ``n_reversed`` largest sites, which are
        all heavily manured.  A PO module, monotone in size, cannot represent
        this.

        Returns ``(model, truth)`` where ``truth`` holds the generating values.
        """
        beta = np.asarray(beta, dtype=float)
        zeta = rng.normal(0.0, sigma_zeta, size=q_hm)
        # modern rows, all three levels equally represented
        loc_M = rng.integers(0, q_hm, size=n_M)
        wheat_M = rng.random(n_M) < 0.5
        R_M = rng.uniform(0.2, 0.6, size=n_M)
        M_M = rng.integers(0, 3, size=n_M)
        var_M = np.where(wheat_M, upsilon * sigma2, sigma2)
        Z_M = _hm_design(R_M, M_M) @ beta + zeta[loc_M] + rng.normal(0.0, np.sqrt(var_M))
        # archaeological rows
        po_loc = rng.integers(0, q_po, size=n_A)
        S_A = rng.normal(0.0, size_sd, size=n_A)
        xi = rng.normal(0.0, sigma_xi, size=q_po)
        slope = -steepness if po_misspecified else gamma
        lm = po_log_masses(alpha[0], alpha[1] - alpha[0], slope, xi[po_loc], S_A)
        u = rng.random(n_A)
        M_A = np.minimum((u[:, None] > np.cumsum(np.exp(lm), axis=1)).sum(axis=1), 2)
        if po_misspecified and n_reversed > 0:
            M_A[np.argsort(S_A)[-n_reversed:]] = 2
        logR_mean, logR_var = DEFAULT_LOGR_PRIOR
        logR_A = rng.normal(logR_mean, np.sqrt(logR_var), size=n_A)
        wheat_A = rng.random(n_A) < wheat_frac
        var_A = np.where(wheat_A, upsilon * sigma2, sigma2)
        Z_A = _hm_design(np.exp(logR_A), M_A) @ beta + zeta[po_loc] + rng.normal(0.0, np.sqrt(var_A))
        data = AgriData(
            Z_A=Z_A, wheat_A=wheat_A, loc_A=po_loc, po_loc_A=po_loc, S_A=S_A,
            Z_M=Z_M, wheat_M=wheat_M, loc_M=loc_M, R_M=R_M, M_M=M_M,
            location_labels=tuple(f"L{i + 1:02d}" for i in range(q_hm)),
            po_location_labels=tuple(f"L{i + 1:02d}" for i in range(q_po)),
        )
        truth = {
            "M_A": M_A, "logR_A": logR_A, "beta": beta, "zeta": zeta, "sigma2": sigma2,
            "upsilon": upsilon, "gamma": slope, "alpha": np.asarray(alpha), "xi": xi,
        }
        return cls(data), truth
