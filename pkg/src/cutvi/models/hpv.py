"""HPV prevalence and cervical cancer incidence.

phi-module: ``z_i ~ Binomial(n_i, gamma_i)``, ``gamma_i ~ Beta(1, 1)``, with
``phi_i = logit(gamma_i)`` as the unconstrained coordinates.

eta-module: ``w_i ~ Poisson(T_i exp(eta_1 + eta_2 gamma_i))``,
``eta_1, eta_2 ~ N(0, 1000)``.

Factors are vectorized over countries, so ``lik_z`` is the product of the
per-country binomial terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logit

from cutvi.core import LOGIT, Block, BlockPartition, Factor, FactorGraph
from cutvi.errors import NumericError, StructureError

ETA_PRIOR_VAR = 1000.0
# largest mean numpy's Poisson sampler accepts, with margin
POISSON_MAX = 1e18


def _lik_z(v, d):
    g = v["gamma"]
    with np.errstate(divide="ignore"):
        return float(np.sum(d["log_binom"] + d["z"] * np.log(g) + (d["n"] - d["z"]) * np.log1p(-g)))


def _lik_z_grad(v, d):
    g = v["gamma"]
    return {"gamma": d["z"] / g - (d["n"] - d["z"]) / (1.0 - g)}


def _prior_gamma(v, d):
    g = v["gamma"]
    return 0.0 if np.all((g > 0) & (g < 1)) else -np.inf


def _prior_gamma_grad(v, d):
    return {"gamma": np.zeros_like(v["gamma"])}


def _prior_eta(v, d):
    e = v["eta"]
    return float(-0.5 * e @ e / ETA_PRIOR_VAR - e.size * 0.5 * np.log(2.0 * np.pi * ETA_PRIOR_VAR))


def _prior_eta_grad(v, d):
    return {"eta": -v["eta"] / ETA_PRIOR_VAR}


def _lik_w(v, d):
    e, g = v["eta"], v["gamma"]
    log_mu = d["log_T"] + e[0] + e[1] * g
    return float(np.sum(d["w"] * log_mu - np.exp(log_mu) - d["log_w_fact"]))


def _lik_w_grad(v, d):
    e, g = v["eta"], v["gamma"]
    resid = d["w"] - np.exp(d["log_T"] + e[0] + e[1] * g)
    return {"gamma": resid * e[1], "eta": np.array([resid.sum(), resid @ g])}


def build_hpv(z, n, w, T) -> FactorGraph:
    z, n, w, T = (np.asarray(a, dtype=float).reshape(-1) for a in (z, n, w, T))
    k = z.size
    if not (n.size == w.size == T.size == k):
        raise StructureError("HPV columns z, n, w, T must have equal length")
    if np.any(z < 0) or np.any(z > n):
        bad = int(np.flatnonzero((z < 0) | (z > n))[0])
        raise StructureError(f"row {bad}: need 0 <= z <= n, got z={z[bad]}, n={n[bad]}")
    if np.any(w < 0) or np.any(w != np.round(w)):
        raise StructureError("w must be non-negative integers")
    if np.any(T <= 0):
        raise StructureError("T must be positive")
    partition = BlockPartition([Block("gamma", k, "phi", LOGIT), Block("eta", 2, "eta")])
    data = {
        "z": z, "n": n, "w": w, "T": T,
        "log_T": np.log(T),
        "log_binom": gammaln(n + 1) - gammaln(z + 1) - gammaln(n - z + 1),
        "log_w_fact": gammaln(w + 1),
    }
    factors = [
        Factor("prior_gamma", ("gamma",), _prior_gamma, _prior_gamma_grad, kind="prior"),
        Factor("lik_z", ("gamma",), _lik_z, _lik_z_grad),
        Factor("prior_eta", ("eta",), _prior_eta, _prior_eta_grad, kind="prior"),
        Factor("lik_w", ("gamma", "eta"), _lik_w, _lik_w_grad),
    ]
    return FactorGraph(partition, factors, data)


@dataclass(frozen=True)
class HpvModel:
    z: np.ndarray
    n: np.ndarray
    w: np.ndarray
    T: np.ndarray
    country: tuple = ()

    name = "hpv"
    cut_factors = ("lik_w",)
    cut_block = "gamma"

    def __post_init__(self):
        for f in ("z", "n", "w", "T"):
            object.__setattr__(self, f, np.asarray(getattr(self, f), dtype=float).reshape(-1))
        if not self.country:
            object.__setattr__(self, "country", tuple(f"c{i + 1}" for i in range(self.z.size)))

    @property
    def k(self) -> int:
        return self.z.size

    def graph(self) -> FactorGraph:
        return build_hpv(self.z, self.n, self.w, self.T)

    def with_w(self, w) -> "HpvModel":
        return HpvModel(self.z, self.n, np.asarray(w, dtype=float), self.T, self.country)

    def init_theta(self) -> np.ndarray:
        """Moment-based start: empirical logits and a log-rate intercept."""
        phi = logit((self.z + 1.0) / (self.n + 2.0))
        eta1 = np.log((self.w.sum() + 0.5) / self.T.sum())
        return np.concatenate([phi, [eta1, 0.0]])

    # -- generative pieces ---------------------------------------------------

    def simulate_w(self, values, rng) -> np.ndarray:
        e, g = np.reshape(values["eta"], -1), np.reshape(values["gamma"], -1)
        with np.errstate(over="ignore"):
            mu = self.T * np.exp(e[0] + e[1] * g)
        if not np.all(mu < POISSON_MAX):
            raise NumericError("simulated Poisson mean exceeds the sampler's range")
        return rng.poisson(mu).astype(float)

    def sample_eta_prior(self, phi_values, rng) -> dict:
        return {"eta": rng.normal(0.0, np.sqrt(ETA_PRIOR_VAR), size=2)}

    def sample_phi_given_z(self, rng, size: int) -> np.ndarray:
        """Exact draws of ``phi = logit(gamma)`` from the Beta posterior."""
        g = rng.beta(1.0 + self.z, 1.0 + self.n - self.z, size=(size, self.k))
        return logit(g)

    def gamma_posterior(self):
        return 1.0 + self.z, 1.0 + self.n - self.z

    @classmethod
    def synthetic(cls, rng, k=13, eta=(-8.0, 6.0), overdispersion=0.0, gamma_range=(0.05, 0.35),
                  n_range=(400, 1500), T_range=(2e4, 1e5)):
        """Synthetic 13-country instance.

        ``overdispersion > 0`` multiplies each Poisson mean by
        ``exp(N(0, overdispersion^2))``, which the fitted model does not
        account for (a biased Poisson module).
        """
        gamma = rng.uniform(*gamma_range, size=k)
        n = rng.integers(n_range[0], n_range[1] + 1, size=k).astype(float)
        z = rng.binomial(n.astype(int), gamma).astype(float)
        T = np.round(rng.uniform(*T_range, size=k))
        log_mu = np.log(T) + eta[0] + eta[1] * gamma
        if overdispersion > 0:
            log_mu = log_mu + rng.normal(0.0, overdispersion, size=k)
        w = rng.poisson(np.exp(log_mu)).astype(float)
        return cls(z, n, w, T)
