"""Normal location model with a biased second data source.

``z_i ~ N(phi, 1)``, ``w_i ~ N(phi + eta, 1)``, ``phi ~ N(0, 1/delta1)``,
``eta ~ N(0, 1/delta2)``.  Every factor is Gaussian-linear, so the model is
supported by the mean-field message-passing module as well as by the
fixed-form and MCMC routines.  Full and cut posteriors are available in
closed form and serve as oracles throughout the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cutvi.core import Block, BlockPartition, Factor, FactorGraph, Quadratic
from cutvi.errors import StructureError

LOG_2PI = float(np.log(2.0 * np.pi))

# Demo setup: n1=100, n2=1000, delta1=1, delta2=100, true phi=0, eta=1.
DEMO = {"n1": 100, "n2": 1000, "delta1": 1.0, "delta2": 100.0, "phi": 0.0, "eta": 1.0}


def build_biased_normal(z, w, delta1: float, delta2: float) -> FactorGraph:
    z = np.asarray(z, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    if delta1 <= 0 or delta2 <= 0:
        raise StructureError(f"prior precisions must be positive, got {delta1}, {delta2}")
    n1, n2 = z.size, w.size
    partition = BlockPartition([Block("phi", 1, "phi"), Block("eta", 1, "eta")])
    factors = [
        Factor("prior_phi", ("phi",), kind="prior",
               quadratic=Quadratic([[delta1]], [0.0], 0.5 * (np.log(delta1) - LOG_2PI))),
        Factor("prior_eta", ("eta",), kind="prior",
               quadratic=Quadratic([[delta2]], [0.0], 0.5 * (np.log(delta2) - LOG_2PI))),
        Factor("lik_z", ("phi",),
               quadratic=Quadratic([[n1]], [z.sum()], -0.5 * z @ z - 0.5 * n1 * LOG_2PI)),
        Factor("lik_w", ("phi", "eta"),
               quadratic=Quadratic(n2 * np.ones((2, 2)), [w.sum(), w.sum()], -0.5 * w @ w - 0.5 * n2 * LOG_2PI)),
    ]
    return FactorGraph(partition, factors, {"z": z, "w": w, "delta1": delta1, "delta2": delta2})


@dataclass(frozen=True)
class BiasedNormalModel:
    z: np.ndarray
    w: np.ndarray
    delta1: float = 1.0
    delta2: float = 100.0

    name = "biased-normal"
    cut_factors = ("lik_w",)
    cut_block = "phi"

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).reshape(-1))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(-1))
        if self.delta1 <= 0 or self.delta2 <= 0:
            raise StructureError("prior precisions must be positive")

    @property
    def n1(self) -> int:
        return self.z.size

    @property
    def n2(self) -> int:
        return self.w.size

    def graph(self) -> FactorGraph:
        return build_biased_normal(self.z, self.w, self.delta1, self.delta2)

    def with_w(self, w) -> "BiasedNormalModel":
        return BiasedNormalModel(self.z, w, self.delta1, self.delta2)

    def init_theta(self) -> np.ndarray:
        return np.zeros(2)

    # -- generative pieces ---------------------------------------------------

    @classmethod
    def simulate(cls, rng, phi=0.0, eta=1.0, n1=100, n2=1000, delta1=1.0, delta2=100.0):
        z = rng.normal(phi, 1.0, size=n1)
        w = rng.normal(phi + eta, 1.0, size=n2)
        return cls(z, w, delta1, delta2)

    @classmethod
    def demo(cls, rng):
        return cls.simulate(rng, **DEMO)

    def simulate_w(self, values, rng) -> np.ndarray:
        phi = float(np.reshape(values["phi"], -1)[0])
        eta = float(np.reshape(values["eta"], -1)[0])
        return rng.normal(phi + eta, 1.0, size=self.n2)

    def sample_eta_prior(self, phi_values, rng) -> dict:
        return {"eta": np.array([rng.normal(0.0, 1.0 / np.sqrt(self.delta2))])}

    def sample_phi_given_z(self, rng, size: int) -> np.ndarray:
        m, v = self.cut_phi_moments()
        return rng.normal(m, np.sqrt(v), size=(size, 1))

    def sample_eta_given_phi(self, phi, rng) -> np.ndarray:
        phi = np.reshape(phi, -1)
        prec = self.delta2 + self.n2
        mean = (self.w.sum() - self.n2 * phi) / prec
        return (mean + rng.standard_normal(phi.size) / np.sqrt(prec)).reshape(-1, 1)

    # -- closed forms ----------------------------------------------------------

    def cut_phi_moments(self) -> tuple[float, float]:
        """``p(phi | z) = N(n1 zbar / (n1 + delta1), 1 / (n1 + delta1))``."""
        prec = self.n1 + self.delta1
        return float(self.z.sum() / prec), 1.0 / prec

    def full_precision(self) -> np.ndarray:
        n1, n2 = self.n1, self.n2
        return np.array([[self.delta1 + n1 + n2, n2], [n2, self.delta2 + n2]], dtype=float)

    def full_posterior(self) -> tuple[np.ndarray, np.ndarray]:
        lam = self.full_precision()
        b = np.array([self.z.sum() + self.w.sum(), self.w.sum()])
        return np.linalg.solve(lam, b), np.linalg.inv(lam)

    def cut_slope(self) -> float:
        """``dE(eta | phi, w) / dphi`` under the cut posterior."""
        return -self.n2 / (self.delta2 + self.n2)

    def cut_posterior(self) -> tuple[np.ndarray, np.ndarray]:
        m, v = self.cut_phi_moments()
        prec_eta = self.delta2 + self.n2
        s = self.cut_slope()
        mean = np.array([m, (self.w.sum() - self.n2 * m) / prec_eta])
        cov = np.array([[v, s * v], [s * v, s * s * v + 1.0 / prec_eta]])
        return mean, cov

    def mean_field_fixed_point(self) -> np.ndarray:
        """Means of the uncut mean-field optimum (a 2x2 linear solve)."""
        n1, n2 = self.n1, self.n2
        A = np.array([[self.delta1 + n1 + n2, n2], [n2, self.delta2 + n2]], dtype=float)
        b = np.array([self.z.sum() + self.w.sum(), self.w.sum()])
        return np.linalg.solve(A, b)
