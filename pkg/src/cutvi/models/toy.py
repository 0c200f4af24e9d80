"""Small discrete-continuous model with an enumerable posterior.

One continuous mean ``mu ~ N(0, tau2)`` observed through ``y_j ~ N(mu, 1)``,
and one three-level indicator ``M ~ U{0, 1, 2}`` observed through
``x ~ N(mu + shifts[M], s2)``.  Given ``M`` everything is conjugate, so
``P(M = m | y, x)`` follows by enumerating ``m`` and integrating ``mu``
analytically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cutvi.core import Block, BlockPartition, Factor, FactorGraph, Quadratic

LOG_2PI = float(np.log(2.0 * np.pi))


def _normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


@dataclass(frozen=True)
class ToyDiscreteModel:
    y: np.ndarray
    x: float
    shifts: tuple = (-1.0, 0.0, 1.0)
    tau2: float = 10.0
    s2: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).reshape(-1))

    def graph(self) -> FactorGraph:
        y, n = self.y, self.y.size
        part = BlockPartition([Block("mu", 1, "phi")])
        shifts = np.asarray(self.shifts)
        s2 = self.s2

        def lik_x(v, d):
            return float(_normal_logpdf(d["x"], v["mu"][0] + shifts[d["M"][0]], s2))

        def lik_x_grad(v, d):
            return {"mu": np.array([(d["x"] - v["mu"][0] - shifts[d["M"][0]]) / s2])}

        factors = [
            Factor("prior_mu", ("mu",), kind="prior",
                   quadratic=Quadratic([[1.0 / self.tau2]], [0.0], -0.5 * (LOG_2PI + np.log(self.tau2)))),
            Factor("lik_y", ("mu",), quadratic=Quadratic([[n]], [y.sum()], -0.5 * y @ y - 0.5 * n * LOG_2PI)),
            Factor("prior_M", (), lambda v, d: -np.log(3.0), lambda v, d: {}, kind="prior"),
            Factor("lik_x", ("mu",), lik_x, lik_x_grad),
        ]
        return FactorGraph(part, factors, {"y": y, "x": float(self.x), "M": np.zeros(1, dtype=int)})

    def log_masses(self, theta) -> np.ndarray:
        """Unnormalized ``log p(M = m | mu, x)`` as a ``(1, 3)`` array."""
        mu = float(np.reshape(theta, -1)[0])
        lm = _normal_logpdf(self.x, mu + np.asarray(self.shifts), self.s2) - np.log(3.0)
        return lm.reshape(1, -1)

    def hybrid(self):
        from cutvi.hybrid import HybridModel

        return HybridModel(self.graph(), self.log_masses, key="M")

    def mu_given_y(self) -> tuple[float, float]:
        prec = 1.0 / self.tau2 + self.y.size
        return self.y.sum() / prec, 1.0 / prec

    def exact_level_probs(self) -> np.ndarray:
        """``P(M = m | y, x)`` by enumeration; ``x | y, M=m ~ N(m0 + shift_m, v0 + s2)``."""
        m0, v0 = self.mu_given_y()
        lw = _normal_logpdf(self.x, m0 + np.asarray(self.shifts), v0 + self.s2)
        w = np.exp(lw - lw.max())
        return w / w.sum()
