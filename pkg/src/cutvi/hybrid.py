"""Variational inference with discrete latent variables drawn exactly.

The variational family is ``q(rho, M) = p(M | rho, z) q0(rho)`` with ``q0``
Gaussian.  Each iteration draws ``rho`` by reparameterization, then ``M``
from its exact conditional, and takes one ADADELTA step using the gradient of
``log g(rho, M) - log q0(rho)`` with respect to the Gaussian parameters.
The last ``N_keep`` pairs are kept as a trail that stands in for the
stage-1 posterior sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from cutvi.core import FactorGraph
from cutvi.errors import StructureError
from cutvi.ffvi import FitResult, GaussianVariational, fit

N_KEEP = 10000


@dataclass(frozen=True)
class HybridModel:
    """A continuous factor graph whose factors read discrete values from ``data[key]``.

    ``log_masses(theta)`` returns the unnormalized log conditional masses
    ``log p(M_i = m | rho, z)`` as an ``(n, levels)`` array; components are
    conditionally independent given ``rho``.
    """

    graph: FactorGraph
    log_masses: Callable[[np.ndarray], np.ndarray]
    key: str = "M_A"


def conditional_probs(log_masses) -> np.ndarray:
    """Normalize rows of log masses with a max-shifted log-sum-exp."""
    lm = np.atleast_2d(np.asarray(log_masses, dtype=float))
    return np.exp(lm - logsumexp(lm, axis=1, keepdims=True))


def sample_from_probs(probs, rng) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


def sample_discrete_conditional(model: HybridModel, rho, rng) -> np.ndarray:
    """One exact draw of every discrete component given ``rho``."""
    return sample_from_probs(conditional_probs(model.log_masses(rho)), rng)


@dataclass(frozen=True)
class Trail:
    """Retained ``(rho, M)`` draws in chronological order.

    ``rho`` is on the unconstrained scale; ``M`` holds level indices.
    """

    rho: np.ndarray
    M: np.ndarray
    iterations: np.ndarray
    n_levels: int = 3

    def __post_init__(self):
        if self.rho.shape[0] == 0:
            raise StructureError("trail is empty")
        if self.M.shape[0] != self.rho.shape[0]:
            raise StructureError("trail rho and M have different lengths")

    def __len__(self):
        return self.rho.shape[0]

    def level_frequencies(self) -> np.ndarray:
        """Empirical ``P(M_i = m)``, shape ``(n, n_levels)``."""
        n = self.M.shape[1]
        counts = np.zeros((n, self.n_levels))
        for m in range(self.n_levels):
            counts[:, m] = np.sum(self.M == m, axis=0)
        return counts / len(self)


class _RingBuffer:
    def __init__(self, size, d, n):
        self.size = size
        self.rho = np.empty((size, d))
        self.M = np.empty((size, n), dtype=np.int8)
        self.it = np.empty(size, dtype=np.int64)
        self.count = 0

    def push(self, iteration, rho, M):
        k = self.count % self.size
        self.rho[k], self.M[k], self.it[k] = rho, M, iteration
        self.count += 1

    def trail(self, n_levels):
        n = min(self.count, self.size)
        order = np.arange(n) if self.count <= self.size else (np.arange(n) + self.count) % self.size
        return Trail(self.rho[order].copy(), self.M[order].copy(), self.it[order].copy(), n_levels)


@dataclass
class HybridFit:
    """Fitted ``q0(rho)`` plus the retained trail."""

    fit: FitResult
    trail: Trail

    @property
    def q(self) -> GaussianVariational:
        return self.fit.q


def run_algorithm1(model: HybridModel, init: GaussianVariational, K: int, rng, n_keep: int = N_KEEP,
                   n_levels: int = 3, log_every: int = 1000, estimator: str = "entropy") -> HybridFit:
    """``K`` iterations of hybrid VI, keeping the last ``n_keep`` draws.

    The entropy-form gradient is the default: with ``M`` redrawn every step
    ``log g - log q0`` is never constant, so the score-difference form gains
    nothing and is unstable for high-dimensional ``rho``.
    """
    if n_keep < 1:
        raise StructureError("n_keep must be >= 1")
    g = model.graph
    last = {}

    def target(theta):
        M = sample_discrete_conditional(model, theta, rng)
        last["M"] = M
        return g.value_and_grad(theta, data={model.key: M})

    n = np.asarray(g.data[model.key]).size
    buf = _RingBuffer(min(n_keep, max(K, 1)), init.dim, n)

    def record(iteration, theta):
        buf.push(iteration, theta, last["M"])

    result = fit(target, init, K, rng, log_every=log_every, callback=record, estimator=estimator)
    return HybridFit(result, buf.trail(n_levels))


def stage2_with_imputation(po_graph: FactorGraph, trail: Trail, K2: int, rng, init: GaussianVariational | None = None,
                           key: str = "M_A", rho_key: str | None = None, log_every: int = 1000,
                           estimator: str = "entropy") -> FitResult:
    """Fit ``q(eta)`` to the PO posterior, redrawing ``(rho, M)`` from the trail each step.

    ``M`` enters as response data under ``key``; if ``rho_key`` is given the
    drawn ``rho`` is passed as data too (the agricultural PO module does not
    use it).
    """
    if len(trail) == 0:
        raise StructureError("trail is empty")
    if init is None:
        init = GaussianVariational.initial(po_graph.dim)

    def target(theta):
        i = rng.integers(len(trail))
        data = {key: trail.M[i].astype(int)}
        if rho_key is not None:
            data[rho_key] = trail.rho[i]
        return po_graph.value_and_grad(theta, data=data)

    return fit(target, init, K2, rng, log_every=log_every, estimator=estimator)
