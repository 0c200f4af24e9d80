"""Fixed-form Gaussian VI by reparameterized stochastic gradient ascent.

The variational family is ``N(mu, C C')`` with ``C`` lower triangular.  The
free parameter vector is ``lambda = (mu, log diag C, strict lower C)``, the
strict lower part stored row by row.  For a cut fit the first ``n_phi``
coordinates hold the phi blocks and ``C = [[C_phi, 0], [C_phi_eta, C_eta]]``.

Targets are callables ``target(theta) -> (log_density, gradient)`` on the
unconstrained scale; a :class:`~cutvi.core.FactorGraph`'s ``value_and_grad``
is one.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from cutvi.core import FactorGraph
from cutvi.errors import NumericError, StructureError

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
MA_WINDOW = 500
MAX_RESAMPLE = 10
SWITCH_FRACTION = 0.5

Target = Callable[[np.ndarray], tuple]


@dataclass
class GaussianVariational:
    """Gaussian ``N(mu, C C')`` with lower-triangular ``C`` and positive diagonal."""

    mu: np.ndarray
    C: np.ndarray
    n_phi: int = 0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1).copy()
        self.C = np.tril(np.atleast_2d(np.asarray(self.C, dtype=float)))
        d = self.mu.size
        if self.C.shape != (d, d):
            raise StructureError(f"C has shape {self.C.shape}, expected ({d}, {d})")
        if np.any(np.diag(self.C) <= 0):
            raise StructureError("Cholesky factor needs a positive diagonal")
        if not 0 <= self.n_phi <= d:
            raise StructureError(f"n_phi={self.n_phi} outside [0, {d}]")

    @classmethod
    def initial(cls, d: int, mu=None, scale: float = 0.1, n_phi: int = 0) -> "GaussianVariational":
        mu = np.zeros(d) if mu is None else mu
        return cls(mu, scale * np.eye(d), n_phi)

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def mean(self) -> np.ndarray:
        return self.mu

    @property
    def cov(self) -> np.ndarray:
        return self.C @ self.C.T

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.sum(self.C**2, axis=1))

    @property
    def n_params(self) -> int:
        d = self.dim
        return 2 * d + d * (d - 1) // 2

    def params(self) -> np.ndarray:
        rows, cols = np.tril_indices(self.dim, -1)
        return np.concatenate([self.mu, np.log(np.diag(self.C)), self.C[rows, cols]])

    @classmethod
    def from_params(cls, lam, d: int, n_phi: int = 0) -> "GaussianVariational":
        lam = np.asarray(lam, dtype=float)
        rows, cols = np.tril_indices(d, -1)
        C = np.diag(np.exp(lam[d:2 * d]))
        C[rows, cols] = lam[2 * d:]
        return cls(lam[:d], C, n_phi)

    def phi_mask(self) -> np.ndarray:
        """Boolean mask over ``params()`` selecting ``(mu_phi, vech C_phi)``."""
        d, k = self.dim, self.n_phi
        rows, _ = np.tril_indices(d, -1)
        idx = np.arange(d)
        return np.concatenate([idx < k, idx < k, rows < k])

    def marginal(self, idx) -> "GaussianVariational":
        """Gaussian marginal over the coordinates ``idx``."""
        idx = np.asarray(idx, dtype=int)
        S = self.cov[np.ix_(idx, idx)]
        return GaussianVariational(self.mu[idx], np.linalg.cholesky(S))

    def phi_marginal(self) -> "GaussianVariational":
        # Block lower-triangular C: the phi marginal is just the leading block.
        k = self.n_phi
        return GaussianVariational(self.mu[:k], self.C[:k, :k])

    def conditional_slope(self) -> np.ndarray:
        """``dE(eta | phi) / dphi = C_phi_eta C_phi^{-1}``, shape ``(d_eta, d_phi)``."""
        k = self.n_phi
        C_phi, C_x = self.C[:k, :k], self.C[k:, :k]
        return solve_triangular(C_phi, C_x.T, lower=True, trans="T").T

    def sample(self, rng, size: int) -> np.ndarray:
        eps = rng.standard_normal((size, self.dim))
        return self.mu + eps @ self.C.T

    def log_density(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        z = solve_triangular(self.C, (theta - self.mu).T, lower=True)
        return (-0.5 * self.dim * LOG_2PI - np.sum(np.log(np.diag(self.C)))
                - 0.5 * np.sum(z**2, axis=0))

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "C": self.C.tolist(), "n_phi": self.n_phi}


def kl_between_gaussians(a, b) -> float:
    """``KL(a || b)`` for Gaussians given as objects with ``mean``/``cov`` or ``(mean, cov)`` pairs."""
    ma, Sa = _moments(a)
    mb, Sb = _moments(b)
    d = ma.size
    if mb.size != d or Sa.shape != (d, d) or Sb.shape != (d, d):
        raise StructureError(f"dimension mismatch: {d} vs {mb.size}")
    try:
        Lb = np.linalg.cholesky(Sb)
    except np.linalg.LinAlgError:
        raise NumericError("covariance of the second Gaussian is singular") from None
    La = np.linalg.cholesky(Sa)
    M = solve_triangular(Lb, La, lower=True)
    diff = solve_triangular(Lb, mb - ma, lower=True)
    logdet = 2.0 * (np.sum(np.log(np.diag(Lb))) - np.sum(np.log(np.diag(La))))
    return float(0.5 * (logdet + np.sum(M**2) - d + diff @ diff))


def _moments(x):
    if isinstance(x, tuple):
        m, S = x
    else:
        m, S = x.mean, x.cov
    return np.atleast_1d(np.asarray(m, dtype=float)), np.atleast_2d(np.asarray(S, dtype=float))


# ---------------------------------------------------------------------------
# Gradient estimator
# ---------------------------------------------------------------------------


def _draw(target, q, rng, iteration=None):
    """One reparameterized draw; resamples when the target is not finite there."""
    for _ in range(MAX_RESAMPLE):
        eps = rng.standard_normal(q.dim)
        theta = q.mu + q.C @ eps
        try:
            lp, grad = target(theta)
        except NumericError:
            continue
        if np.isfinite(lp) and np.all(np.isfinite(grad)):
            return eps, theta, lp, grad
    raise NumericError(f"target not finite at {MAX_RESAMPLE} consecutive draws", iteration=iteration)


def _grad_from_draw(q, eps, grad, rows, cols, estimator="entropy"):
    d = q.dim
    if estimator == "stl":
        # (dtheta/dlambda)' (grad log g - grad log q), grad log q = -C^{-T} eps
        grad = grad + solve_triangular(q.C, eps, lower=True, trans="T")
    elif estimator != "entropy":
        raise StructureError(f"unknown gradient estimator {estimator!r}")
    gC = np.outer(grad, eps)
    out = np.empty(q.n_params)
    out[:d] = grad
    out[d:2 * d] = np.diag(gC) * np.diag(q.C)
    if estimator == "entropy":
        # d/d(log C_ii) of the Gaussian entropy sum_i log C_ii
        out[d:2 * d] += 1.0
    out[2 * d:] = gC[rows, cols]
    return out


ESTIMATORS = ("entropy", "stl", "switch")


def elbo_gradient_estimate(target: Target, q: GaussianVariational, rng, n_samples: int = 1,
                           estimator: str = "entropy"):
    """Unbiased estimate of the ELBO gradient with respect to ``q.params()``.

    ``entropy`` differentiates ``log g`` through the draw and adds the exact
    gradient of the Gaussian entropy.  ``stl`` uses the draw for both terms,
    ``(dtheta/dlambda)' (grad log g - grad log q)``; its variance vanishes
    when ``q`` matches a Gaussian target but it can be unstable far from
    the optimum, since ``grad log q`` involves ``C^{-1}``.

    Returns ``(gradient, elbo_estimate)``.
    """
    if estimator == "switch":
        estimator = "entropy"
    if n_samples < 1:
        raise StructureError("n_samples must be >= 1")
    rows, cols = np.tril_indices(q.dim, -1)
    total = np.zeros(q.n_params)
    value = 0.0
    log_det = np.sum(np.log(np.diag(q.C)))
    for _ in range(n_samples):
        eps, _, lp, grad = _draw(target, q, rng)
        total += _grad_from_draw(q, eps, grad, rows, cols, estimator)
        value += lp + 0.5 * q.dim * LOG_2PI + log_det + 0.5 * eps @ eps
    return total / n_samples, value / n_samples


# ---------------------------------------------------------------------------
# ADADELTA fitting
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """ADADELTA accumulators and the ELBO trace of one fit."""

    sq_grad: np.ndarray
    sq_step: np.ndarray
    decay: float = 0.95
    eps: float = 1e-6
    iteration: int = 0
    elbo: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise StructureError("ADADELTA decay must lie in (0, 1)")

    def step(self, grad: np.ndarray) -> np.ndarray:
        r = self.decay
        self.sq_grad *= r
        self.sq_grad += (1.0 - r) * grad * grad
        delta = np.sqrt(self.sq_step + self.eps) / np.sqrt(self.sq_grad + self.eps) * grad
        self.sq_step *= r
        self.sq_step += (1.0 - r) * delta * delta
        self.iteration += 1
        return delta

    def moving_average(self, window: int = MA_WINDOW) -> np.ndarray:
        return moving_average(np.asarray(self.elbo), window)


def moving_average(x, window: int = MA_WINDOW) -> np.ndarray:
    """Trailing mean over up to ``window`` previous values (shorter at the start)."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class FitResult:
    q: GaussianVariational
    state: OptimizerState

    @property
    def elbo(self) -> np.ndarray:
        return np.asarray(self.state.elbo)

    @property
    def elbo_ma(self) -> np.ndarray:
        return self.state.moving_average()


def fit(target: Target, init: GaussianVariational, n_iter: int, rng, frozen_mask=None,
        n_samples: int = 1, decay: float = 0.95, eps: float = 1e-6, state: OptimizerState | None = None,
        log_every: int = 1000, callback: Callable[[int, np.ndarray], None] | None = None,
        estimator: str = "switch") -> FitResult:
    """``n_iter`` ADADELTA ascent steps on the ELBO.

    ``estimator`` is ``entropy``, ``stl`` or ``switch`` (the default):
    ``entropy`` for the first half of the run, where it is robust, then
    ``stl``, whose noise vanishes near the optimum of a near-Gaussian target.

    Entries of ``params()`` flagged in ``frozen_mask`` are never touched, so
    they come back bit-identical.  ``callback(iteration, theta)`` is called
    after every step with the last reparameterized draw.
    """
    if n_iter < 0:
        raise StructureError("n_iter must be non-negative")
    d = init.dim
    lam = init.params()
    free = np.ones(lam.size, dtype=bool) if frozen_mask is None else ~np.asarray(frozen_mask, dtype=bool)
    if free.shape != lam.shape:
        raise StructureError(f"frozen mask has {free.size} entries, expected {lam.size}")
    if state is None:
        state = OptimizerState(np.zeros(lam.size), np.zeros(lam.size), decay, eps)
    if not np.any(free):
        return FitResult(GaussianVariational(init.mu, init.C, init.n_phi), state)
    rows, cols = np.tril_indices(d, -1)
    diag = np.arange(d)
    free_diag = free[d:2 * d]
    free_low = free[2 * d:]
    ma_sum, window = 0.0, deque()
    q = GaussianVariational(init.mu, init.C, init.n_phi)
    if estimator == "switch":
        est, switch_at = "stl", int(SWITCH_FRACTION * n_iter)
    else:
        est, switch_at = estimator, 0
    for k in range(n_iter):
        grad = np.zeros(lam.size)
        value = 0.0
        log_det = np.sum(lam[d:2 * d])
        for _ in range(n_samples):
            e, theta, lp, g = _draw(target, q, rng, iteration=state.iteration)
            grad += _grad_from_draw(q, e, g, rows, cols, est if k >= switch_at else "entropy")
            value += lp + 0.5 * d * LOG_2PI + log_det + 0.5 * e @ e
        grad /= n_samples
        value /= n_samples
        state.elbo.append(value)
        window.append(value)
        ma_sum += value
        if len(window) > MA_WINDOW:
            ma_sum -= window.popleft()
        if np.isnan(ma_sum):
            raise NumericError("ELBO moving average is NaN", iteration=state.iteration)
        delta = state.step(np.where(free, grad, 0.0))
        lam = np.where(free, lam + delta, lam)
        # only free entries of C are rewritten, so frozen ones stay bit-identical
        q.mu = lam[:d]
        q.C[diag[free_diag], diag[free_diag]] = np.exp(lam[d:2 * d][free_diag])
        q.C[rows[free_low], cols[free_low]] = lam[2 * d:][free_low]
        if callback is not None:
            callback(state.iteration, theta)
        if log_every and state.iteration % log_every == 0:
            log.info("iteration %d  elbo(ma) %.6g", state.iteration, ma_sum / len(window))
    return FitResult(GaussianVariational(q.mu, q.C, init.n_phi), state)


@dataclass
class CutFit:
    """Result of the two-stage cut fit: stage-1 phi fit and stage-2 joint fit."""

    stage1: FitResult
    stage2: FitResult

    @property
    def q_phi(self) -> GaussianVariational:
        return self.stage1.q

    @property
    def q(self) -> GaussianVariational:
        return self.stage2.q


def check_phi_first(g: FactorGraph) -> int:
    tags = [b.module for b in g.partition.blocks]
    n_phi = tags.count("phi")
    if tags != ["phi"] * n_phi + ["eta"] * (len(tags) - n_phi):
        raise StructureError("phi blocks must precede eta blocks for a cut fit")
    return g.partition.module_dim("phi")


def fit_cut(g: FactorGraph, K1: int, K2: int, rng, init=None, scale: float = 0.1,
            log_every: int = 1000, n_samples: int = 1) -> CutFit:
    """Two-stage cut fit.

    Stage 1 fits ``q(phi)`` to the phi-module ``p(phi) p(z | phi)``.  Stage 2
    fits the full partitioned Gaussian to the full joint with
    ``(mu_phi, vech C_phi)`` frozen at the stage-1 optimum.
    """
    k = check_phi_first(g)
    d = g.dim
    mu0 = np.zeros(d) if init is None else np.asarray(init, dtype=float)
    phi_graph = g.phi_module()
    s1 = fit(phi_graph.value_and_grad, GaussianVariational.initial(k, mu0[:k], scale), K1, rng,
             log_every=log_every, n_samples=n_samples)
    return CutFit(s1, fit_stage2(g.value_and_grad, s1.q, d, K2, rng, mu0[k:], scale, log_every, n_samples))


def fit_stage2(target: Target, q_phi: GaussianVariational, d: int, K2: int, rng, mu_eta=None,
               scale: float = 0.1, log_every: int = 1000, n_samples: int = 1) -> FitResult:
    k = q_phi.dim
    mu = np.concatenate([q_phi.mu, np.zeros(d - k) if mu_eta is None else mu_eta])
    C = scale * np.eye(d)
    C[:k, :k] = q_phi.C
    init = GaussianVariational(mu, C, n_phi=k)
    return fit(target, init, K2, rng, frozen_mask=init.phi_mask(), log_every=log_every, n_samples=n_samples)


def fit_full(g: FactorGraph, K: int, rng, init=None, scale: float = 0.1, log_every: int = 1000,
             n_samples: int = 1) -> FitResult:
    d = g.dim
    n_phi = g.partition.module_dim("phi") if _phi_first(g) else 0
    q0 = GaussianVariational.initial(d, None if init is None else np.asarray(init, dtype=float), scale, n_phi)
    return fit(g.value_and_grad, q0, K, rng, log_every=log_every, n_samples=n_samples)


def _phi_first(g):
    try:
        check_phi_first(g)
    except StructureError:
        return False
    return True
