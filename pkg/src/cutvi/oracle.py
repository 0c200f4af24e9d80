"""Sampling oracles used to validate the variational fits.

* ``gibbs_full``: exact block Gibbs for Gaussian-linear graphs.
* ``cut_sampler``: draws ``phi ~ p(phi | z)`` then ``eta ~ p(eta | phi, w)``,
  exactly where the model allows it and by a short inner Metropolis chain
  otherwise.  It never runs Metropolis-within-Gibbs on a cut target.
* ``mwg_full``: random-walk Metropolis-within-Gibbs on the full posterior,
  with proposal scales tuned during burn-in and frozen afterwards.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from cutvi.core import FactorGraph
from cutvi.errors import NumericError, StructureError
from cutvi.mfvb import check_conjugate, compute_message

INNER_MH = 50
BURN_FRACTION = 0.2
ADAPT_BATCH = 50


@dataclass
class ChainOutput:
    """Posterior draws on the constrained scale, one row per kept iteration."""

    draws: np.ndarray
    names: list
    burn_in: int = 0
    thin: int = 1
    acceptance: dict = field(default_factory=dict)
    seed: int | None = None

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def sd(self) -> np.ndarray:
        return self.draws.std(axis=0, ddof=1)

    def mcse(self, n_batches: int = 50) -> np.ndarray:
        return batch_means_se(self.draws, n_batches)

    def metadata(self) -> dict:
        return {
            "names": list(self.names),
            "n_draws": int(self.draws.shape[0]),
            "burn_in": self.burn_in,
            "thin": self.thin,
            "acceptance": {k: float(v) for k, v in self.acceptance.items()},
            "seed": self.seed,
        }


def batch_means_se(x, n_batches: int = 50) -> np.ndarray:
    """Monte Carlo standard error of column means by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    b = x.shape[0] // n_batches
    if b < 1:
        return x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])
    means = x[: b * n_batches].reshape(n_batches, b, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def _to_constrained_rows(part, U):
    out = np.empty_like(U)
    for b in part.blocks:
        s = part.slices[b.name]
        out[:, s] = b.transform.to_constrained(U[:, s])
    return out


# ---------------------------------------------------------------------------
# Exact Gibbs for Gaussian-linear graphs
# ---------------------------------------------------------------------------


def conditional_moments(g: FactorGraph, block: str, values: dict) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of ``block`` given every other block, for a quadratic graph."""
    d = g.partition[block].dim
    P, h = np.zeros((d, d)), np.zeros(d)
    for f in g.factors_touching(block):
        m = compute_message(f, block, values, g)
        P += m.precision
        h += m.shift
    cov = np.linalg.inv(P)
    return cov @ h, cov


def gibbs_full(g: FactorGraph, n_iter: int, rng, init=None, burn_in: int = 0, thin: int = 1,
               seed: int | None = None) -> ChainOutput:
    """Block Gibbs sampler drawing each block from its exact Gaussian conditional."""
    check_conjugate(g)
    part = g.partition
    x = part.split(np.zeros(part.dim) if init is None else np.asarray(init, dtype=float))
    x = {k: v.copy() for k, v in x.items()}
    kept = []
    for t in range(burn_in + n_iter):
        for b in part.blocks:
            mean, cov = conditional_moments(g, b.name, x)
            x[b.name] = mean + np.linalg.cholesky(cov) @ rng.standard_normal(b.dim)
        if t >= burn_in and (t - burn_in) % thin == 0:
            kept.append(part.flatten(x))
    return ChainOutput(np.array(kept), part.labels(), burn_in, thin, {b.name: 1.0 for b in part.blocks}, seed)


# ---------------------------------------------------------------------------
# Random-walk Metropolis pieces
# ---------------------------------------------------------------------------


def _local_graph(g: FactorGraph, blocks) -> FactorGraph:
    """Only the factors touching ``blocks``: enough for Metropolis ratios in those blocks."""
    blocks = set(blocks)
    return FactorGraph(g.partition, [f for f in g.factors if blocks & set(f.blocks)], g.data)


def laplace_covariance(g: FactorGraph, theta0, idx) -> tuple[np.ndarray, np.ndarray]:
    """Mode and inverse negative Hessian of ``log_joint`` over coordinates ``idx``.

    The other coordinates stay at ``theta0``.  The Hessian is a central
    difference of the gradient.
    """
    idx = np.asarray(idx)
    base = np.asarray(theta0, dtype=float).copy()

    def f(u):
        th = base.copy()
        th[idx] = u
        lp, gr = g.value_and_grad(th)
        if not np.isfinite(lp):
            return 1e300, np.zeros(idx.size)
        return -lp, -gr[idx]

    res = minimize(f, base[idx], jac=True, method="BFGS")
    mode = res.x
    H = np.empty((idx.size, idx.size))
    for j in range(idx.size):
        h = 1e-5 * max(1.0, abs(mode[j]))
        up, dn = mode.copy(), mode.copy()
        up[j] += h
        dn[j] -= h
        H[:, j] = (f(up)[1] - f(dn)[1]) / (2 * h)
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    w = np.maximum(w, 1e-8 * max(w.max(), 1e-8))
    return mode, (V / w) @ V.T


class _BlockProposal:
    """Gaussian random-walk proposal for one block with an adaptable scale."""

    def __init__(self, idx, cov, target_rate):
        self.idx = idx
        self.L = np.linalg.cholesky(cov)
        self.log_scale = 0.0
        self.target = target_rate
        self.accepted = 0
        self.tried = 0

    def propose(self, x, rng):
        y = x.copy()
        y[self.idx] += np.exp(self.log_scale) * (self.L @ rng.standard_normal(self.idx.size))
        return y

    def adapt(self, n_batch):
        rate = self.accepted / max(self.tried, 1)
        step = min(0.5, 1.0 / np.sqrt(n_batch))
        self.log_scale += step if rate > self.target else -step
        self.accepted = self.tried = 0

    def rate(self):
        return self.accepted / max(self.tried, 1)


def mwg_full(g: FactorGraph, n_iter: int, rng, init=None, proposal_scales=None, burn_in: int | None = None,
             thin: int = 1, seed: int | None = None) -> ChainOutput:
    """Metropolis-within-Gibbs over the partition blocks, on the unconstrained scale.

    ``n_iter`` counts all iterations including burn-in (default 20%).  During
    burn-in each block's scale is nudged every 50 iterations toward 0.44
    (scalar blocks) or 0.234 acceptance, and multivariate blocks switch to the
    empirical covariance of the burn-in draws halfway through.  Everything is
    frozen afterwards.  ``proposal_scales`` maps block names to initial
    standard deviations (default 0.1 per coordinate).
    """
    part = g.partition
    burn = int(BURN_FRACTION * n_iter) if burn_in is None else int(burn_in)
    x = np.zeros(part.dim) if init is None else np.asarray(init, dtype=float).copy()
    lp = g.log_joint(x)
    if not np.isfinite(lp):
        raise NumericError("log density is not finite at the initial point")
    proposal_scales = proposal_scales or {}
    props, locals_ = [], []
    for b in part.blocks:
        idx = np.arange(part.slices[b.name].start, part.slices[b.name].stop)
        s = proposal_scales.get(b.name, 0.1)
        cov = np.eye(b.dim) * np.square(np.broadcast_to(s, (b.dim,)))
        props.append(_BlockProposal(idx, cov, 0.44 if b.dim == 1 else 0.234))
        locals_.append(_local_graph(g, [b.name]))
    kept = []
    history = []
    n_batch = 0
    for t in range(n_iter):
        for prop, lg in zip(props, locals_):
            # local graph ratios equal full ratios: other factors do not move
            y = prop.propose(x, rng)
            prop.tried += 1
            dl = lg.log_joint(y) - lg.log_joint(x)
            if np.log(rng.random()) < dl:
                prop.accepted += 1
                x = y
        if t < burn:
            history.append(x.copy())
            if (t + 1) % ADAPT_BATCH == 0:
                n_batch += 1
                for prop in props:
                    prop.adapt(n_batch)
            if t + 1 == burn // 2:
                H = np.array(history[len(history) // 2:])
                for prop in props:
                    if prop.idx.size > 1 and H.shape[0] > 10 * prop.idx.size:
                        cov = np.cov(H[:, prop.idx], rowvar=False) * 2.38**2 / prop.idx.size
                        try:
                            prop.L = np.linalg.cholesky(cov + 1e-12 * np.eye(prop.idx.size))
                            prop.log_scale = 0.0
                        except np.linalg.LinAlgError:
                            pass
            if t + 1 == burn:
                for prop in props:
                    prop.accepted = prop.tried = 0
        elif (t - burn) % thin == 0:
            kept.append(x.copy())
    U = np.array(kept) if kept else np.zeros((0, part.dim))
    acc = {b.name: p.rate() for b, p in zip(part.blocks, props)}
    return ChainOutput(_to_constrained_rows(part, U), part.labels(), burn, thin, acc, seed)


# ---------------------------------------------------------------------------
# Cut sampler
# ---------------------------------------------------------------------------


def cut_sampler(model, n_iter: int, rng, inner_mh: int | None = None, seed: int | None = None) -> ChainOutput:
    """Two-stage cut sampler: ``phi ~ p(phi | z)``, then ``eta | phi, w``.

    With ``inner_mh = 0`` the model must supply an exact conditional sampler
    ``sample_eta_given_phi``.  Otherwise each phi-draw is followed by
    ``inner_mh`` random-walk Metropolis steps on eta (default 50), started
    from the previous eta and using a Laplace-shaped proposal.
    """
    g = model.graph()
    part = g.partition
    phi_idx = part.index_of(part.module_names("phi"))
    eta_names = part.module_names("eta")
    eta_idx = part.index_of(eta_names)
    if inner_mh is None:
        inner_mh = 0 if hasattr(model, "sample_eta_given_phi") else INNER_MH
    if not hasattr(model, "sample_phi_given_z"):
        raise StructureError(f"model {model.name!r} cannot sample p(phi | z) exactly")
    PHI = np.asarray(model.sample_phi_given_z(rng, n_iter)).reshape(n_iter, phi_idx.size)
    U = np.empty((n_iter, part.dim))
    U[:, phi_idx] = PHI
    acceptance = {"phi": 1.0}
    if inner_mh == 0:
        if not hasattr(model, "sample_eta_given_phi"):
            raise StructureError("inner_mh=0 needs an exact eta | phi sampler")
        for t in range(n_iter):
            U[t, eta_idx] = np.reshape(model.sample_eta_given_phi(PHI[t], rng), -1)
        acceptance["eta"] = 1.0
    else:
        local = _local_graph(g, eta_names)
        theta = np.asarray(model.init_theta(), dtype=float).copy()
        theta[phi_idx] = PHI.mean(axis=0)
        mode, cov = laplace_covariance(local, theta, eta_idx)
        prop = _BlockProposal(np.arange(eta_idx.size), cov * 2.38**2 / eta_idx.size, 0.234)
        eta = mode.copy()
        th = theta.copy()
        for t in range(n_iter):
            th[phi_idx] = PHI[t]
            th[eta_idx] = eta
            lp = local.log_joint(th)
            for _ in range(inner_mh):
                prop.tried += 1
                cand = eta + prop.L @ rng.standard_normal(eta.size)
                th[eta_idx] = cand
                lq = local.log_joint(th)
                if np.log(rng.random()) < lq - lp:
                    prop.accepted += 1
                    eta, lp = cand, lq
            th[eta_idx] = eta
            U[t, eta_idx] = eta
        acceptance["eta"] = prop.rate()
        if prop.rate() < 0.01:
            warnings.warn(
                f"inner Metropolis acceptance {prop.rate():.3g} is below 1%; retune the proposal scale",
                RuntimeWarning,
            )
    return ChainOutput(_to_constrained_rows(part, U), part.labels(), 0, 1, acceptance, seed)
