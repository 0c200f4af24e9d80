"""Mean-field coordinate ascent as Gaussian message passing, with cut by deletion.

Only Gaussian-linear graphs are handled: every factor must carry a
``Quadratic`` tag and every block must use the identity transform.  For such
a factor ``-0.5 x'Ax + b'x + c`` the message to block ``i`` has precision
``A_ii`` and shift ``b_i - sum_{k != i} A_ik E(x_k)``; the optimal ``q_i`` is
the normalized product of its incoming messages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cutvi.core import Factor, FactorGraph, Identity
from cutvi.errors import DegenerateCutError, NumericError, StructureError, UnsupportedModelError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianMessage:
    """Unnormalized Gaussian ``exp(-0.5 x'Px + h'x)`` from a factor to a block."""

    from_factor: str
    to_block: str
    precision: np.ndarray
    shift: np.ndarray

    def is_identity(self) -> bool:
        return not np.any(self.precision)


@dataclass
class MeanFieldState:
    """Product-form Gaussian approximation plus its message table.

    ``frozen`` lists blocks whose factor is held fixed (the cut block after
    :func:`run_cut_cavi`); ``deleted`` lists ``(factor, block)`` messages left
    out of that block's product.
    """

    means: dict
    covs: dict
    messages: dict = field(default_factory=dict)
    iteration: int = 0
    converged: bool = False
    elbo_trace: list = field(default_factory=list)
    frozen: tuple = ()
    deleted: tuple = ()

    def copy(self) -> "MeanFieldState":
        return MeanFieldState(
            {k: v.copy() for k, v in self.means.items()},
            {k: v.copy() for k, v in self.covs.items()},
            dict(self.messages), self.iteration, self.converged, list(self.elbo_trace),
            self.frozen, self.deleted,
        )

    def natural(self, block: str) -> tuple[np.ndarray, np.ndarray]:
        """``(precision, precision @ mean)`` of ``q_block``."""
        P = np.linalg.inv(self.covs[block])
        return P, P @ self.means[block]

    def variance(self, block: str) -> np.ndarray:
        return np.diag(self.covs[block]).copy()

    def incoming(self, block: str) -> tuple[np.ndarray, np.ndarray]:
        """Sum of the natural parameters of the retained messages into ``block``."""
        d = self.means[block].size
        P, h = np.zeros((d, d)), np.zeros(d)
        for (f, b), m in self.messages.items():
            if b == block and (f, b) not in self.deleted:
                P = P + m.precision
                h = h + m.shift
        return P, h

    def summary(self) -> dict:
        return {
            "means": {k: v.tolist() for k, v in self.means.items()},
            "variances": {k: self.variance(k).tolist() for k in self.means},
            "iterations": self.iteration,
            "converged": self.converged,
        }


def check_conjugate(g: FactorGraph) -> None:
    for b in g.partition.blocks:
        if not isinstance(b.transform, Identity):
            raise UnsupportedModelError(
                f"block {b.name!r} uses a {b.transform.name} transform; mean-field message passing "
                "needs Gaussian-linear graphs, use the ffvi method instead"
            )
    for f in g.factors:
        if f.quadratic is None:
            raise UnsupportedModelError(
                f"factor {f.name!r} is not Gaussian-linear; use the ffvi method instead"
            )


def _factor_slices(f: Factor, g: FactorGraph) -> dict[str, slice]:
    out, start = {}, 0
    for name in f.blocks:
        d = g.partition[name].dim
        out[name] = slice(start, start + d)
        start += d
    return out


def compute_message(f: Factor, block: str, means: dict, g: FactorGraph) -> GaussianMessage:
    q = f.quadratic
    sl = _factor_slices(f, g)
    si = sl[block]
    shift = q.b[si].copy()
    for other, so in sl.items():
        if other != block:
            shift -= q.A[si, so] @ means[other]
    return GaussianMessage(f.name, block, q.A[si, si].copy(), shift)


def _normalize(P, h, block):
    if not np.all(np.isfinite(P)) or not np.all(np.isfinite(h)):
        raise NumericError(f"non-finite natural parameters for block {block!r}")
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise NumericError(f"precision of q_{block} is not positive definite") from None
    cov = np.linalg.inv(P)
    cov = 0.5 * (cov + cov.T)
    mean = np.linalg.solve(L.T, np.linalg.solve(L, h))
    return mean, cov


def init_state(g: FactorGraph, init=None) -> MeanFieldState:
    """Start from the given means (or zeros) and unit covariances."""
    check_conjugate(g)
    part = g.partition
    if init is None:
        vals = {b.name: np.zeros(b.dim) for b in part.blocks}
    elif isinstance(init, dict):
        vals = {b.name: np.asarray(init[b.name], dtype=float).reshape(-1) for b in part.blocks}
    else:
        vals = part.split(init)
    means = {k: np.array(v, dtype=float) for k, v in vals.items()}
    covs = {b.name: np.eye(b.dim) for b in part.blocks}
    return MeanFieldState(means, covs)


def cavi_update(state: MeanFieldState, g: FactorGraph, block: str) -> MeanFieldState:
    """Recompute the messages into ``block`` and set ``q_block`` to their product.

    Updates ``state`` in place and returns it.
    """
    check_conjugate(g)
    return _update(state, g, block)


def _update(state, g, block):
    if block in state.frozen:
        return state
    for f in g.factors_touching(block):
        state.messages[(f.name, block)] = compute_message(f, block, state.means, g)
    P, h = state.incoming(block)
    state.means[block], state.covs[block] = _normalize(P, h, block)
    return state


def elbo(state: MeanFieldState, g: FactorGraph) -> float:
    """``sum_j E_q log f_j + sum_i H(q_i)`` for a product of Gaussians."""
    total = 0.0
    for f in g.factors:
        q = f.quadratic
        sl = _factor_slices(f, g)
        m = np.concatenate([state.means[n] for n in f.blocks]) if f.blocks else np.zeros(0)
        tr = sum(np.trace(q.A[s, s] @ state.covs[n]) for n, s in sl.items())
        total += -0.5 * (tr + m @ q.A @ m) + q.b @ m + q.c
    for name, cov in state.covs.items():
        d = cov.shape[0]
        total += 0.5 * (d * (1.0 + LOG_2PI) + np.linalg.slogdet(cov)[1])
    return float(total)


def _sweep(state, g, order):
    old_m = {k: v.copy() for k, v in state.means.items()}
    old_c = {k: v.copy() for k, v in state.covs.items()}
    for name in order:
        _update(state, g, name)
    state.iteration += 1
    change = 0.0
    for k in state.means:
        change = max(change, np.max(np.abs(state.means[k] - old_m[k])), np.max(np.abs(state.covs[k] - old_c[k])))
        if not (np.all(np.isfinite(state.means[k])) and np.all(np.isfinite(state.covs[k]))):
            raise NumericError(f"non-finite moments for block {k!r}", iteration=state.iteration)
    return change


def _iterate(state, g, order, tol, max_sweeps, track_elbo):
    if track_elbo:
        state.elbo_trace.append(elbo(state, g))
    for _ in range(max_sweeps):
        change = _sweep(state, g, order)
        if track_elbo:
            state.elbo_trace.append(elbo(state, g))
        if change < tol:
            state.converged = True
            break
    return state


def run_cavi(g: FactorGraph, init=None, tol: float = 1e-10, max_sweeps: int = 10000,
             track_elbo: bool = True) -> MeanFieldState:
    """Coordinate ascent over all blocks in registration order until moments settle.

    Convergence means the largest absolute change of any mean or covariance
    entry over one sweep is below ``tol``.  The ELBO is recorded before the
    first sweep and after each one unless ``track_elbo`` is off.
    """
    state = init_state(g, init)
    return _iterate(state, g, g.partition.names, tol, max_sweeps, track_elbo)


def cut_marginal(state: MeanFieldState, block: str, drop_factor: str) -> tuple[np.ndarray, np.ndarray]:
    """``q_cut,block``: product of the converged messages minus the deleted one.

    Returns ``(mean, cov)``.  Natural parameters are obtained by subtracting
    the deleted message's natural parameters from those of ``q_block``.
    """
    key = (drop_factor, block)
    if key not in state.messages:
        raise StructureError(f"no message from {drop_factor!r} to {block!r} in the state")
    P, h = state.natural(block)
    m = state.messages[key]
    P_cut, h_cut = P - m.precision, h - m.shift
    try:
        L = np.linalg.cholesky(P_cut)
    except np.linalg.LinAlgError:
        raise DegenerateCutError(
            f"deleting {drop_factor!r} leaves a non-positive precision for {block!r}", factor=drop_factor
        ) from None
    mean = np.linalg.solve(L.T, np.linalg.solve(L, h_cut))
    cov = np.linalg.inv(P_cut)
    return mean, 0.5 * (cov + cov.T)


def run_cut_cavi(g: FactorGraph, drop_factor: str, cut_block: str, tol: float = 1e-10,
                 max_sweeps: int = 10000, full_state: MeanFieldState | None = None) -> MeanFieldState:
    """Cut approximation: freeze ``q_cut_block`` then re-optimize the other blocks.

    The frozen marginal is computed once from the converged full-model
    messages and never recomputed.
    """
    if cut_block not in g.partition:
        raise StructureError(f"unknown block {cut_block!r}")
    if full_state is None:
        full_state = run_cavi(g, tol=tol, max_sweeps=max_sweeps)
    mean, cov = cut_marginal(full_state, cut_block, drop_factor)
    state = full_state.copy()
    state.means[cut_block], state.covs[cut_block] = mean, cov
    state.frozen = (cut_block,)
    state.deleted = ((drop_factor, cut_block),)
    state.iteration = 0
    state.converged = False
    state.elbo_trace = []
    order = [n for n in g.partition.names if n != cut_block]
    for _ in range(max_sweeps):
        change = _sweep(state, g, order)
        if change < tol:
            state.converged = True
            break
    return state
