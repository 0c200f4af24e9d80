"""Diagnostics for deciding whether to cut.

``conflict_check`` compares ``q(phi | y)`` with ``q(phi | z)`` through a KL
statistic and calibrates it against datasets simulated from ``p(w | z)``.
``imputation_conflict`` compares discrete imputations under the cut and the
full posterior, for models whose w-side data are not random.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from cutvi import mfvb
from cutvi.errors import CutVIError, StructureError, UnsupportedCheckError
from cutvi.ffvi import GaussianVariational, fit, fit_full, kl_between_gaussians
from cutvi.hybrid import Trail
from cutvi.rng import parallel_map, stream

STATISTICS = ("eq18", "sec53")


def kl_statistic(q_y, q_z, variant: str = "eq18") -> float:
    """``KL(q_y || q_z)`` on phi-marginals.

    ``sec53`` keeps only the log-determinant and Mahalanobis terms (drops
    ``tr(S_z^-1 S_y) - d``); it matches the univariate display used for the
    biased-normal figure.
    """
    if variant == "eq18":
        return kl_between_gaussians(q_y, q_z)
    if variant != "sec53":
        raise StructureError(f"unknown statistic {variant!r}; expected one of {STATISTICS}")
    my, Sy = np.atleast_1d(q_y.mean), np.atleast_2d(q_y.cov)
    mz, Sz = np.atleast_1d(q_z.mean), np.atleast_2d(q_z.cov)
    diff = my - mz
    logdet = np.linalg.slogdet(Sz)[1] - np.linalg.slogdet(Sy)[1]
    return float(0.5 * (logdet + diff @ np.linalg.solve(Sz, diff)))


def tail_probability(t_obs: float, t_ref) -> float:
    """``(1/S) #{i : t_ref_i >= t_obs}``; ties count toward the tail."""
    t_ref = np.asarray(t_ref, dtype=float)
    if t_ref.size == 0:
        raise StructureError("no reference statistics")
    return float(np.count_nonzero(t_ref >= t_obs) / t_ref.size)


# ---------------------------------------------------------------------------
# Fit recipes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhiFit:
    """Gaussian phi-marginal of a fit, plus whatever is needed to warm-start."""

    q: GaussianVariational
    converged: bool = True
    warm: object = None


class MfvbRecipe:
    """Mean-field message passing; q(phi | z) is the CAVI fit of the phi-module."""

    name = "mfvb"

    def __init__(self, tol: float = 1e-10, max_sweeps: int = 10000):
        self.tol = tol
        self.max_sweeps = max_sweeps

    def _fit(self, g, init=None):
        state = mfvb.run_cavi(g, init=init, tol=self.tol, max_sweeps=self.max_sweeps, track_elbo=False)
        names = g.partition.module_names("phi")
        mean = np.concatenate([state.means[n] for n in names])
        cov = _block_diag([state.covs[n] for n in names])
        return PhiFit(GaussianVariational(mean, np.linalg.cholesky(cov)), state.converged, state.means)

    def fit_z(self, model, rng):
        return self._fit(model.graph().phi_module())

    def fit_y(self, model, rng, warm=None):
        return self._fit(model.graph(), init=warm)


class FfviRecipe:
    """Fixed-form Gaussian fits.

    ``q(phi | y)`` for the observed data is fitted from the model's starting
    point for ``K_y`` iterations; replications, and the observed statistic
    itself, are then refitted for ``K_rep`` iterations from that fit, so the
    observed and reference statistics go through the same optimizer path.
    """

    name = "ffvi"

    def __init__(self, K_z: int = 20000, K_y: int = 20000, K_rep: int = 3000, scale: float = 0.1):
        self.K_z, self.K_y, self.K_rep, self.scale = K_z, K_y, K_rep, scale

    def fit_z(self, model, rng):
        g = model.graph().phi_module()
        k = g.dim
        init = model.init_theta()[:k]
        res = fit(g.value_and_grad, GaussianVariational.initial(k, init, self.scale), self.K_z, rng, log_every=0)
        return PhiFit(res.q)

    def fit_y(self, model, rng, warm=None):
        g = model.graph()
        k = g.partition.module_dim("phi")
        if warm is None:
            res = fit_full(g, self.K_y, rng, init=model.init_theta(), scale=self.scale, log_every=0)
        else:
            res = fit(g.value_and_grad, warm, self.K_rep, rng, log_every=0)
        q = res.q
        return PhiFit(GaussianVariational(q.mu[:k], q.C[:k, :k]), True, q)


RECIPES = {"mfvb": MfvbRecipe, "ffvi": FfviRecipe}


def _block_diag(mats):
    d = sum(m.shape[0] for m in mats)
    out = np.zeros((d, d))
    i = 0
    for m in mats:
        k = m.shape[0]
        out[i:i + k, i:i + k] = m
        i += k
    return out


# ---------------------------------------------------------------------------
# Conflict check
# ---------------------------------------------------------------------------


def simulate_reference_dataset(model, q_z: GaussianVariational, rng) -> np.ndarray:
    """One ``W ~ p(w | z)``: phi from ``q_z``, eta from its prior, then ``w``."""
    if not hasattr(model, "simulate_w"):
        raise UnsupportedCheckError(
            f"model {getattr(model, 'name', model)!r} has no w-side simulator; "
            "use imputation_conflict for this model"
        )
    g = model.graph()
    names = g.partition.module_names("phi")
    phi_part = g.partition.subset(names)
    phi = q_z.sample(rng, 1)[0]
    values = phi_part.to_constrained(phi)
    values.update(model.sample_eta_prior(values, rng))
    return model.simulate_w(values, rng)


@dataclass
class ConflictReport:
    t_obs: float
    t_ref: np.ndarray
    p_tilde: float
    S: int
    seed: int
    statistic: str = "eq18"
    recipe: str = "mfvb"
    converged: list = field(default_factory=list)
    failed: list = field(default_factory=list)

    @property
    def n_used(self) -> int:
        return int(np.size(self.t_ref))

    def p_display(self) -> str:
        if self.p_tilde == 0.0:
            return f"< 1/{self.n_used}"
        return f"{self.p_tilde:.17g}"

    def to_dict(self) -> dict:
        return {
            "t_obs": self.t_obs,
            "p_tilde": self.p_tilde,
            "p_display": self.p_display(),
            "S": self.S,
            "S_used": self.n_used,
            "seed": self.seed,
            "statistic": self.statistic,
            "recipe": self.recipe,
            "failed": list(self.failed),
            "converged": list(self.converged),
            "t_ref": [float(t) for t in self.t_ref],
        }


def conflict_check(model, S: int = 100, recipe="mfvb", seed: int = 0, statistic: str = "eq18",
                   n_jobs: int = 1, simulate=None) -> ConflictReport:
    """Simulation-calibrated KL conflict check.

    Replication ``i`` draws from the named stream ``("check", i)``, so the
    result depends only on ``seed``.  ``simulate(i, rng)`` may replace the
    reference-data simulator (used in tests).
    """
    if S < 1:
        raise StructureError("S must be >= 1")
    if statistic not in STATISTICS:
        raise StructureError(f"unknown statistic {statistic!r}")
    if isinstance(recipe, str):
        try:
            recipe = RECIPES[recipe]()
        except KeyError:
            raise StructureError(f"unknown recipe {recipe!r}") from None
    if simulate is None and not hasattr(model, "simulate_w"):
        raise UnsupportedCheckError(
            f"model {getattr(model, 'name', model)!r} has no w-side simulator; use imputation_conflict"
        )
    fz = recipe.fit_z(model, stream(seed, "check-z"))
    fy0 = recipe.fit_y(model, stream(seed, "check-y"))
    warm = fy0.warm if isinstance(recipe, FfviRecipe) else None
    fy = recipe.fit_y(model, stream(seed, "check-y-refit"), warm=warm) if warm is not None else fy0
    t_obs = kl_statistic(fy.q, fz.q, statistic)

    def replicate(i):
        rng = stream(seed, "check", i)
        try:
            W = simulate(i, rng) if simulate is not None else simulate_reference_dataset(model, fz.q, rng)
            f = recipe.fit_y(model.with_w(W), rng, warm=warm)
            return kl_statistic(f.q, fz.q, statistic), f.converged
        except CutVIError:
            return None

    results = parallel_map(replicate, S, n_jobs)
    failed = [i for i, r in enumerate(results) if r is None]
    if len(failed) > 0.1 * S:
        warnings.warn(f"{len(failed)} of {S} replications failed and were excluded", RuntimeWarning)
    ok = [r for r in results if r is not None]
    if not ok:
        raise CutVIError("every replication failed")
    t_ref = np.array([r[0] for r in ok])
    return ConflictReport(
        t_obs=t_obs, t_ref=t_ref, p_tilde=tail_probability(t_obs, t_ref), S=S, seed=seed,
        statistic=statistic, recipe=recipe.name, converged=[bool(r[1]) for r in ok], failed=failed,
    )


# ---------------------------------------------------------------------------
# Imputation conflict
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImputationConflictTable:
    """Per-observation level probabilities under the cut and the full fit."""

    q_cut: np.ndarray
    q_full: np.ndarray

    @property
    def abs_diff(self) -> np.ndarray:
        return np.abs(self.q_cut - self.q_full)

    @property
    def max_discrepancy(self) -> float:
        return float(self.abs_diff.max())

    @property
    def mean_discrepancy(self) -> float:
        return float(self.abs_diff.mean())

    def rows(self):
        """``(i, cut_0, full_0, diff_0, cut_1, ...)`` per observation."""
        for i in range(self.q_cut.shape[0]):
            row = [i]
            for m in range(self.q_cut.shape[1]):
                row += [self.q_cut[i, m], self.q_full[i, m], abs(self.q_cut[i, m] - self.q_full[i, m])]
            yield row


def imputation_conflict(trail_cut, trail_full, n_levels: int = 3) -> ImputationConflictTable:
    """Compare the empirical M-frequencies of two trails (or raw ``(draws, n)`` arrays)."""
    a, b = _freqs(trail_cut, n_levels), _freqs(trail_full, n_levels)
    if a.shape != b.shape:
        raise StructureError(f"trails cover different observations: {a.shape} vs {b.shape}")
    return ImputationConflictTable(a, b)


def _freqs(t, n_levels):
    if isinstance(t, Trail):
        return t.level_frequencies()
    M = np.atleast_2d(np.asarray(t))
    if M.shape[0] == 0 or M.size == 0:
        raise StructureError("trail is empty")
    return np.stack([np.mean(M == m, axis=0) for m in range(n_levels)], axis=1)
