"""Command-line front end: ``cutvi fit | check | oracle | simulate``.

Options come from defaults, then an optional JSON ``--config`` file, then
command-line flags (highest precedence).  ``CUTVI_OUTPUT_DIR`` overrides the
output directory from a config file but not ``--out``.  All randomness flows
from ``--seed`` through named streams.

Exit codes: 0 success, 2 configuration or data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from cutvi import ffvi, hybrid, io, mfvb, oracle
from cutvi.conflict import FfviRecipe, MfvbRecipe, STATISTICS, conflict_check, imputation_conflict
from cutvi.errors import CutVIError, NumericError, StructureError, UnsupportedModelError
from cutvi.ffvi import GaussianVariational
from cutvi.models import REGISTRY, AgriModel, BiasedNormalModel, HpvModel
from cutvi.models.agri import LEVELS
from cutvi.rng import parallel_map, stream

log = logging.getLogger("cutvi")

COMMANDS = ("fit", "check", "oracle", "simulate")
METHODS = ("mfvb", "ffvi", "hybrid")
TARGETS = ("cut", "full")
DEFAULT_METHOD = {"biased-normal": "mfvb", "hpv": "ffvi", "agri": "hybrid"}
OUTPUT_ENV = "CUTVI_OUTPUT_DIR"
GRID_POINTS = 512
GRID_HALF_WIDTH = 5.0
COMPARE_DRAWS = 20000
ELBO_TAIL = 10


class ConfigError(StructureError):
    """Invalid or incomplete run configuration."""


@dataclass
class RunConfig:
    """Fully resolved options of one command; echoed into ``summary.json``."""

    command: str
    model: str = "biased-normal"
    data: list = field(default_factory=list)
    method: str | None = None
    target: str = "cut"
    k1: int = 20000
    k2: int = 20000
    k_rep: int = 3000
    s: int = 100
    n_keep: int = hybrid.N_KEEP
    tol: float = 1e-10
    max_sweeps: int = 10000
    seed: int | None = None
    statistic: str = "eq18"
    out: str = "cutvi-output"
    iters: int = 20000
    chains: int = 1
    inner_mh: int | None = None
    compare: bool = False
    jobs: int = 1
    scale: float = 0.1
    delta1: float = 1.0
    delta2: float = 100.0
    misspecified: bool = False
    log_every: int = 1000

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def stochastic(self) -> bool:
        return not (self.command == "fit" and self.method == "mfvb" and self.data)

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.model not in REGISTRY:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {', '.join(REGISTRY)}")
        if self.method is None:
            self.method = DEFAULT_METHOD[self.model]
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.target not in TARGETS:
            raise ConfigError(f"unknown target {self.target!r}; expected cut or full")
        if self.statistic not in STATISTICS:
            raise ConfigError(f"unknown statistic {self.statistic!r}; expected eq18 or sec53")
        for name in ("k1", "k2", "k_rep", "n_keep", "iters", "chains", "jobs", "max_sweeps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.s < 1:
            raise ConfigError("S must be >= 1")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")
        if self.inner_mh is not None and self.inner_mh < 0:
            raise ConfigError("inner-mh must be >= 0")
        if self.seed is None and self.stochastic:
            raise ConfigError(f"--seed is required for {self.command}")
        if self.seed is not None and not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        return self


# -- configuration -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cutvi", description="Variational inference for cutting feedback.")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON file of option values; flags override it")
        sp.add_argument("--model", choices=sorted(REGISTRY), default=S)
        sp.add_argument("--data", nargs="+", default=S,
                        help="data CSV(s): z.csv w.csv for biased-normal, one file for hpv and agri")
        sp.add_argument("--seed", type=int, default=S)
        sp.add_argument("--out", default=S, help=f"output directory (or ${OUTPUT_ENV})")
        sp.add_argument("--jobs", type=int, default=S, help="worker processes")
        sp.add_argument("--delta1", type=float, default=S, help="biased-normal prior precision of phi")
        sp.add_argument("--delta2", type=float, default=S, help="biased-normal prior precision of eta")
        sp.add_argument("--log-every", dest="log_every", type=int, default=S,
                        help="progress line every N iterations (0 = quiet)")

    def fitting(sp):
        sp.add_argument("--method", choices=METHODS, default=S)
        sp.add_argument("--target", choices=TARGETS, default=S)
        sp.add_argument("--k1", type=int, default=S, help="stage-1 (or full-fit) iterations")
        sp.add_argument("--k2", type=int, default=S, help="stage-2 iterations")
        sp.add_argument("--n-keep", dest="n_keep", type=int, default=S, help="hybrid trail length")
        sp.add_argument("--tol", type=float, default=S, help="mfvb convergence tolerance")
        sp.add_argument("--max-sweeps", dest="max_sweeps", type=int, default=S)
        sp.add_argument("--scale", type=float, default=S, help="initial Cholesky diagonal")

    fp = sub.add_parser("fit", help="fit a cut or full variational approximation")
    common(fp)
    fitting(fp)

    cp = sub.add_parser("check", help="cut-or-not diagnostic")
    common(cp)
    fitting(cp)
    cp.add_argument("--s", "-S", dest="s", type=int, default=S, help="number of reference replications")
    cp.add_argument("--statistic", choices=STATISTICS, default=S)
    cp.add_argument("--k-rep", dest="k_rep", type=int, default=S, help="ffvi iterations per replication")

    op = sub.add_parser("oracle", help="MCMC reference chains")
    common(op)
    fitting(op)
    op.add_argument("--iters", type=int, default=S)
    op.add_argument("--chains", type=int, default=S)
    op.add_argument("--inner-mh", dest="inner_mh", type=int, default=S)
    op.add_argument("--compare", action="store_true", default=S,
                    help="also fit the variational approximation and report moment discrepancies")

    sp = sub.add_parser("simulate", help="write a synthetic dataset and its generating values")
    common(sp)
    sp.add_argument("--misspecified", action="store_true", default=S,
                    help="generate from a biased w-side (hpv) or PO (agri) mechanism")
    return p


def resolve_config(argv=None) -> RunConfig:
    ns = vars(build_parser().parse_args(argv))
    values = {}
    path = ns.pop("config", None)
    if path:
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        values = {k.replace("-", "_").lower(): v for k, v in values.items()}
        values.pop("command", None)
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if OUTPUT_ENV in os.environ and os.environ[OUTPUT_ENV]:
        values["out"] = os.environ[OUTPUT_ENV]
    values.update(ns)
    if isinstance(values.get("data"), str):
        values["data"] = [values["data"]]
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


# -- data ------------------------------------------------------------------------


def load_model(cfg: RunConfig):
    """Model from ``--data`` files, or the default synthetic instance for the seed."""
    if cfg.data:
        if cfg.model == "biased-normal":
            if len(cfg.data) != 2:
                raise ConfigError("biased-normal needs two data files: z.csv w.csv")
            return io.load_biased_normal(cfg.data[0], cfg.data[1], cfg.delta1, cfg.delta2)
        if len(cfg.data) != 1:
            raise ConfigError(f"{cfg.model} needs exactly one data file")
        if cfg.model == "hpv":
            return io.load_hpv(cfg.data[0])
        return AgriModel(io.load_agri(cfg.data[0]))
    return synthetic_model(cfg)[0]


def synthetic_model(cfg: RunConfig):
    rng = stream(cfg.seed, "data")
    if cfg.model == "biased-normal":
        m = BiasedNormalModel.demo(rng)
        m = BiasedNormalModel(m.z, m.w, cfg.delta1, cfg.delta2)
        return m, {"phi": 0.0, "eta": 1.0}
    if cfg.model == "hpv":
        m = HpvModel.synthetic(rng, overdispersion=1.0 if cfg.misspecified else 0.0)
        return m, {"eta": [-8.0, 6.0], "overdispersion": 1.0 if cfg.misspecified else 0.0}
    return AgriModel.synthetic(rng, po_misspecified=cfg.misspecified)


# -- shared output helpers ----------------------------------------------------------


def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def gaussian_summary(q: GaussianVariational, labels) -> dict:
    return {"labels": list(labels), "mu": q.mu, "C": q.C, "sd": q.sd}


def density_rows(labels, means, sds):
    """``(label, x, density)`` on 512 equally spaced points over mean +- 5 sd."""
    for lab, m, s in zip(labels, np.reshape(means, -1), np.reshape(sds, -1)):
        x = np.linspace(m - GRID_HALF_WIDTH * s, m + GRID_HALF_WIDTH * s, GRID_POINTS)
        for xi, di in zip(x, norm.pdf(x, m, s)):
            yield lab, xi, di


def elbo_rows(stages):
    for name, res in stages:
        for i, (e, ma) in enumerate(zip(res.elbo, res.elbo_ma)):
            yield i + 1, name, e, ma


def elbo_tail(res) -> list:
    return res.elbo_ma[-ELBO_TAIL:].tolist()


# -- fit -------------------------------------------------------------------------


def _check_method(cfg: RunConfig, model):
    if cfg.method == "hybrid" and not isinstance(model, AgriModel):
        raise UnsupportedModelError(f"hybrid VI needs a model with discrete latents; {model.name!r} has none")
    if cfg.method != "hybrid" and isinstance(model, AgriModel):
        raise UnsupportedModelError("the agri model has discrete latent manure levels; use --method hybrid")


def fit_mfvb(cfg: RunConfig, model):
    g = model.graph()
    full = mfvb.run_cavi(g, tol=cfg.tol, max_sweeps=cfg.max_sweeps)
    state = full
    if cfg.target == "cut":
        state = mfvb.run_cut_cavi(g, model.cut_factors[0], model.cut_block, cfg.tol, cfg.max_sweeps, full_state=full)
    names = g.partition.names
    mean = np.concatenate([state.means[n] for n in names])
    sd = np.concatenate([np.sqrt(state.variance(n)) for n in names])
    summary = {
        "blocks": {n: {"mean": state.means[n], "cov": state.covs[n]} for n in names},
        "iterations": {"full": full.iteration, **({"cut": state.iteration} if state is not full else {})},
        "converged": bool(state.converged and full.converged),
        "elbo_tail": full.elbo_trace[-ELBO_TAIL:],
    }
    elbo = [(i, "full", e, e) for i, e in enumerate(full.elbo_trace)]
    return summary, elbo, (g.partition.labels(), mean, sd), {}


def fit_ffvi(cfg: RunConfig, model):
    g = model.graph()
    rng = stream(cfg.seed, "fit")
    labels = g.partition.labels()
    if cfg.target == "cut":
        res = ffvi.fit_cut(g, cfg.k1, cfg.k2, rng, init=model.init_theta(), scale=cfg.scale, log_every=cfg.log_every)
        q = res.q
        stages = [("stage1", res.stage1), ("stage2", res.stage2)]
        k = res.q_phi.dim
        summary = {
            "q": gaussian_summary(q, labels),
            "q_phi": gaussian_summary(res.q_phi, labels[:k]),
            "conditional_slope": q.conditional_slope(),
            "elbo_tail": {"stage1": elbo_tail(res.stage1), "stage2": elbo_tail(res.stage2)},
        }
    else:
        res = ffvi.fit_full(g, cfg.k1, rng, init=model.init_theta(), scale=cfg.scale, log_every=cfg.log_every)
        q = res.q
        stages = [("full", res)]
        summary = {"q": gaussian_summary(q, labels), "elbo_tail": elbo_tail(res)}
    summary["dim"] = q.dim
    return summary, list(elbo_rows(stages)), (labels, q.mu, q.sd), {}


def gamma_marginal(q: GaussianVariational, idx: int) -> dict:
    m, s = float(q.mu[idx]), float(q.sd[idx])
    return {"mean": m, "sd": s, "p_negative": float(norm.cdf(-m / s))}


def run_hybrid(cfg: RunConfig, model: AgriModel, target: str, rng):
    if target == "cut":
        hm = model.hybrid_cut()
        init = GaussianVariational.initial(hm.graph.dim, model.init_hm(), cfg.scale)
    else:
        hm = model.hybrid_full()
        init = GaussianVariational.initial(hm.graph.dim, np.concatenate([model.init_hm(), model.init_po()]), cfg.scale)
    return hm, hybrid.run_algorithm1(hm, init, cfg.k1, rng, n_keep=cfg.n_keep, log_every=cfg.log_every)


def trail_rows(trail):
    for i, p in enumerate(trail.level_frequencies()):
        yield (i, *p)


def fit_hybrid(cfg: RunConfig, model: AgriModel):
    rng = stream(cfg.seed, "fit")
    hm, s1 = run_hybrid(cfg, model, cfg.target, rng)
    labels = hm.graph.partition.labels()
    summary = {
        "stage1": gaussian_summary(s1.q, labels),
        "trail": {"length": len(s1.trail), "level_frequencies": s1.trail.level_frequencies()},
        "elbo_tail": {"stage1": elbo_tail(s1.fit)},
    }
    stages = [("stage1", s1.fit)]
    means, sds, all_labels = [s1.q.mu], [s1.q.sd], list(labels)
    if cfg.target == "cut":
        po = model.po_graph()
        s2 = hybrid.stage2_with_imputation(po, s1.trail, cfg.k2, rng,
                                           init=GaussianVariational.initial(po.dim, model.init_po(), cfg.scale),
                                           log_every=cfg.log_every)
        po_labels = po.partition.labels()
        summary["stage2"] = gaussian_summary(s2.q, po_labels)
        summary["gamma"] = gamma_marginal(s2.q, po_labels.index("gamma"))
        summary["elbo_tail"]["stage2"] = elbo_tail(s2)
        stages.append(("stage2", s2))
        means.append(s2.q.mu)
        sds.append(s2.q.sd)
        all_labels += po_labels
    else:
        summary["gamma"] = gamma_marginal(s1.q, labels.index("gamma"))
    extra = {"trail.csv": (["i", *(f"p_{lv}" for lv in LEVELS)], list(trail_rows(s1.trail)))}
    return summary, list(elbo_rows(stages)), (all_labels, np.concatenate(means), np.concatenate(sds)), extra


def cmd_fit(cfg: RunConfig) -> dict:
    model = load_model(cfg)
    _check_method(cfg, model)
    runner = {"mfvb": fit_mfvb, "ffvi": fit_ffvi, "hybrid": fit_hybrid}[cfg.method]
    t0 = time.perf_counter()
    summary, elbo, (labels, means, sds), extra = runner(cfg, model)
    wall = time.perf_counter() - t0
    out = output_dir(cfg)
    summary = {"config": cfg.to_dict(), "model": model.name, "method": cfg.method, "target": cfg.target, **summary}
    io.write_json(out / "summary.json", summary)
    io.write_csv(out / "elbo.csv", ["iteration", "stage", "elbo", "elbo_ma"], elbo)
    io.write_csv(out / "density_grid.csv", ["parameter", "x", "density"], density_rows(labels, means, sds))
    for name, (header, rows) in extra.items():
        io.write_csv(out / name, header, rows)
    io.write_json(out / "timing.json", {"command": "fit", "wall_seconds": wall})
    print(f"fit {model.name} {cfg.method} {cfg.target}: wrote {out}")
    return summary


# -- check -----------------------------------------------------------------------


def cmd_check(cfg: RunConfig) -> dict:
    model = load_model(cfg)
    out = output_dir(cfg)
    t0 = time.perf_counter()
    if isinstance(model, AgriModel):
        cfg.method = "hybrid"
        _, cut = run_hybrid(cfg, model, "cut", stream(cfg.seed, "check-cut"))
        _, full = run_hybrid(cfg, model, "full", stream(cfg.seed, "check-full"))
        table = imputation_conflict(cut.trail, full.trail)
        header = ["i"] + [f"{s}_{lv}" for lv in LEVELS for s in ("cut", "full", "diff")]
        io.write_csv(out / "imputation_conflict.csv", header, table.rows())
        report = {"kind": "imputation", "max_discrepancy": table.max_discrepancy,
                  "mean_discrepancy": table.mean_discrepancy, "n_obs": table.q_cut.shape[0]}
        line = f"max |q_cut - q_full| = {table.max_discrepancy:.4f}"
    else:
        if cfg.method == "hybrid":
            raise UnsupportedModelError(f"{model.name!r} has no discrete latents; use --method mfvb or ffvi")
        recipe = (MfvbRecipe(cfg.tol, cfg.max_sweeps) if cfg.method == "mfvb"
                  else FfviRecipe(cfg.k1, cfg.k1, cfg.k_rep, cfg.scale))
        rep = conflict_check(model, cfg.s, recipe, cfg.seed, cfg.statistic, cfg.jobs)
        io.write_column(out / "reference_statistics.csv", rep.t_ref, "statistic")
        report = {"kind": "kl", **rep.to_dict()}
        line = f"T_obs = {rep.t_obs:.6g}  p~ = {rep.p_display()}"
    wall = time.perf_counter() - t0
    summary = {"config": cfg.to_dict(), "model": model.name, **report}
    io.write_json(out / "conflict.json", summary)
    io.write_json(out / "timing.json", {"command": "check", "wall_seconds": wall})
    print(line)
    return summary


# -- oracle ----------------------------------------------------------------------


def _one_chain(cfg: RunConfig, model, j: int) -> oracle.ChainOutput:
    rng = stream(cfg.seed, "oracle", j)
    if cfg.target == "cut":
        return oracle.cut_sampler(model, cfg.iters, rng, inner_mh=cfg.inner_mh, seed=cfg.seed)
    g = model.graph()
    try:
        mfvb.check_conjugate(g)
    except UnsupportedModelError:
        return oracle.mwg_full(g, cfg.iters, rng, init=model.init_theta(), seed=cfg.seed)
    return oracle.gibbs_full(g, cfg.iters, rng, init=model.init_theta(), burn_in=cfg.iters // 10, seed=cfg.seed)


def chain_summary(ch: oracle.ChainOutput) -> dict:
    return {"mean": ch.mean(), "sd": ch.sd(), "mcse": ch.mcse(), **ch.metadata()}


def pooled_summary(chains) -> dict:
    draws = np.concatenate([c.draws for c in chains])
    mcse = np.sqrt(np.sum([c.mcse() ** 2 for c in chains], axis=0)) / len(chains)
    return {"mean": draws.mean(axis=0), "sd": draws.std(axis=0, ddof=1), "mcse": mcse, "n_draws": draws.shape[0]}


def variational_draws(cfg: RunConfig, model) -> np.ndarray:
    """Constrained-scale draws from the variational fit matching ``cfg.target``."""
    g = model.graph()
    if cfg.method == "mfvb":
        summary = fit_mfvb(cfg, model)[0]
        blocks = summary["blocks"]
        mu = np.concatenate([blocks[n]["mean"] for n in g.partition.names])
        C = np.linalg.cholesky(np.diag(np.concatenate([np.diag(blocks[n]["cov"]) for n in g.partition.names])))
        q = GaussianVariational(mu, C)
    else:
        summary = fit_ffvi(cfg, model)[0]
        q = GaussianVariational(np.asarray(summary["q"]["mu"]), np.asarray(summary["q"]["C"]))
    U = q.sample(stream(cfg.seed, "compare"), COMPARE_DRAWS)
    return oracle._to_constrained_rows(g.partition, U)


def compare_rows(names, vi_draws, pooled):
    vm, vs = vi_draws.mean(axis=0), vi_draws.std(axis=0, ddof=1)
    for i, n in enumerate(names):
        se = pooled["mcse"][i]
        z = (vm[i] - pooled["mean"][i]) / se if se > 0 else float("inf")
        yield n, vm[i], pooled["mean"][i], vm[i] - pooled["mean"][i], z, vs[i], pooled["sd"][i]


def cmd_oracle(cfg: RunConfig) -> dict:
    model = load_model(cfg)
    if isinstance(model, AgriModel):
        raise UnsupportedModelError("no MCMC oracle for the agri model: its full posterior has discrete latents")
    t0 = time.perf_counter()
    chains = parallel_map(lambda j: _one_chain(cfg, model, j), cfg.chains, cfg.jobs)
    wall = time.perf_counter() - t0
    out = output_dir(cfg)
    names = chains[0].names
    for j, ch in enumerate(chains):
        io.write_csv(out / f"chain_{j}.csv", names, ch.draws)
    summary = {
        "config": cfg.to_dict(), "model": model.name, "target": cfg.target, "names": names,
        "chains": [chain_summary(c) for c in chains], "pooled": pooled_summary(chains),
    }
    if cfg.compare:
        rows = list(compare_rows(names, variational_draws(cfg, model), summary["pooled"]))
        header = ["parameter", "vi_mean", "oracle_mean", "diff", "z_mcse", "vi_sd", "oracle_sd"]
        io.write_csv(out / "compare.csv", header, rows)
        summary["compare"] = [dict(zip(header, r)) for r in rows]
        for r in rows:
            print(f"{r[0]:>12s}  vi {r[1]: .6g}  oracle {r[2]: .6g}  diff {r[3]: .3g}  ({r[4]: .2f} MCSE)")
    io.write_json(out / "oracle.json", summary)
    io.write_json(out / "timing.json", {"command": "oracle", "wall_seconds": wall})
    print(f"oracle {model.name} {cfg.target}: {cfg.chains} chain(s) x {chains[0].draws.shape[0]} draws, wrote {out}")
    return summary


# -- simulate --------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> dict:
    out = output_dir(cfg)
    model, truth = synthetic_model(cfg)
    if cfg.model == "biased-normal":
        files = [io.write_column(out / "z.csv", model.z, "z"), io.write_column(out / "w.csv", model.w, "w")]
    elif cfg.model == "hpv":
        files = [io.write_hpv(out / "hpv.csv", model)]
    else:
        files = [io.write_agri(out / "agri.csv", model.data)]
    summary = {"config": cfg.to_dict(), "model": cfg.model, "files": [f.name for f in files], "truth": truth}
    io.write_json(out / "truth.json", summary)
    print(f"simulate {cfg.model}: wrote {', '.join(f.name for f in files)} to {out}")
    return summary


# -- entry point -----------------------------------------------------------------


def run(cfg: RunConfig) -> dict:
    return {"fit": cmd_fit, "check": cmd_check, "oracle": cmd_oracle, "simulate": cmd_simulate}[cfg.command](cfg)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(argv)
        run(cfg)
    except NumericError as exc:
        where = f" (iteration {exc.iteration})" if exc.iteration is not None else ""
        print(f"numeric failure{where}: {exc}", file=sys.stderr)
        return 3
    except CutVIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
