"""Factor-graph representation of a joint Bayesian model.

A model is a set of factors ``f_j`` over named parameter blocks.  Each block
lives on an unconstrained scale; factors are written in terms of the
constrained (natural) values and the graph applies the support transforms and
their log-Jacobians, so every inference routine works on the real line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit, log_expit, logit

from cutvi.errors import NumericError, StructureError

__all__ = [
    "Transform",
    "Identity",
    "Log",
    "Logit",
    "GeneralizedLogit",
    "IDENTITY",
    "LOG",
    "LOGIT",
    "Block",
    "BlockPartition",
    "Quadratic",
    "Factor",
    "FactorGraph",
    "log_joint",
    "grad_log_joint",
    "restrict",
    "finite_difference_grad",
]

MODULE_TAGS = ("phi", "eta")


# ---------------------------------------------------------------------------
# Support transforms
# ---------------------------------------------------------------------------


class Transform:
    """Elementwise bijection from the real line onto a block's support.

    ``to_constrained`` maps unconstrained ``u`` to natural ``x``;
    ``to_unconstrained`` is its inverse.
    """

    name = "abstract"

    def to_constrained(self, u):
        raise NotImplementedError

    def to_unconstrained(self, x):
        raise NotImplementedError

    def dx_du(self, u, x):
        raise NotImplementedError

    def log_jacobian(self, u, x):
        raise NotImplementedError

    def grad_log_jacobian(self, u, x):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Identity(Transform):
    name = "identity"

    def to_constrained(self, u):
        return u

    def to_unconstrained(self, x):
        return np.asarray(x, dtype=float)

    def dx_du(self, u, x):
        return np.ones_like(u)

    def log_jacobian(self, u, x):
        return 0.0

    def grad_log_jacobian(self, u, x):
        return np.zeros_like(u)


class Log(Transform):
    """Positive support, ``x = exp(u)``."""

    name = "log"

    def to_constrained(self, u):
        return np.exp(u)

    def to_unconstrained(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise StructureError("log transform needs positive values")
        return np.log(x)

    def dx_du(self, u, x):
        return x

    def log_jacobian(self, u, x):
        return float(np.sum(u))

    def grad_log_jacobian(self, u, x):
        return np.ones_like(u)


class GeneralizedLogit(Transform):
    """Interval support ``(a, b)``, ``x = a + (b - a) * expit(u)``."""

    name = "generalized-logit"

    def __init__(self, a: float, b: float):
        if not a < b:
            raise StructureError(f"generalized-logit needs a < b, got a={a}, b={b}")
        self.a = float(a)
        self.b = float(b)
        self._width = self.b - self.a
        self._log_width = float(np.log(self._width))

    def to_constrained(self, u):
        return self.a + self._width * expit(u)

    def to_unconstrained(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= self.a) or np.any(x >= self.b):
            raise StructureError(f"values outside ({self.a}, {self.b})")
        return logit((x - self.a) / self._width)

    def dx_du(self, u, x):
        s = expit(u)
        return self._width * s * (1.0 - s)

    def log_jacobian(self, u, x):
        return float(np.sum(self._log_width + log_expit(u) + log_expit(-u)))

    def grad_log_jacobian(self, u, x):
        return 1.0 - 2.0 * expit(u)

    def __repr__(self):
        return f"GeneralizedLogit(a={self.a}, b={self.b})"


class Logit(GeneralizedLogit):
    """Unit-interval support."""

    name = "logit"

    def __init__(self):
        super().__init__(0.0, 1.0)

    def __repr__(self):
        return "Logit()"


IDENTITY = Identity()
LOG = Log()
LOGIT = Logit()


def transform_spec(t: Transform) -> dict:
    out = {"name": t.name}
    if isinstance(t, GeneralizedLogit) and not isinstance(t, Logit):
        out.update(a=t.a, b=t.b)
    return out


# ---------------------------------------------------------------------------
# Blocks and partitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Block:
    name: str
    dim: int = 1
    module: str = "phi"
    transform: Transform = IDENTITY

    def __post_init__(self):
        if self.dim < 1:
            raise StructureError(f"block {self.name!r} has dimension {self.dim} < 1")
        if self.module not in MODULE_TAGS:
            raise StructureError(
                f"block {self.name!r} has module tag {self.module!r}; expected one of {MODULE_TAGS}"
            )


class BlockPartition:
    """Ordered parameter blocks and the layout of the flat parameter vector."""

    def __init__(self, blocks: Iterable[Block]):
        self.blocks = tuple(blocks)
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise StructureError(f"duplicate block names in {names}")
        self.slices: dict[str, slice] = {}
        start = 0
        for b in self.blocks:
            self.slices[b.name] = slice(start, start + b.dim)
            start += b.dim
        self.dim = start
        self._by_name = {b.name: b for b in self.blocks}

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __contains__(self, name):
        return name in self._by_name

    def __getitem__(self, name) -> Block:
        try:
            return self._by_name[name]
        except KeyError:
            raise StructureError(f"unknown block {name!r}") from None

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.blocks)

    def module_names(self, tag: str) -> tuple[str, ...]:
        return tuple(b.name for b in self.blocks if b.module == tag)

    def module_dim(self, tag: str) -> int:
        return sum(b.dim for b in self.blocks if b.module == tag)

    def index_of(self, names: Iterable[str]) -> np.ndarray:
        """Flat-vector indices covered by the named blocks, in the given order."""
        idx = [np.arange(self.slices[n].start, self.slices[n].stop) for n in names]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=int)

    def subset(self, names: Iterable[str]) -> "BlockPartition":
        keep = set(names)
        return BlockPartition(b for b in self.blocks if b.name in keep)

    def split(self, theta) -> dict[str, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise StructureError(
                f"parameter vector has shape {theta.shape}, partition needs ({self.dim},)"
            )
        return {name: theta[s] for name, s in self.slices.items()}

    def flatten(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.dim)
        for b in self.blocks:
            v = np.asarray(values[b.name], dtype=float).reshape(-1)
            if v.shape != (b.dim,):
                raise StructureError(f"block {b.name!r} expects {b.dim} values, got {v.size}")
            out[self.slices[b.name]] = v
        return out

    def to_constrained(self, theta) -> dict[str, np.ndarray]:
        parts = self.split(theta)
        return {b.name: b.transform.to_constrained(parts[b.name]) for b in self.blocks}

    def to_unconstrained(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        return self.flatten(
            {b.name: b.transform.to_unconstrained(np.reshape(values[b.name], -1)) for b in self.blocks}
        )

    def labels(self) -> list[str]:
        """One label per flat coordinate, e.g. ``phi`` or ``gamma[3]``."""
        out = []
        for b in self.blocks:
            if b.dim == 1:
                out.append(b.name)
            else:
                out.extend(f"{b.name}[{i}]" for i in range(b.dim))
        return out

    def describe(self) -> list[dict]:
        return [
            {"name": b.name, "dim": b.dim, "module": b.module, "transform": transform_spec(b.transform)}
            for b in self.blocks
        ]


# ---------------------------------------------------------------------------
# Factors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Quadratic:
    """Gaussian-linear log-factor ``-0.5 x'Ax + b'x + c``.

    ``x`` stacks the factor's blocks in the factor's block order.  A factor
    carrying this tag is conjugate for mean-field Gaussian updates.
    """

    A: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if A.shape != (b.size, b.size):
            raise StructureError(f"quadratic A has shape {A.shape}, b has size {b.size}")
        if not np.allclose(A, A.T):
            raise StructureError("quadratic A must be symmetric")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))

    def value(self, x):
        return float(-0.5 * x @ self.A @ x + self.b @ x + self.c)

    def grad(self, x):
        return self.b - self.A @ x


LogDensityFn = Callable[[Mapping[str, np.ndarray], Mapping], float]
GradFn = Callable[[Mapping[str, np.ndarray], Mapping], Mapping[str, np.ndarray]]


@dataclass(frozen=True)
class Factor:
    """One term ``f_j`` of the joint density.

    ``log_density(values, data)`` and ``grad(values, data)`` receive a dict of
    constrained block values (only the blocks listed in ``blocks``) and the
    graph's data mapping.  ``grad`` returns a dict of gradients with respect
    to those constrained values; when it is ``None`` central finite
    differences are used.
    """

    name: str
    blocks: tuple[str, ...]
    log_density: LogDensityFn | None = None
    grad: GradFn | None = None
    kind: str = "likelihood"
    quadratic: Quadratic | None = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.kind not in ("prior", "likelihood"):
            raise StructureError(f"factor {self.name!r}: kind must be 'prior' or 'likelihood'")
        if self.log_density is None and self.quadratic is None:
            raise StructureError(f"factor {self.name!r} needs a log_density or a quadratic form")

    def _stack(self, values):
        return np.concatenate([np.reshape(values[n], -1) for n in self.blocks])

    def evaluate(self, values, data) -> float:
        if self.log_density is not None:
            return float(self.log_density(values, data))
        return self.quadratic.value(self._stack(values))

    def has_analytic_grad(self) -> bool:
        return self.grad is not None or (self.log_density is None and self.quadratic is not None)

    def gradient(self, values, data) -> dict[str, np.ndarray]:
        if self.grad is not None:
            return {n: np.asarray(v, dtype=float) for n, v in self.grad(values, data).items()}
        if self.log_density is None:
            g = self.quadratic.grad(self._stack(values))
            out, start = {}, 0
            for n in self.blocks:
                k = np.size(values[n])
                out[n] = g[start:start + k]
                start += k
            return out
        return finite_difference_grad(self, values, data)


def finite_difference_grad(factor: Factor, values, data) -> dict[str, np.ndarray]:
    """Central differences with step ``1e-5 * max(1, |x|)`` per coordinate."""
    out = {}
    base = {n: np.array(values[n], dtype=float, copy=True) for n in factor.blocks}
    for n in factor.blocks:
        x = base[n]
        g = np.empty(x.size)
        for i in range(x.size):
            h = 1e-5 * max(1.0, abs(x.flat[i]))
            orig = x.flat[i]
            x.flat[i] = orig + h
            up = factor.evaluate(base, data)
            x.flat[i] = orig - h
            down = factor.evaluate(base, data)
            x.flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        out[n] = g.reshape(np.shape(values[n]))
    return out


# ---------------------------------------------------------------------------
# Factor graph
# ---------------------------------------------------------------------------


class FactorGraph:
    """A joint model ``prod_j f_j(theta_A(j))`` over a block partition.

    Immutable after construction.  ``data`` holds named datasets (both the
    z-side and the w-side) and is passed to every factor.
    """

    def __init__(self, partition: BlockPartition, factors: Iterable[Factor], data: Mapping | None = None):
        self.partition = partition
        self.factors = tuple(factors)
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise StructureError(f"duplicate factor names in {names}")
        for f in self.factors:
            for bname in f.blocks:
                if bname not in partition:
                    raise StructureError(f"factor {f.name!r} references unknown block {bname!r}")
        self.data = MappingProxyType(dict(data or {}))
        self._factor_by_name = {f.name: f for f in self.factors}

    def __repr__(self):
        return f"FactorGraph(blocks={list(self.partition.names)}, factors={[f.name for f in self.factors]})"

    @property
    def dim(self) -> int:
        return self.partition.dim

    @property
    def factor_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors)

    def factor(self, name: str) -> Factor:
        try:
            return self._factor_by_name[name]
        except KeyError:
            raise StructureError(f"unknown factor {name!r}") from None

    def factors_touching(self, block: str) -> tuple[Factor, ...]:
        return tuple(f for f in self.factors if block in f.blocks)

    def _data(self, data):
        if not data:
            return self.data
        merged = dict(self.data)
        merged.update(data)
        return merged

    def _prepare(self, theta):
        parts = self.partition.split(theta)
        values = {}
        for b in self.partition.blocks:
            values[b.name] = b.transform.to_constrained(parts[b.name])
        return parts, values

    def log_joint(self, theta, data: Mapping | None = None) -> float:
        parts, values = self._prepare(theta)
        d = self._data(data)
        total = 0.0
        for f in self.factors:
            v = f.evaluate(values, d)
            if np.isnan(v):
                raise NumericError(f"factor {f.name!r} returned NaN", factor=f.name)
            if v == -np.inf:
                return -np.inf
            total += v
        for b in self.partition.blocks:
            total += b.transform.log_jacobian(parts[b.name], values[b.name])
        return float(total)

    def value_and_grad(self, theta, data: Mapping | None = None) -> tuple[float, np.ndarray]:
        """Log joint density and its gradient on the unconstrained scale.

        Returns ``(-inf, nan-vector)`` when some factor is ``-inf``.
        """
        parts, values = self._prepare(theta)
        d = self._data(data)
        total = 0.0
        gx = {b.name: np.zeros(b.dim) for b in self.partition.blocks}
        for f in self.factors:
            v = f.evaluate(values, d)
            if np.isnan(v):
                raise NumericError(f"factor {f.name!r} returned NaN", factor=f.name)
            if v == -np.inf:
                return -np.inf, np.full(self.dim, np.nan)
            total += v
            for bname, g in f.gradient(values, d).items():
                g = np.reshape(g, -1)
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient from factor {f.name!r}", factor=f.name)
                gx[bname] += g
        grad = np.empty(self.dim)
        for b in self.partition.blocks:
            u, x = parts[b.name], values[b.name]
            total += b.transform.log_jacobian(u, x)
            grad[self.partition.slices[b.name]] = gx[b.name] * b.transform.dx_du(u, x) + b.transform.grad_log_jacobian(u, x)
        return float(total), grad

    def grad(self, theta, data: Mapping | None = None) -> np.ndarray:
        value, g = self.value_and_grad(theta, data)
        if not np.isfinite(value):
            raise NumericError("gradient requested outside the support (log density is -inf)")
        return g

    def constrained(self, theta) -> dict[str, np.ndarray]:
        return self.partition.to_constrained(theta)

    def unconstrained(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        return self.partition.to_unconstrained(values)

    def restrict(self, drop: Iterable[str]) -> "FactorGraph":
        drop = set(drop)
        unknown = drop - set(self.factor_names)
        if unknown:
            raise StructureError(f"cannot drop unknown factors {sorted(unknown)}")
        return FactorGraph(self.partition, [f for f in self.factors if f.name not in drop], self.data)

    def subgraph(self, blocks: Iterable[str]) -> "FactorGraph":
        """Keep only the named blocks and the factors that touch nothing else."""
        keep = set(blocks)
        part = self.partition.subset(keep)
        factors = [f for f in self.factors if set(f.blocks) <= keep]
        return FactorGraph(part, factors, self.data)

    def phi_module(self) -> "FactorGraph":
        """The phi-side module ``p(phi) p(z|phi)``; eta blocks are integrated out.

        Every factor touching an eta block is either an eta prior (integrates
        to one) or a w-side likelihood (removed by the cut).
        """
        return self.subgraph(self.partition.module_names("phi"))

    def w_side_factors(self) -> tuple[str, ...]:
        eta = set(self.partition.module_names("eta"))
        return tuple(f.name for f in self.factors if eta & set(f.blocks))

    def with_data(self, **data) -> "FactorGraph":
        merged = dict(self.data)
        merged.update(data)
        return FactorGraph(self.partition, self.factors, merged)


def log_joint(g: FactorGraph, theta, data: Mapping | None = None) -> float:
    """Sum of log factors plus log-Jacobians at unconstrained ``theta``."""
    return g.log_joint(_flat(g, theta), data)


def grad_log_joint(g: FactorGraph, theta, data: Mapping | None = None) -> np.ndarray:
    return g.grad(_flat(g, theta), data)


def restrict(g: FactorGraph, drop: Iterable[str]) -> FactorGraph:
    return g.restrict(drop)


def _flat(g, theta):
    if isinstance(theta, Mapping):
        return g.partition.flatten(theta)
    return np.asarray(theta, dtype=float)
