"""Causal graphs, ground-truth structural equation models and interventions.

Adjacency convention used throughout the package: ``edges[i, j] == 1`` means
``j -> i`` (node ``j`` is a parent of node ``i``).  A linear SEM therefore reads
``x = W @ x + eps`` with ``W`` supported on ``edges``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("linear", "relu", "selu")

# standard self-normalizing constants
SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


class DimensionError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    """Fixed-point iteration hit ``max_iter`` before reaching tolerance."""

    def __init__(self, message: str, residual: float, n_iter: int):
        super().__init__(message)
        self.residual = residual
        self.n_iter = n_iter


class CyclicGraphError(ValueError):
    pass


def selu(x):
    return SELU_SCALE * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def apply_activation(name: str, x):
    if name == "linear":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "selu":
        return selu(x)
    raise ValueError(f"unknown activation {name!r}, expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class CausalGraph:
    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges)
        if e.ndim != 2 or e.shape[0] != e.shape[1] or e.shape[0] < 1:
            raise DimensionError(f"edges must be a non-empty square matrix, got shape {e.shape}")
        if not np.isin(e, (0, 1)).all():
            raise ValueError("edge entries must be 0 or 1")
        if np.diag(e).any():
            raise ValueError("self-loops are not allowed (diagonal must be zero)")
        object.__setattr__(self, "edges", e.astype(np.int64))

    @property
    def d(self) -> int:
        return self.edges.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.edges.sum())

    @classmethod
    def empty(cls, d: int) -> "CausalGraph":
        return cls(np.zeros((d, d), dtype=np.int64))

    def topological_order(self) -> list[int] | None:
        """Kahn's algorithm over parent->child edges; ``None`` if a cycle exists."""
        indeg = self.edges.sum(axis=1).astype(int)
        ready = [i for i in range(self.d) if indeg[i] == 0]
        order = []
        while ready:
            j = ready.pop(0)
            order.append(j)
            for i in np.flatnonzero(self.edges[:, j]):
                indeg[i] -= 1
                if indeg[i] == 0:
                    ready.append(int(i))
        return order if len(order) == self.d else None

    def is_acyclic(self) -> bool:
        return self.topological_order() is not None


@dataclass(frozen=True)
class GroundTruthSEM:
    """``x = act(W @ x) + eps`` with ``eps ~ N(0, diag(noise_scales**2))``."""

    graph: CausalGraph
    weights: np.ndarray
    activation: str = "linear"
    noise_scales: np.ndarray | None = None
    lipschitz_bound: float | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        d = self.graph.d
        if w.shape != (d, d):
            raise DimensionError(f"weights shape {w.shape} does not match d={d}")
        if np.any((w != 0) & (self.graph.edges == 0)):
            raise ValueError("weights have support outside graph.edges")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        scales = np.ones(d) if self.noise_scales is None else np.asarray(self.noise_scales, dtype=np.float64)
        if scales.shape != (d,) or np.any(scales <= 0):
            raise ValueError("noise_scales must be a positive d-vector")
        if self.activation == "selu" and not self.graph.is_acyclic():
            raise CyclicGraphError("selu mechanisms are only allowed on acyclic graphs")
        if self.lipschitz_bound is not None and self.activation in ("linear", "relu"):
            if np.linalg.norm(w, 2) > self.lipschitz_bound * (1 + 1e-9):
                raise ValueError("operator norm of weights exceeds the declared Lipschitz bound")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "noise_scales", scales)

    @property
    def d(self) -> int:
        return self.graph.d

    def mechanism(self, x: np.ndarray) -> np.ndarray:
        """Evaluate ``f`` on a single vector or row-wise on an ``(n, d)`` batch."""
        return apply_activation(self.activation, x @ self.weights.T)


@dataclass(frozen=True)
class InterventionSpec:
    """Targeted nodes and how their values are assigned.

    ``values`` is either ``"standard_normal"`` (fresh N(0, 1) draw per sample) or
    a vector with one fixed value per target, aligned with ``targets``.
    """

    targets: tuple[int, ...] = ()
    values: str | tuple[float, ...] = "standard_normal"

    def __post_init__(self):
        t = tuple(sorted(int(i) for i in self.targets))
        if len(set(t)) != len(t):
            raise ValueError(f"duplicate intervention targets {self.targets}")
        object.__setattr__(self, "targets", t)
        if isinstance(self.values, str):
            if self.values != "standard_normal":
                raise ValueError(f"unknown value rule {self.values!r}")
        else:
            vals = tuple(float(v) for v in self.values)
            if len(vals) != len(t):
                raise ValueError("fixed intervention values must match the number of targets")
            object.__setattr__(self, "values", vals)

    @classmethod
    def fixed(cls, assignment: dict[int, float]) -> "InterventionSpec":
        keys = sorted(assignment)
        return cls(tuple(keys), tuple(assignment[k] for k in keys))

    def check(self, d: int) -> None:
        for t in self.targets:
            if not 0 <= t < d:
                raise DimensionError(f"intervention target {t} out of range for d={d}")

    def observed(self, d: int) -> np.ndarray:
        """Boolean d-vector, True for passively observed nodes."""
        self.check(d)
        keep = np.ones(d, dtype=bool)
        keep[list(self.targets)] = False
        return keep

    def draw_values(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if isinstance(self.values, str):
            return rng.standard_normal((n, len(self.targets)))
        return np.tile(np.asarray(self.values, dtype=np.float64), (n, 1))


@dataclass
class ExperimentData:
    spec: InterventionSpec
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))

    @property
    def n(self) -> int:
        return self.samples.shape[0]


@dataclass
class Dataset:
    d: int
    experiments: list[ExperimentData] = field(default_factory=list)

    def __post_init__(self):
        for e in self.experiments:
            e.spec.check(self.d)
            if e.samples.shape[1] != self.d:
                raise DimensionError(f"experiment samples have {e.samples.shape[1]} columns, expected {self.d}")

    @property
    def n_samples(self) -> int:
        return sum(e.n for e in self.experiments)


def mask_matrix(spec: InterventionSpec, d: int) -> np.ndarray:
    """Diagonal 0/1 matrix with ones on passively observed nodes."""
    return np.diag(spec.observed(d).astype(np.float64))


@dataclass
class FixedPointResult:
    x: np.ndarray
    n_iter: int
    residuals: list[float]


def fixed_point_solve(
    f: Callable[[np.ndarray], np.ndarray],
    eps: np.ndarray,
    spec: InterventionSpec = InterventionSpec(),
    values: np.ndarray | None = None,
    tol: float = 1e-9,
    max_iter: int = 1000,
    return_info: bool = False,
):
    """Solve ``x = U f(x) + U eps + c`` by Banach iteration.

    Works on a single d-vector or row-wise on an ``(n, d)`` batch.  ``values``
    holds the intervention values (one column per target); when omitted the
    spec must carry fixed values.  The iteration starts from ``U eps + c`` and
    stops once ``max_i ||x_{t+1} - x_t||_2 <= tol``.
    """
    eps = np.asarray(eps, dtype=np.float64)
    single = eps.ndim == 1
    e2 = np.atleast_2d(eps)
    n, d = e2.shape
    keep = spec.observed(d).astype(np.float64)
    c = np.zeros_like(e2)
    if spec.targets:
        if values is None:
            if isinstance(spec.values, str):
                raise ValueError("values required for a random-valued intervention")
            values = np.asarray(spec.values, dtype=np.float64)
        c[:, list(spec.targets)] = np.broadcast_to(values, (n, len(spec.targets)))
    base = keep * e2 + c
    x = base
    residuals: list[float] = []
    for t in range(1, max_iter + 1):
        x_new = keep * f(x) + base
        res = float(np.max(np.linalg.norm(x_new - x, axis=1)))
        residuals.append(res)
        x = x_new
        if not np.isfinite(res):
            break
        if res <= tol:
            out = x[0] if single else x
            return FixedPointResult(out, t, residuals) if return_info else out
    raise NonConvergenceError(
        f"fixed-point iteration did not reach tol={tol:g} in {max_iter} iterations "
        f"(final residual {residuals[-1]:.3e}); is the mechanism contractive?",
        residual=residuals[-1],
        n_iter=len(residuals),
    )


def simulate_experiment(
    sem: GroundTruthSEM,
    spec: InterventionSpec,
    n: int,
    seed: int | Sequence[int],
    tol: float = 1e-9,
    max_iter: int = 1000,
) -> ExperimentData:
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.check(sem.d)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, sem.d)) * sem.noise_scales
    values = spec.draw_values(n, rng) if spec.targets else None
    x = fixed_point_solve(sem.mechanism, eps, spec, values=values, tol=tol, max_iter=max_iter)
    if spec.targets:
        # the iterate already equals c on targets; make it exact
        x[:, list(spec.targets)] = values
    return ExperimentData(spec, x)
