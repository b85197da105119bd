"""log|det(I - U J_f(x))| : dense LU oracle and power-series estimators.

All functions work on a batch ``x`` of shape (B, d) and return one value per
row.  ``observed`` is the boolean d-vector of passively observed nodes (the
diagonal of ``U``); ``None`` means no intervention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import gammainc

from .mechanism import DTYPE, Linearization, MaskedMechanism, MaskSample

LOGDET_MODES = ("exact", "truncated", "unbiased")
PROBE_DISTS = ("rademacher", "gaussian")
MIN_TAIL_PROB = 1e-12


class DegenerateJacobianError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LogDetConfig:
    mode: str = "exact"
    n_terms: int = 10
    poisson_intensity: float = 2.0
    n_probes: int = 1
    probe_dist: str = "rademacher"

    def __post_init__(self):
        if self.mode not in LOGDET_MODES:
            raise ValueError(f"unknown logdet mode {self.mode!r}")
        if self.probe_dist not in PROBE_DISTS:
            raise ValueError(f"unknown probe distribution {self.probe_dist!r}")
        if self.n_terms < 1 or self.n_probes < 1:
            raise ValueError("n_terms and n_probes must be >= 1")
        if self.poisson_intensity <= 0:
            raise ValueError("poisson_intensity must be positive")


@dataclass
class EstimatorDraw:
    """Randomness of one estimator evaluation: series length and probe vectors.

    ``probes`` has shape (n_probes, B, d).  ``n`` is either one series length
    shared by every row or an integer array with one length per row, which
    makes the rows independent estimator draws.
    """

    n: int | np.ndarray
    probes: torch.Tensor

    @property
    def max_n(self) -> int:
        return int(np.max(self.n)) if np.size(self.n) else 0


def poisson_tail(k: int, intensity: float) -> float:
    """P(N >= k) for N ~ Poisson(intensity), via the regularized lower gamma."""
    if k <= 0:
        return 1.0
    return float(gammainc(k, intensity))


def draw_probes(n_probes: int, batch: int, d: int, dist: str, rng: np.random.Generator) -> torch.Tensor:
    if dist == "rademacher":
        w = rng.integers(0, 2, size=(n_probes, batch, d)) * 2.0 - 1.0
    else:
        w = rng.standard_normal((n_probes, batch, d))
    return torch.as_tensor(w, dtype=DTYPE)


def draw_estimator(cfg: LogDetConfig, batch: int, d: int, rng: np.random.Generator) -> EstimatorDraw:
    if cfg.mode == "unbiased":
        n = int(rng.poisson(cfg.poisson_intensity))
    else:
        n = cfg.n_terms
    return EstimatorDraw(n=n, probes=draw_probes(cfg.n_probes, batch, d, cfg.probe_dist, rng))


def _observed_tensor(observed, d: int) -> torch.Tensor:
    if observed is None:
        return torch.ones(d, dtype=DTYPE)
    return torch.as_tensor(np.asarray(observed, dtype=np.float64), dtype=DTYPE)


def _lin(model: MaskedMechanism, mask: MaskSample | None, x, lin: Linearization | None) -> Linearization:
    return lin if lin is not None else model.linearize(torch.as_tensor(x, dtype=DTYPE), mask)


def jacobian_dense(model, mask, x, observed=None, lin=None) -> torch.Tensor:
    """(B, d, d) Jacobian of ``x -> U f(x)``."""
    lin = _lin(model, mask, x, lin)
    u = _observed_tensor(observed, model.d)
    return u[None, :, None] * lin.jacobian()


def logdet_exact(model, mask, x, observed=None, lin=None) -> torch.Tensor:
    """log|det(I - U J_f(x))| by LU factorization with partial pivoting."""
    j = jacobian_dense(model, mask, x, observed, lin)
    a = torch.eye(model.d, dtype=DTYPE) - j
    sign, logabs = torch.linalg.slogdet(a)
    if torch.any(sign == 0) or not torch.all(torch.isfinite(logabs)):
        raise DegenerateJacobianError("I - U J_f(x) is singular; the mechanism lost invertibility")
    return logabs


def trace_power_probe(model, mask, x, k: int, w: torch.Tensor, observed=None, lin=None) -> torch.Tensor:
    """``w^T (U J_f(x))^k w`` via ``k`` Jacobian-vector products."""
    if k < 1:
        raise ValueError("k must be >= 1")
    lin = _lin(model, mask, x, lin)
    u = _observed_tensor(observed, model.d)
    w = torch.as_tensor(w, dtype=DTYPE)
    v = w
    for _ in range(k):
        v = u * lin.jvp(v)
    return (w * v).sum(-1)


def _series(lin, u, draw: EstimatorDraw, weights) -> torch.Tensor:
    """``-mean_w sum_k weights[k-1] w^T (U J)^k w`` truncated at ``draw.n``."""
    per_row = np.ndim(draw.n) > 0
    if per_row:
        n_rows = torch.as_tensor(np.asarray(draw.n))
    total = 0.0
    for w in draw.probes:
        v = w
        acc = torch.zeros(w.shape[0], dtype=DTYPE)
        for k in range(1, draw.max_n + 1):
            v = u * lin.jvp(v)
            term = (w * v).sum(-1) * weights[k - 1]
            acc = acc + (torch.where(n_rows >= k, term, torch.zeros_like(term)) if per_row else term)
        total = total + acc
    return -total / draw.probes.shape[0]


def _roulette_weights(n_max: int, intensity: float) -> list[float]:
    weights = []
    for k in range(1, n_max + 1):
        tail = poisson_tail(k, intensity)
        if tail < MIN_TAIL_PROB:
            raise FloatingPointError(f"P(N >= {k}) = {tail:.2e} underflows; poisson intensity too small for n={n_max}")
        weights.append(1.0 / (k * tail))
    return weights


def draw_independent(cfg: LogDetConfig, batch: int, d: int, rng: np.random.Generator) -> EstimatorDraw:
    """One independent Russian-roulette draw per row."""
    return EstimatorDraw(rng.poisson(cfg.poisson_intensity, size=batch),
                         draw_probes(cfg.n_probes, batch, d, cfg.probe_dist, rng))


def logdet_unbiased(model, mask, x, cfg: LogDetConfig, seed=None, observed=None, lin=None, draw=None) -> torch.Tensor:
    """Russian-roulette power series with Hutchinson probes.

    Without ``draw`` one ``n ~ Poisson(intensity)`` is shared by all probes
    and rows; pass a draw from :func:`draw_independent` for one ``n`` per row.
    ``n = 0`` yields the empty sum.  Term ``k`` is reweighted by
    ``1 / (k P(N >= k))``.
    """
    lin = _lin(model, mask, x, lin)
    batch = lin.value.shape[0]
    if draw is None:
        rng = np.random.default_rng(seed)
        draw = draw_estimator(LogDetConfig("unbiased", poisson_intensity=cfg.poisson_intensity,
                                           n_probes=cfg.n_probes, probe_dist=cfg.probe_dist), batch, model.d, rng)
    weights = _roulette_weights(draw.max_n, cfg.poisson_intensity)
    return _series(lin, _observed_tensor(observed, model.d), draw, weights)


def logdet_truncated(model, mask, x, cfg: LogDetConfig, seed=None, observed=None, lin=None, draw=None) -> torch.Tensor:
    """First ``n_terms`` of the power series with Hutchinson probes (biased)."""
    lin = _lin(model, mask, x, lin)
    batch = lin.value.shape[0]
    if draw is None:
        rng = np.random.default_rng(seed)
        draw = EstimatorDraw(cfg.n_terms, draw_probes(cfg.n_probes, batch, model.d, cfg.probe_dist, rng))
    weights = [1.0 / k for k in range(1, draw.max_n + 1)]
    return _series(lin, _observed_tensor(observed, model.d), draw, weights)


def logdet(model, mask, x, cfg: LogDetConfig, seed=None, observed=None, lin=None, draw=None) -> torch.Tensor:
    if cfg.mode == "exact":
        return logdet_exact(model, mask, x, observed, lin)
    if cfg.mode == "truncated":
        return logdet_truncated(model, mask, x, cfg, seed, observed, lin, draw)
    return logdet_unbiased(model, mask, x, cfg, seed, observed, lin, draw)
