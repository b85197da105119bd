"""Structure-recovery and holdout-prediction metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .graph import CausalGraph, Dataset
from .logdet import LogDetConfig
from .mechanism import DTYPE, MaskedMechanism
from .train import sample_scores


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    i_nll: float
    i_mae: float
    shd: int | None = None
    true_pos: int | None = None
    total_edges: int | None = None
    auprc: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def threshold_graph(edge_probs, t: float = 0.5) -> CausalGraph:
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    p = np.asarray(edge_probs, dtype=np.float64)
    edges = (p >= t).astype(np.int64)
    np.fill_diagonal(edges, 0)
    return CausalGraph(edges)


def _edges(g) -> np.ndarray:
    return g.edges if isinstance(g, CausalGraph) else np.asarray(g, dtype=np.int64)


def shd(pred, truth) -> int:
    """Unordered node pairs whose edge configuration differs (a reversal counts once)."""
    a, b = _edges(pred), _edges(truth)
    if a.shape != b.shape:
        raise ValueError("graphs must have the same number of nodes")
    differs = (a != b) | (a.T != b.T)
    return int(np.triu(differs, k=1).sum())


def true_pos_total(pred, truth) -> tuple[int, int]:
    a, b = _edges(pred), _edges(truth)
    if a.shape != b.shape:
        raise ValueError("graphs must have the same number of nodes")
    return int((a & b).sum()), int(a.sum())


def auprc(edge_probs, truth) -> float:
    """Average precision over the ``d(d-1)`` off-diagonal candidate edges.

    Candidates are ranked by descending score; ties keep row-major index order.
    """
    t = _edges(truth)
    s = np.asarray(edge_probs, dtype=np.float64)
    off = ~np.eye(t.shape[0], dtype=bool)
    labels = t[off].astype(bool)
    scores = s[off]
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC is undefined for a graph with no edges")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_pos)


def _mask(model: MaskedMechanism):
    return model.hard_mask() if model.kind == "mlp" else None


def interventional_nll(model: MaskedMechanism, holdout: Dataset) -> float:
    """Mean per-sample negative log-density of the observed coordinates.

    Uses the exact log-determinant and the 0.5-thresholded mask.  Experiments
    with every node intervened on are skipped.
    """
    total, count = 0.0, 0
    mask = _mask(model)
    with torch.no_grad():
        for exp in holdout.experiments:
            if not exp.spec.observed(holdout.d).any():
                continue
            s, _ = sample_scores(model, mask, exp.samples, exp.spec, LogDetConfig("exact"))
            total -= float(s.sum())
            count += exp.n
    if count == 0:
        raise UndefinedMetricError("holdout has no passively observed coordinates")
    return total / count


def i_mae(model: MaskedMechanism, holdout: Dataset) -> float:
    """Mean of ``||f(x) - x||_1 / d`` over every holdout sample."""
    mask = _mask(model)
    total, count = 0.0, 0
    with torch.no_grad():
        for exp in holdout.experiments:
            x = torch.as_tensor(exp.samples, dtype=DTYPE)
            r = model(x, mask) - x
            total += float(r.abs().sum()) / holdout.d
            count += exp.n
    return total / count


def evaluate(model: MaskedMechanism, holdout: Dataset, truth: CausalGraph | None = None,
             threshold: float = 0.5) -> MetricsReport:
    report = MetricsReport(i_nll=interventional_nll(model, holdout), i_mae=i_mae(model, holdout))
    if truth is not None:
        scores = model.edge_scores().numpy()
        pred = threshold_graph(scores, threshold)
        report.shd = shd(pred, truth)
        report.true_pos, report.total_edges = true_pos_total(pred, truth)
        report.auprc = auprc(scores, truth) if truth.n_edges > 0 else None
    return report
