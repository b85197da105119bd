"""Interventional likelihood score, penalized objective, gradients and training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .graph import Dataset, ExperimentData, InterventionSpec
from .logdet import EstimatorDraw, LogDetConfig, draw_estimator, logdet
from .mechanism import DTYPE, MaskedMechanism, MaskSample, lipschitz_rescale, sample_mask

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


@dataclass
class TrainConfig:
    lambda_sparse: float = 1e-3
    lr: float = 1e-2
    epochs: int = 200
    batch_size: int = 512
    n_hidden_layers: int = 0
    n_L: int = 10
    lipschitz_target: float = 0.9
    poisson_intensity_init: float = 2.0
    gumbel_temperature: float = 1.0
    seed: int = 0
    logdet_mode: str = "unbiased"
    activation: str = "linear"
    model_kind: str = "mlp"
    n_probes: int = 1
    n_terms: int = 10

    def __post_init__(self):
        if self.lambda_sparse < 0:
            raise ValueError("lambda_sparse must be >= 0")
        if self.lr <= 0 or self.gumbel_temperature <= 0 or self.poisson_intensity_init <= 0:
            raise ValueError("lr, gumbel_temperature and poisson_intensity_init must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.n_L < 1:
            raise ValueError("epochs must be >= 0, batch_size and n_L >= 1")
        if not 0 <= self.n_hidden_layers <= 3:
            raise ValueError("n_hidden_layers must be in 0..3")
        if not 0 < self.lipschitz_target < 1:
            raise ValueError("lipschitz_target must lie in (0, 1)")
        LogDetConfig(self.logdet_mode)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def logdet_config(self) -> LogDetConfig:
        return LogDetConfig(self.logdet_mode, self.n_terms, self.poisson_intensity_init, self.n_probes)

    def to_dict(self) -> dict:
        return asdict(self)


class NumericError(ArithmeticError):
    pass


@dataclass
class FixedRandomness:
    """Everything random in one objective evaluation, pinned.

    ``mask_noise`` is the logistic perturbation of the mask logits,
    ``mask_anchor`` the constant in the straight-through matrix
    ``hard + soft - anchor`` and ``draws`` one estimator draw per batch.
    """

    mask_noise: torch.Tensor | None = None
    mask_anchor: torch.Tensor | None = None
    draws: list[EstimatorDraw] | None = None


def init_model(d: int, cfg: TrainConfig) -> MaskedMechanism:
    model = MaskedMechanism(
        d,
        n_hidden_layers=cfg.n_hidden_layers,
        activation=cfg.activation,
        kind=cfg.model_kind,
        lipschitz_target=cfg.lipschitz_target,
        poisson_intensity=cfg.poisson_intensity_init,
        seed=cfg.seed,
    )
    lipschitz_rescale(model, cfg.n_L)
    return model


def _as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def sample_scores(model: MaskedMechanism, mask: MaskSample | None, x, spec: InterventionSpec,
                  cfg: LogDetConfig = LogDetConfig(), seed=None, draw: EstimatorDraw | None = None):
    """Per-sample log-density of the observed coordinates and its log-det part.

    Returns ``(score, logdet)``, each of shape (B,).  Intervened coordinates
    contribute neither a noise term nor a Jacobian row.
    """
    x = _as_tensor(x)
    x = x.reshape(-1, model.d)
    observed = spec.observed(model.d)
    if not observed.any():
        zero = torch.zeros(x.shape[0], dtype=DTYPE)
        return zero, zero
    lin = model.linearize(x, mask)
    obs = torch.as_tensor(observed)
    resid = (x - lin.value)[:, obs]
    mu = model.noise_means[obs]
    log_sigma = model.noise_log_scales[obs]
    z = (resid - mu) * torch.exp(-log_sigma)
    gauss = (-0.5 * z**2 - log_sigma - 0.5 * LOG_2PI).sum(-1)
    ld = logdet(model, mask, x, cfg, seed=seed, observed=observed, lin=lin, draw=draw)
    return gauss + ld, ld


def score(model, mask, x, spec, cfg: LogDetConfig = LogDetConfig(), seed=None, draw=None) -> torch.Tensor:
    """Summed log-likelihood of one experiment's batch (a differentiable scalar)."""
    return sample_scores(model, mask, x, spec, cfg, seed, draw)[0].sum()


def _mask_for(model: MaskedMechanism, cfg: TrainConfig, fixed: FixedRandomness | None, gen=None):
    if model.kind == "linear-direct":
        return None
    noise = fixed.mask_noise if fixed is not None else None
    m = sample_mask(model.mask_logits, cfg.gumbel_temperature, generator=gen, noise=noise)
    if fixed is not None and fixed.mask_anchor is not None:
        m.anchor = fixed.mask_anchor
    return m


def objective(model: MaskedMechanism, data: Dataset | list[ExperimentData], cfg: TrainConfig,
              seed=None, fixed: FixedRandomness | None = None) -> torch.Tensor:
    """Summed score over all experiments minus ``lambda * E||M||_1``.

    One mask sample is shared by the whole evaluation.  For ``linear-direct``
    models the penalty is the l1 norm of the off-diagonal weights.
    """
    exps = data.experiments if isinstance(data, Dataset) else list(data)
    gen = torch.Generator().manual_seed(int(seed)) if seed is not None else None
    rng = np.random.default_rng(seed)
    mask = _mask_for(model, cfg, fixed, gen)
    ld_cfg = cfg.logdet_config()
    total = torch.zeros((), dtype=DTYPE)
    for k, exp in enumerate(exps):
        draw = fixed.draws[k] if fixed is not None and fixed.draws is not None else None
        if draw is None and ld_cfg.mode != "exact":
            draw = draw_estimator(ld_cfg, exp.n, model.d, rng)
        total = total + score(model, mask, exp.samples, exp.spec, ld_cfg, draw=draw)
    return total - cfg.lambda_sparse * model.sparsity_penalty()


def named_parameters(model: MaskedMechanism) -> dict[str, torch.Tensor]:
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def gradient(model: MaskedMechanism, data, cfg: TrainConfig, fixed: FixedRandomness | None = None,
             seed=None) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of :func:`objective` for every continuous parameter.

    Mask-logit gradients follow the straight-through rule.  Raises
    :class:`NumericError` naming the first parameter with a non-finite entry.
    """
    params = named_parameters(model)
    model.zero_grad(set_to_none=True)
    value = objective(model, data, cfg, seed=seed, fixed=fixed)
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        out[name] = g.detach().numpy().copy()
    return out


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    penalty: float
    mean_logdet: float


def _batches(data: Dataset, batch_size: int, rng: np.random.Generator):
    """Minibatches drawn within single experiments, cycling over experiments."""
    per_exp = []
    for exp in data.experiments:
        idx = rng.permutation(exp.n)
        per_exp.append([(exp, idx[s:s + batch_size]) for s in range(0, exp.n, batch_size)])
    longest = max(len(b) for b in per_exp)
    for r in range(longest):
        for b in per_exp:
            if r < len(b):
                yield b[r]


def train(data: Dataset, cfg: TrainConfig, model: MaskedMechanism | None = None,
          callback=None) -> tuple[MaskedMechanism, list[EpochRecord]]:
    """Maximize the penalized likelihood with Adam and spectral rescaling.

    The minibatch loss is the negated per-sample mean score plus
    ``lambda_sparse`` times the sparsity penalty.  ``callback(epoch, model)``
    runs after each epoch.
    """
    if not data.experiments or data.n_samples == 0:
        raise ValueError("dataset is empty")
    model = init_model(data.d, cfg) if model is None else model
    history: list[EpochRecord] = []
    if cfg.epochs == 0:
        return model, history
    params = list(named_parameters(model).values())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    ld_cfg = cfg.logdet_config()
    tensors = {id(e): _as_tensor(e.samples) for e in data.experiments}
    for epoch in range(cfg.epochs):
        tot_obj = tot_ld = tot_pen = 0.0
        n_seen = 0
        for exp, idx in _batches(data, cfg.batch_size, rng):
            x = tensors[id(exp)][torch.as_tensor(idx)]
            mask = _mask_for(model, cfg, None, gen)
            draw = draw_estimator(ld_cfg, len(idx), data.d, rng) if ld_cfg.mode != "exact" else None
            s, ld = sample_scores(model, mask, x, exp.spec, ld_cfg, draw=draw)
            pen = model.sparsity_penalty()
            loss = -s.mean() + cfg.lambda_sparse * pen
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            lipschitz_rescale(model, cfg.n_L)
            b = len(idx)
            tot_obj += float(s.detach().sum())
            tot_ld += float(ld.detach().sum())
            tot_pen += float(pen.detach()) * b
            n_seen += b
        rec = EpochRecord(epoch, (tot_obj - cfg.lambda_sparse * tot_pen) / n_seen, tot_pen / n_seen, tot_ld / n_seen)
        history.append(rec)
        log.debug("epoch %d objective %.5f penalty %.3f", epoch, rec.objective, rec.penalty)
        if callback is not None:
            callback(epoch, model)
    return model, history
