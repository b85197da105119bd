"""Learnable contractive causal mechanism.

``f(x)_i = lambda_i^{-1} * g(M_i * (lambda * x))_i`` where ``g`` is an MLP with
``d`` inputs and ``d`` outputs, ``M`` a zero-diagonal 0/1 dependency mask drawn
from a per-edge binary-concrete (Gumbel-Softmax) distribution, and ``lambda``
a positive diagonal preconditioner.  Layer weights act on row vectors, i.e. a
layer maps ``z -> z @ W + b``; a single linear layer is ``g(x) = W^T x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .graph import CausalGraph, CyclicGraphError, GroundTruthSEM

DTYPE = torch.float64
MODEL_KINDS = ("mlp", "linear-direct")
MODEL_ACTIVATIONS = ("linear", "relu", "tanh")
COLD_START_POWER_STEPS = 200


def _act(name: str, a: torch.Tensor) -> torch.Tensor:
    if name == "linear":
        return a
    if name == "relu":
        return torch.relu(a)
    if name == "tanh":
        return torch.tanh(a)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, a: torch.Tensor) -> torch.Tensor:
    if name == "linear":
        return torch.ones_like(a)
    if name == "relu":
        return (a > 0).to(a.dtype)
    if name == "tanh":
        return 1.0 - torch.tanh(a) ** 2
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class MaskSample:
    """One draw of the dependency mask.

    ``hard`` is used in the forward pass; ``soft`` carries the gradient.  The
    straight-through matrix is ``hard + soft - anchor`` where ``anchor`` is a
    constant copy of ``soft`` (by default the detached soft sample itself).
    """

    hard: torch.Tensor
    soft: torch.Tensor
    noise: torch.Tensor | None = None
    anchor: torch.Tensor | None = None

    def straight_through(self) -> torch.Tensor:
        anchor = self.soft.detach() if self.anchor is None else self.anchor
        return self.hard + (self.soft - anchor)


def _offdiag(d: int) -> torch.Tensor:
    return 1.0 - torch.eye(d, dtype=DTYPE)


def logistic_noise(shape, generator: torch.Generator | None = None) -> torch.Tensor:
    """Difference of two independent standard Gumbels, i.e. Logistic(0, 1)."""
    u = torch.rand(shape, dtype=DTYPE, generator=generator).clamp(1e-12, 1 - 1e-12)
    return torch.log(u) - torch.log1p(-u)


def sample_mask(
    mask_logits: torch.Tensor,
    temperature: float = 1.0,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> MaskSample:
    """Binary-concrete relaxation of independent Bernoulli(sigmoid(logit)) edges.

    Pass ``noise`` to reuse a previous perturbation (fixed randomness).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = torch.as_tensor(mask_logits, dtype=DTYPE)
    d = logits.shape[0]
    if noise is None:
        if generator is None and seed is not None:
            generator = torch.Generator().manual_seed(int(seed))
        noise = logistic_noise(logits.shape, generator)
    off = _offdiag(d)
    soft = torch.sigmoid((logits + noise) / temperature) * off
    # soft >= 0.5  <=>  logit + noise >= 0, independent of the temperature
    hard = ((logits.detach() + noise) >= 0).to(DTYPE) * off
    return MaskSample(hard=hard, soft=soft, noise=noise)


def fixed_mask(hard) -> MaskSample:
    """Deterministic mask (no gradient path) from a 0/1 matrix."""
    h = torch.as_tensor(np.asarray(hard), dtype=DTYPE) * _offdiag(len(hard))
    return MaskSample(hard=h, soft=h.clone())


def edge_probabilities(mask_logits) -> torch.Tensor:
    logits = torch.as_tensor(mask_logits, dtype=DTYPE)
    return torch.sigmoid(logits) * _offdiag(logits.shape[0])


def expected_mask_l1(mask_logits) -> torch.Tensor:
    return edge_probabilities(mask_logits).sum()


class Linearization:
    """Mechanism value and Jacobian information at a batch of points ``x``.

    Activation derivatives are cached so repeated Jacobian-vector products
    cost one pass of matrix products each.
    """

    def __init__(self, value, jvp_fn, jac_fn):
        self.value = value
        self._jvp = jvp_fn
        self._jac = jac_fn

    def jvp(self, v: torch.Tensor) -> torch.Tensor:
        return self._jvp(v)

    def jacobian(self) -> torch.Tensor:
        return self._jac()


class MaskedMechanism(nn.Module):
    """Masked MLP mechanism with preconditioning and a Gaussian noise model.

    Parameters
    ----------
    d : int
        Number of nodes.
    n_hidden_layers : int
        Hidden layers of width ``d``; 0 gives the single-layer map
        ``act(W^T x + b)``.
    activation : {"linear", "relu", "tanh"}
        Applied after every hidden layer.  The output layer is affine, except
        for the single-layer model where the activation wraps the output.
    kind : {"mlp", "linear-direct"}
        ``linear-direct`` drops the mask and enforces a zero diagonal on a
        single weight matrix, penalized directly in l1.
    """

    def __init__(
        self,
        d: int,
        n_hidden_layers: int = 0,
        activation: str = "tanh",
        kind: str = "mlp",
        lipschitz_target: float = 0.9,
        poisson_intensity: float = 2.0,
        seed: int = 0,
        init_scale: float = 0.1,
    ):
        super().__init__()
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        if activation not in MODEL_ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if kind == "linear-direct":
            n_hidden_layers = 0
        if not 0 < lipschitz_target < 1:
            raise ValueError("lipschitz_target must lie in (0, 1)")
        if poisson_intensity <= 0:
            raise ValueError("poisson_intensity must be positive")
        self.d = d
        self.kind = kind
        self.activation = activation
        self.lipschitz_target = float(lipschitz_target)
        self.poisson_intensity = float(poisson_intensity)
        gen = torch.Generator().manual_seed(int(seed))
        n_layers = n_hidden_layers + 1
        self.weights = nn.ParameterList(
            [nn.Parameter((torch.rand(d, d, generator=gen, dtype=DTYPE) * 2 - 1) * init_scale) for _ in range(n_layers)]
        )
        self.biases = nn.ParameterList([nn.Parameter(torch.zeros(d, dtype=DTYPE)) for _ in range(n_layers)])
        self.mask_logits = nn.Parameter(torch.zeros(d, d, dtype=DTYPE))
        self.log_lambda = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.noise_means = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.noise_log_scales = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        if kind == "linear-direct":
            self.mask_logits.requires_grad_(False)
        # power-iteration state, one right-singular-vector estimate per layer
        self._power_vectors: list[torch.Tensor | None] = [None] * n_layers
        self._power_gen = torch.Generator().manual_seed(int(seed) + 7919)

    # ------------------------------------------------------------------ helpers
    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def layer_activations(self) -> list[str]:
        if self.n_layers == 1:
            return [self.activation]
        return [self.activation] * (self.n_layers - 1) + ["linear"]

    def effective_weight(self, k: int) -> torch.Tensor:
        w = self.weights[k]
        if self.kind == "linear-direct":
            w = w * _offdiag(self.d)
        return w

    def lam(self) -> torch.Tensor:
        return torch.exp(self.log_lambda)

    def noise_scales(self) -> torch.Tensor:
        return torch.exp(self.noise_log_scales)

    def mask_matrix(self, mask: MaskSample | None) -> torch.Tensor:
        """Dependency matrix used in the forward pass (row i gates inputs of node i)."""
        if self.kind == "linear-direct":
            return _offdiag(self.d)
        if mask is None:
            raise ValueError("an mlp mechanism needs a mask sample")
        return mask.straight_through()

    def hard_mask(self) -> MaskSample:
        """0.5-threshold readout of the mask distribution (no sampling noise)."""
        hard = (self.mask_logits.detach() >= 0).to(DTYPE) * _offdiag(self.d)
        return MaskSample(hard=hard, soft=hard.clone())

    def edge_scores(self) -> torch.Tensor:
        """Edge scores in graph orientation: ``[i, j]`` scores ``j -> i``.

        Sigmoid edge probabilities for ``mlp``; absolute effective linear
        coefficients for ``linear-direct``.
        """
        if self.kind == "mlp":
            return edge_probabilities(self.mask_logits.detach())
        lam = self.lam().detach()
        w = self.effective_weight(0).detach()
        return (w.T * lam[None, :] / lam[:, None]).abs()

    def sparsity_penalty(self) -> torch.Tensor:
        if self.kind == "linear-direct":
            return self.effective_weight(0).abs().sum()
        return expected_mask_l1(self.mask_logits)

    # ------------------------------------------------------------- evaluation
    def linearize(self, x: torch.Tensor, mask: MaskSample | None) -> Linearization:
        """Evaluate ``f`` at ``x`` of shape (B, d) and prepare Jacobian products."""
        x = torch.as_tensor(x, dtype=DTYPE)
        lam = self.lam()
        m = self.mask_matrix(mask)
        y = x * lam
        acts = self.layer_activations()
        if self.n_layers == 1:
            # row-masked single layer collapses to one matrix: A[j, i] = W[j, i] * M[i, j]
            a_mat = self.effective_weight(0) * m.T
            pre = y @ a_mat + self.biases[0]
            value = _act(acts[0], pre) / lam
            dact = _act_grad(acts[0], pre)

            def jvp(v):
                return dact * ((v * lam) @ a_mat) / lam

            def jac():
                return dact[:, :, None] * a_mat.T[None] * lam[None, None, :] / lam[None, :, None]

            return Linearization(value, jvp, jac)

        z = m[None, :, :] * y[:, None, :]  # (B, d_rows, d_in)
        pres, h = [], z
        for k, name in enumerate(acts):
            a = h @ self.effective_weight(k) + self.biases[k]
            pres.append(a)
            h = _act(name, a)
        idx = torch.arange(self.d)
        value = h[:, idx, idx] / lam
        dacts = [_act_grad(name, a) for name, a in zip(acts, pres)]

        def jvp(v):
            t = m[None, :, :] * (v * lam)[:, None, :]
            for k in range(self.n_layers):
                t = dacts[k] * (t @ self.effective_weight(k))
            return t[:, idx, idx] / lam

        def jac():
            last = self.n_layers - 1
            g = dacts[last][:, idx, idx][:, :, None] * self.effective_weight(last).T[None]
            for k in range(last - 1, -1, -1):
                g = (g * dacts[k]) @ self.effective_weight(k).T
            j0 = g * m[None]
            return j0 * lam[None, None, :] / lam[None, :, None]

        return Linearization(value, jvp, jac)

    def forward(self, x: torch.Tensor, mask: MaskSample | None = None) -> torch.Tensor:
        return self.linearize(x, mask).value

    # -------------------------------------------------------------- numpy glue
    def as_function(self, mask: MaskSample | None = None):
        """NumPy callable ``x -> f(x)`` (rows are samples), e.g. for fixed-point solves."""
        if mask is None and self.kind == "mlp":
            mask = self.hard_mask()

        def f(x):
            with torch.no_grad():
                out = self.forward(torch.as_tensor(np.atleast_2d(x), dtype=DTYPE), mask)
            return out.numpy().reshape(np.shape(x))

        return f

    @classmethod
    def from_sem(cls, sem: GroundTruthSEM, lipschitz_target: float = 0.9, **kw) -> "MaskedMechanism":
        """Exact model representation of a linear or ReLU ground-truth SEM.

        Mask logits are saturated to the true graph; noise parameters match the
        SEM's zero-mean noise.  SELU mechanisms have no counterpart here.
        """
        if sem.activation == "selu":
            raise ValueError("selu mechanisms cannot be represented by this model family")
        model = cls(sem.d, 0, sem.activation, "mlp", lipschitz_target=lipschitz_target, **kw)
        with torch.no_grad():
            model.weights[0].copy_(torch.as_tensor(sem.weights.T, dtype=DTYPE))
            logits = np.where(sem.graph.edges == 1, 50.0, -50.0)
            np.fill_diagonal(logits, 0.0)
            model.mask_logits.copy_(torch.as_tensor(logits, dtype=DTYPE))
            model.noise_log_scales.copy_(torch.as_tensor(np.log(sem.noise_scales), dtype=DTYPE))
        return model

    @classmethod
    def from_linear(cls, weights, **kw) -> "MaskedMechanism":
        """Linear mechanism ``f(x) = weights @ x`` with mask set to the off-diagonal support."""
        w = np.asarray(weights, dtype=np.float64)
        d = w.shape[0]
        kw.setdefault("lipschitz_target", 0.9)
        model = cls(d, 0, "linear", "mlp", **kw)
        with torch.no_grad():
            model.weights[0].copy_(torch.as_tensor(w.T, dtype=DTYPE))
            model.mask_logits.copy_(torch.full((d, d), 50.0, dtype=DTYPE))
        return model


def lipschitz_rescale(model: MaskedMechanism, n_power: int = 10, target: float | None = None) -> list[float]:
    """Spectral-norm rescaling of the layer weights, in place.

    Each layer's largest singular value is estimated by ``n_power`` power
    iterations continued from the previous call (the first call warms up
    with ``COLD_START_POWER_STEPS`` iterations).  If the product of the
    estimates exceeds ``target`` every layer is shrunk by the same factor so
    the product lands on ``target``; any single layer still above ``target``
    is then clipped to it.  Returns the per-layer estimates after rescaling.
    """
    if n_power < 1:
        raise ValueError("n_power must be >= 1")
    target = model.lipschitz_target if target is None else target
    sigmas = []
    with torch.no_grad():
        for k in range(model.n_layers):
            w = model.effective_weight(k)
            v = model._power_vectors[k]
            steps = n_power
            if v is None:
                v = torch.randn(w.shape[1], dtype=DTYPE, generator=model._power_gen)
                v = v / v.norm()
                steps = max(n_power, COLD_START_POWER_STEPS)
            for _ in range(steps):
                u = w @ v
                u = u / (u.norm() + 1e-30)
                v = w.T @ u
                v = v / (v.norm() + 1e-30)
            model._power_vectors[k] = v
            sigmas.append(float((w @ v).norm()))
        # activations used here are all 1-Lipschitz
        product = float(np.prod(sigmas))
        if product > target:
            factor = (target / product) ** (1.0 / model.n_layers)
            for k in range(model.n_layers):
                model.weights[k].mul_(factor)
                sigmas[k] *= factor
        for k in range(model.n_layers):
            if sigmas[k] > target:
                model.weights[k].mul_(target / sigmas[k])
                sigmas[k] = target
    return sigmas


def construct_lambda_dag(lipschitz: float, c: float, graph: CausalGraph) -> np.ndarray:
    """Diagonal preconditioner that makes an L-Lipschitz DAG mechanism c-contractive.

    Along a topological order the last node gets 1 and every earlier node gets
    ``d**2 * L / c`` times the largest value among later nodes.  With
    ``Lambda`` from here, ``x -> Lambda f(Lambda^{-1} x)`` has Lipschitz
    constant below ``c``.
    """
    if lipschitz < 1:
        raise ValueError("lipschitz must be >= 1")
    if not 0 < c < 1:
        raise ValueError("c must lie in (0, 1)")
    order = graph.topological_order()
    if order is None:
        raise CyclicGraphError("construct_lambda_dag requires an acyclic graph")
    d = graph.d
    factor = d * d * lipschitz / c
    sorted_vals = np.empty(d)
    sorted_vals[d - 1] = 1.0
    for s in range(d - 2, -1, -1):
        sorted_vals[s] = factor * sorted_vals[s + 1:].max()
    out = np.empty(d)
    out[order] = sorted_vals
    return out
