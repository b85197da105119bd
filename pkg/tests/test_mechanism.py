import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cyclicflow.graph import CausalGraph, CyclicGraphError
from cyclicflow.mechanism import (
    DTYPE,
    MaskedMechanism,
    construct_lambda_dag,
    edge_probabilities,
    expected_mask_l1,
    fixed_mask,
    lipschitz_rescale,
    sample_mask,
)


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)


def single_layer(w_layer, log_lambda=None):
    w_layer = np.asarray(w_layer, dtype=np.float64)
    d = w_layer.shape[0]
    m = MaskedMechanism(d, 0, "linear")
    with torch.no_grad():
        m.weights[0].copy_(t(w_layer))
        if log_lambda is not None:
            m.log_lambda.copy_(t(log_lambda))
    return m


class TestSampleMask:
    def test_saturated_logits(self):
        logits = torch.full((4, 4), 50.0, dtype=DTYPE)
        for s in range(50):
            m = sample_mask(logits, seed=s)
            np.testing.assert_array_equal(m.hard.numpy(), 1 - np.eye(4))
        m = sample_mask(-logits, seed=0)
        assert m.hard.sum() == 0

    def test_zero_logit_symmetric(self):
        gen = torch.Generator().manual_seed(0)
        hits = torch.stack([sample_mask(torch.zeros(2, 2, dtype=DTYPE), generator=gen).hard[0, 1]
                            for _ in range(20_000)])
        assert abs(float(hits.mean()) - 0.5) < 0.01

    def test_hard_is_threshold_of_soft(self):
        logits = torch.randn(6, 6, dtype=DTYPE, generator=torch.Generator().manual_seed(1)) * 3
        for temp in (0.1, 1.0, 5.0):
            m = sample_mask(logits, temp, seed=3)
            np.testing.assert_array_equal(m.hard.numpy(), ((m.soft.numpy() >= 0.5) & ~np.eye(6, dtype=bool)))
            assert np.all(np.diag(m.soft.numpy()) == 0)

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            sample_mask(torch.zeros(2, 2, dtype=DTYPE), 0.0)

    def test_marginal_matches_sigmoid(self):
        logits = t([[0, 1.5, -0.7], [0.3, 0, -2.0], [2.2, -0.1, 0]])
        n = 100_000
        gen = torch.Generator().manual_seed(5)
        u = torch.rand((n, 3, 3), dtype=DTYPE, generator=gen)
        g = torch.log(u) - torch.log1p(-u)
        hard = torch.stack([sample_mask(logits, 0.1, noise=g[k]).hard for k in range(0, n, 10)])
        p = torch.sigmoid(logits).numpy() * (1 - np.eye(3))
        se = np.sqrt(p * (1 - p) / hard.shape[0]) + 1e-12
        assert np.all(np.abs(hard.mean(0).numpy() - p) <= 3 * se + 1e-12)

    def test_expected_penalty_closed_form(self):
        logits = t([[0, 0.4, -1.0], [1.0, 0, 0.2], [-0.3, 2.0, 0]])
        gen = torch.Generator().manual_seed(9)
        l1 = np.array([float(sample_mask(logits, 0.1, generator=gen).hard.sum()) for _ in range(20_000)])
        se = l1.std() / np.sqrt(len(l1))
        assert abs(l1.mean() - float(expected_mask_l1(logits))) <= 3 * se


class TestEdgeProbabilities:
    def test_all_zero_logits(self):
        p = edge_probabilities(torch.zeros(3, 3, dtype=DTYPE))
        np.testing.assert_allclose(p.numpy(), 0.5 * (1 - np.eye(3)))
        assert float(expected_mask_l1(torch.zeros(3, 3, dtype=DTYPE))) == pytest.approx(3.0)

    def test_very_negative_logits(self):
        logits = torch.full((3, 3), -1e4, dtype=DTYPE)
        assert float(edge_probabilities(logits).abs().max()) == 0.0
        assert float(expected_mask_l1(logits)) == 0.0


class TestForward:
    def test_zero_mask_gives_constant(self):
        m = MaskedMechanism(4, 2, "tanh", seed=1)
        with torch.no_grad():
            for b in m.biases:
                b.copy_(torch.randn(4, dtype=DTYPE))
        zero = fixed_mask(np.zeros((4, 4)))
        x = torch.randn(7, 4, dtype=DTYPE)
        out = m(x, zero)
        np.testing.assert_allclose(out.detach().numpy(), np.broadcast_to(out[0].detach().numpy(), out.shape))
        with torch.no_grad():
            for b in m.biases:
                b.zero_()
        assert float(m(x, zero).detach().abs().max()) == 0.0

    def test_linear_offdiag(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((3, 3))
        x = rng.standard_normal(3)
        out = single_layer(w)(t(x[None]), fixed_mask(1 - np.eye(3))).detach().numpy()[0]
        expected = [sum(w[j, i] * x[j] for j in range(3) if j != i) for i in range(3)]
        np.testing.assert_allclose(out, expected, atol=1e-14)

    def test_lambda_by_hand(self):
        w = np.array([[0.7, 0.4], [-0.2, 1.1]])
        m = single_layer(w, log_lambda=[np.log(2), np.log(2)])
        out = m(t([[1.0, 1.0]]), fixed_mask(1 - np.eye(2))).detach().numpy()[0]
        # masked action: out_0 = W[1,0] x_1, out_1 = W[0,1] x_0; at (2,2) then halved
        np.testing.assert_allclose(out, 0.5 * np.array([-0.2 * 2, 0.4 * 2]), atol=1e-14)

    def test_as_function_round_trip(self):
        m = MaskedMechanism(3, 1, "tanh", seed=2)
        f = m.as_function(fixed_mask(1 - np.eye(3)))
        x = np.random.default_rng(1).standard_normal((4, 3))
        assert f(x).shape == (4, 3)
        assert f(x[0]).shape == (3,)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2), st.sampled_from(["linear", "tanh", "relu"]), st.integers(0, 1000))
def test_self_exclusion(d, hidden, act, seed):
    m = MaskedMechanism(d, hidden, act, seed=seed, init_scale=1.0)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        m.log_lambda.copy_(torch.randn(d, dtype=DTYPE, generator=gen))
        m.mask_logits.copy_(torch.randn(d, d, dtype=DTYPE, generator=gen) + 5)
    mask = sample_mask(m.mask_logits, seed=seed)
    x = torch.randn(1, d, dtype=DTYPE, generator=gen)
    base = m(x, mask).detach()
    for i in range(d):
        xp = x.clone()
        xp[0, i] += 0.37
        assert float(m(xp, mask).detach()[0, i]) == float(base[0, i])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2), st.integers(0, 1000))
def test_conjugation_identity(d, hidden, seed):
    m = MaskedMechanism(d, hidden, "tanh", seed=seed, init_scale=0.8)
    gen = torch.Generator().manual_seed(seed)
    mask = sample_mask(torch.randn(d, d, dtype=DTYPE, generator=gen), seed=seed)
    x = torch.randn(5, d, dtype=DTYPE, generator=gen)
    v = torch.randn(d, dtype=DTYPE, generator=gen)
    f0 = m(x * torch.exp(v), mask).detach()
    with torch.no_grad():
        m.log_lambda.copy_(v)
    np.testing.assert_allclose(m(x, mask).detach().numpy(), (f0 / torch.exp(v)).numpy(), rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2), st.sampled_from(["linear", "tanh", "relu"]), st.integers(0, 1000))
def test_analytic_jacobian_matches_autograd(d, hidden, act, seed):
    m = MaskedMechanism(d, hidden, act, seed=seed, init_scale=1.0)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        m.log_lambda.copy_(0.5 * torch.randn(d, dtype=DTYPE, generator=gen))
    mask = sample_mask(torch.randn(d, d, dtype=DTYPE, generator=gen), seed=seed)
    x = torch.randn(3, d, dtype=DTYPE, generator=gen)
    lin = m.linearize(x, mask)
    for b in range(3):
        auto = torch.autograd.functional.jacobian(lambda z: m(z[None], mask)[0], x[b])
        np.testing.assert_allclose(lin.jacobian()[b].detach().numpy(), auto.numpy(), atol=1e-12)
    v = torch.randn(3, d, dtype=DTYPE, generator=gen)
    np.testing.assert_allclose(lin.jvp(v).detach().numpy(),
                               torch.einsum("bij,bj->bi", lin.jacobian(), v).detach().numpy(), atol=1e-12)


class TestLipschitzRescale:
    def test_identity(self):
        m = single_layer(np.eye(4))
        lipschitz_rescale(m, 10, 0.9)
        np.testing.assert_allclose(m.weights[0].detach().numpy(), 0.9 * np.eye(4), atol=1e-12)

    def test_already_small(self):
        m = single_layer(np.diag([0.5, 0.1]))
        lipschitz_rescale(m, 10, 0.9)
        np.testing.assert_array_equal(m.weights[0].detach().numpy(), np.diag([0.5, 0.1]))

    def test_random_svd_oracle(self):
        rng = np.random.default_rng(0)
        for k in range(300):
            w = rng.standard_normal((5, 5)) * rng.uniform(0.5, 5)
            m = single_layer(w)
            m._power_gen.manual_seed(k)
            lipschitz_rescale(m, 15, 0.9)
            assert np.linalg.norm(m.weights[0].detach().numpy(), 2) <= 0.9 * (1 + 1e-3)

    def test_product_bound_multi_layer(self):
        m = MaskedMechanism(5, 2, "tanh", seed=3, init_scale=2.0)
        sig = lipschitz_rescale(m, 10)
        assert np.prod(sig) <= 0.9 * (1 + 1e-9)
        exact = np.prod([np.linalg.norm(w.detach().numpy(), 2) for w in m.weights])
        assert exact <= 0.9 * (1 + 1e-3)

    def test_idempotent(self):
        m = MaskedMechanism(5, 1, "tanh", seed=4, init_scale=2.0)
        lipschitz_rescale(m, 10)
        before = [w.detach().clone() for w in m.weights]
        lipschitz_rescale(m, 10)
        for a, b in zip(before, m.weights):
            np.testing.assert_allclose(b.detach().numpy(), a.numpy(), rtol=1e-3)

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            lipschitz_rescale(single_layer(np.eye(2)), 0)


class TestLambdaDag:
    def chain(self, d):
        e = np.zeros((d, d), int)
        for i in range(1, d):
            e[i, i - 1] = 1
        return CausalGraph(e)

    def test_d2(self):
        np.testing.assert_allclose(construct_lambda_dag(2, 0.5, self.chain(2)), [16, 1])

    def test_d1(self):
        np.testing.assert_allclose(construct_lambda_dag(1, 0.5, CausalGraph.empty(1)), [1])

    def test_d3(self):
        np.testing.assert_allclose(construct_lambda_dag(1, 0.5, self.chain(3)), [324, 18, 1])

    def test_follows_topological_order(self):
        # order 2 -> 0 -> 1
        e = np.zeros((3, 3), int)
        e[0, 2] = e[1, 0] = 1
        np.testing.assert_allclose(construct_lambda_dag(1, 0.5, CausalGraph(e)), [18, 1, 324])

    def test_cyclic_rejected(self):
        with pytest.raises(CyclicGraphError):
            construct_lambda_dag(1, 0.5, CausalGraph(np.array([[0, 1], [1, 0]])))

    @pytest.mark.parametrize("lip, c", [(0.5, 0.5), (1.0, 1.0), (1.0, 0.0)])
    def test_domain(self, lip, c):
        with pytest.raises(ValueError):
            construct_lambda_dag(lip, c, self.chain(2))


def test_from_sem_reproduces_mechanism():
    from cyclicflow.graph import GroundTruthSEM

    w = np.array([[0, 0.5, 0], [0.3, 0, -0.4], [0, 0.2, 0]])
    sem = GroundTruthSEM(CausalGraph((w != 0).astype(int)), w, "relu")
    m = MaskedMechanism.from_sem(sem)
    x = np.random.default_rng(0).standard_normal((6, 3))
    np.testing.assert_allclose(m.as_function()(x), sem.mechanism(x), atol=1e-14)
