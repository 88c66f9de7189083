import numpy as np
import pytest

from condcomp import tensor as T
from condcomp.gradcheck import gradient_check, param_gradient_check
from condcomp.moe import MoELayer, depth_skip
from condcomp.routing import RouterConfig
from condcomp.tensor import MacMeter, Tensor


def make_layer(n_experts=3, d=4, hidden=5, variant="sparse", k=1, seed=0,
               strategy="token-choice", activation="gelu"):
    rng = np.random.default_rng(seed)
    router = RouterConfig(n_experts=n_experts, k=k, strategy=strategy)
    return MoELayer(n_experts, d, hidden, d, router, rng, variant=variant,
                    activation=activation)


def test_variant_guard():
    layer = make_layer(variant="sparse")
    with pytest.raises(ValueError, match="variant"):
        layer.forward_soft_dispatch(Tensor(np.zeros((1, 4))))


def test_sparse_top1_equals_direct_expert():
    layer = make_layer(n_experts=3, k=1, seed=1)
    rng = np.random.default_rng(2)
    # token aligned with embedding 2 so routing picks expert 2
    token = layer.embeddings.vectors.data[2] * 10.0 + rng.normal(scale=0.01, size=4)
    tokens = Tensor(token.reshape(1, 4))
    out, assign = layer.forward_sparse(tokens)
    assert assign.per_token[0][0][0] == 2
    direct = layer.experts[2](tokens)
    np.testing.assert_allclose(out.data, direct.data, atol=1e-12)


def test_sparse_identical_experts_any_k():
    layer = make_layer(n_experts=3, k=2, seed=3)
    ref = layer.experts[0].named_parameters()
    for e in layer.experts[1:]:
        for name, p in e.named_parameters().items():
            p.data[...] = ref[name].data
    tokens = Tensor(np.random.default_rng(4).normal(size=(5, 4)))
    out, _ = layer.forward_sparse(tokens)
    direct = layer.experts[0](tokens)
    np.testing.assert_allclose(out.data, direct.data, atol=1e-12)


def test_sparse_matches_weighted_sum_bruteforce():
    layer = make_layer(n_experts=2, k=2, seed=5)
    tokens = Tensor(np.random.default_rng(6).normal(size=(3, 4)))
    out, assign = layer.forward_sparse(tokens)
    for t in range(3):
        row = Tensor(tokens.data[t].reshape(1, 4))
        expected = np.zeros(4)
        for e, w in assign.per_token[t]:
            expected += w * layer.experts[e](row).data[0]
        np.testing.assert_allclose(out.data[t], expected, atol=1e-12)


def test_sparse_skips_unrouted_experts():
    layer = make_layer(n_experts=3, k=1, seed=7)
    calls = []
    originals = [e.forward for e in layer.experts]
    for i, e in enumerate(layer.experts):
        e.forward = (lambda x, i=i, f=originals[i]: (calls.append((i, x.shape[0])), f(x))[1])
    tokens = Tensor(np.tile(layer.embeddings.vectors.data[1] * 10.0, (4, 1)))
    out, assign = layer.forward_sparse(tokens)
    assert calls == [(1, 4)]  # one batched call on the routed expert only


def test_sparse_expert_permutation_equivariance():
    base = make_layer(n_experts=3, k=2, seed=8)
    perm = [2, 0, 1]
    permuted = make_layer(n_experts=3, k=2, seed=8)
    for new_idx, old_idx in enumerate(perm):
        src = base.experts[old_idx].named_parameters()
        dst = permuted.experts[new_idx].named_parameters()
        for name in src:
            dst[name].data[...] = src[name].data
    permuted.embeddings.vectors.data[...] = base.embeddings.vectors.data[perm]
    tokens = Tensor(np.random.default_rng(9).normal(size=(4, 4)))
    out_a, _ = base.forward_sparse(tokens)
    out_b, _ = permuted.forward_sparse(tokens)
    np.testing.assert_allclose(out_a.data, out_b.data, atol=1e-12)


def test_sparse_expert_choice_unrouted_tokens_zero():
    layer = make_layer(n_experts=2, k=1, strategy="expert-choice", seed=10)
    aff_winner = layer.embeddings.vectors.data.sum(axis=0) * 20.0
    tokens = np.zeros((3, 4))
    tokens[0] = aff_winner  # token 0 dominates both expert columns
    out, assign = layer.forward_sparse(Tensor(tokens))
    assert assign.per_token[1] == [] and assign.per_token[2] == []
    np.testing.assert_array_equal(out.data[1], np.zeros(4))


def test_soft_dispatch_single_token_single_expert():
    layer = make_layer(n_experts=1, variant="soft-dispatch", seed=11)
    tokens = Tensor(np.random.default_rng(12).normal(size=(1, 4)))
    out, info = layer.forward_soft_dispatch(tokens)
    np.testing.assert_allclose(info["dispatch"].data, [[1.0]], atol=1e-15)
    np.testing.assert_allclose(info["combine"].data, [[1.0]], atol=1e-15)
    np.testing.assert_allclose(out.data, layer.experts[0](tokens).data, atol=1e-12)


def test_soft_dispatch_each_expert_evaluated_once():
    layer = make_layer(n_experts=3, d=4, hidden=5, variant="soft-dispatch", seed=13)
    per_eval = layer.experts[0].macs_per_token()

    def measured(n_tok):
        tokens = Tensor(np.random.default_rng(n_tok).normal(size=(n_tok, 4)))
        with MacMeter() as meter:
            layer.forward_soft_dispatch(tokens)
        return meter.macs

    def expected(n_tok):
        affinity = n_tok * 4 * 3
        mixing = 3 * n_tok * 4
        experts = 3 * per_eval
        combine = n_tok * 3 * 4
        return affinity + mixing + experts + combine

    for n_tok in (1, 2, 7):
        assert measured(n_tok) == expected(n_tok)


def test_soft_dispatch_matches_matrix_bruteforce():
    layer = make_layer(n_experts=2, variant="soft-dispatch", seed=14)
    layer.embeddings.vectors.data[...] = np.array(
        [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    tokens = np.array([[0.5, -0.2, 0.0, 0.0], [0.1, 0.9, 0.0, 0.0]])
    out, _ = layer.forward_soft_dispatch(Tensor(tokens))

    aff = tokens @ layer.embeddings.vectors.data.T
    d = np.exp(aff - aff.max(axis=0))
    d /= d.sum(axis=0)
    c = np.exp(aff - aff.max(axis=1, keepdims=True))
    c /= c.sum(axis=1, keepdims=True)
    mixed = d.T @ tokens
    outs = np.stack([layer.experts[e](Tensor(mixed[e].reshape(1, 4))).data[0]
                     for e in range(2)])
    expected = c @ outs
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_soft_weights_one_hot_gate_equals_direct():
    layer = make_layer(n_experts=3, variant="soft-weights", seed=15)
    # conditioning aligned overwhelmingly with embedding 2: softmax underflows
    # the other gates to exactly zero
    cond = Tensor((layer.embeddings.vectors.data[2] * 1e4).reshape(1, 4))
    tokens = Tensor(np.random.default_rng(16).normal(size=(1, 4)))
    out = layer.forward_soft_weights(tokens, cond=cond)
    direct = layer.experts[2](tokens)
    np.testing.assert_allclose(out.data, direct.data, atol=1e-12)


def test_soft_weights_identical_experts():
    layer = make_layer(n_experts=3, variant="soft-weights", seed=17)
    ref = layer.experts[0].named_parameters()
    for e in layer.experts[1:]:
        for name, p in e.named_parameters().items():
            p.data[...] = ref[name].data
    tokens = Tensor(np.random.default_rng(18).normal(size=(2, 4)))
    out = layer.forward_soft_weights(tokens)
    np.testing.assert_allclose(out.data, layer.experts[0](tokens).data, atol=1e-12)


def test_soft_weights_linear_experts_average():
    # merging is linear per parameter block, so with no nonlinearity and a
    # shared second layer the merged forward is the average of the experts
    layer = make_layer(n_experts=2, variant="soft-weights", seed=19,
                       activation="identity")
    for name, p in layer.experts[1].child("fc2", layer.experts[1].fc2).named_parameters().items():
        p.data[...] = layer.experts[0].fc2.named_parameters()[name].data
    layer.embeddings.vectors.data[...] = 0.0  # uniform gate (0.5, 0.5)
    tokens = Tensor(np.random.default_rng(20).normal(size=(2, 4)))
    out = layer.forward_soft_weights(tokens)
    avg = 0.5 * (layer.experts[0](tokens).data + layer.experts[1](tokens).data)
    np.testing.assert_allclose(out.data, avg, atol=1e-12)


def test_depth_skip_hard_one():
    rng = np.random.default_rng(21)
    x = Tensor(rng.normal(size=(2, 3)))
    block = lambda t: T.scalar_mul(t, 2.0)
    np.testing.assert_array_equal(depth_skip(block, x, 1.0).data, 2.0 * x.data)


def test_depth_skip_hard_zero_block_unevaluated():
    x = Tensor(np.ones((2, 3)))
    called = []

    def block(t):
        called.append(1)
        return t

    out = depth_skip(block, x, 0.0)
    assert called == []
    np.testing.assert_array_equal(out.data, x.data)


def test_depth_skip_soft_midpoint():
    rng = np.random.default_rng(22)
    x = Tensor(rng.normal(size=(2, 3)))
    block = lambda t: T.scalar_mul(t, 3.0)
    out = depth_skip(block, x, 0.5)
    np.testing.assert_allclose(out.data, 0.5 * 3.0 * x.data + 0.5 * x.data,
                               atol=1e-12)
    # tensor gate takes the same value
    out_t = depth_skip(block, x, Tensor([0.5]))
    np.testing.assert_allclose(out_t.data, out.data, atol=1e-15)


def test_depth_skip_dimension_mismatch():
    x = Tensor(np.ones((2, 3)))
    bad = lambda t: Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError, match="depth_skip"):
        depth_skip(bad, x, 1.0)


def test_sparse_gradient_check_through_gates_and_experts():
    layer = make_layer(n_experts=3, k=2, seed=23)
    rng = np.random.default_rng(24)
    tokens_data = rng.normal(size=(3, 4))
    target = Tensor(rng.normal(size=(3, 4)))

    def loss_fn():
        out, _ = layer.forward_sparse(Tensor(tokens_data))
        diff = T.add(out, T.scalar_mul(target, -1.0))
        return T.tsum(T.mul(diff, diff))

    res = param_gradient_check(loss_fn, layer.embeddings.vectors, tol=1e-4)
    assert res.passed, res.max_rel_error
    res = param_gradient_check(loss_fn, layer.experts[0].fc1.W, tol=1e-4)
    assert res.passed, res.max_rel_error


def test_soft_dispatch_gradient_check():
    layer = make_layer(n_experts=2, variant="soft-dispatch", seed=25)
    rng = np.random.default_rng(26)
    c = Tensor(rng.normal(size=(3, 4)))

    def f(tokens):
        out, _ = layer.forward_soft_dispatch(tokens)
        return T.tsum(T.mul(out, c))

    res = gradient_check(f, Tensor(rng.normal(size=(3, 4))), tol=1e-4)
    assert res.passed, res.max_rel_error


def test_soft_weights_gradient_check():
    layer = make_layer(n_experts=2, variant="soft-weights", seed=27)
    rng = np.random.default_rng(28)
    c = Tensor(rng.normal(size=(2, 4)))

    def f(tokens):
        out = layer.forward_soft_weights(tokens)
        return T.tsum(T.mul(out, c))

    res = gradient_check(f, Tensor(rng.normal(size=(2, 4))), tol=1e-4)
    assert res.passed, res.max_rel_error
