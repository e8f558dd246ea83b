from collections import OrderedDict

import numpy as np
import pytest

from conftest import policy_gradient_errors, random_connected_adjacency
from phgrid.autodiff import Tensor
from phgrid.policy import (MASK_LOGIT, CheckpointError, GcapcnConfig, GcapcnPolicy,
                           action_logits, bernoulli_log_prob, capsule_layer, context_encode,
                           embed_inputs, greedy_action, graph_embedding, init_params,
                           load_checkpoint, load_policy, mask_and_distribution, sample_action,
                           save_checkpoint, save_policy, value_estimate)
from phgrid.tda import laplacian


def naive_matmul(A, B):
    n, m = A.shape
    m2, p = B.shape
    assert m == m2
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for k in range(m):
                s += A[i, k] * B[k, j]
            out[i, j] = s
    return out


@pytest.fixture
def small():
    rng = np.random.default_rng(0)
    cfg = GcapcnConfig(layers=2, embed_dim=5, hidden=(4, 4), p=2, K=2)
    params = init_params(cfg, 6, 7, 5, rng)
    A = random_connected_adjacency(rng, 6, 0.3).astype(float)
    return cfg, params, laplacian(A), rng


def test_embed_examples(small):
    _, params, _, rng = small
    V = rng.normal(size=(6, 3))
    assert np.array_equal(embed_inputs(np.zeros((6, 3)), params).data, np.zeros((6, 5)))
    np.testing.assert_allclose(embed_inputs(V, params).data,
                               naive_matmul(V, params["embed.W"].data), atol=1e-12)
    params = OrderedDict(params)
    params["embed.W"] = Tensor(np.eye(3, 5))
    np.testing.assert_array_equal(embed_inputs(V, params).data[:, :3], V)
    with pytest.raises(ValueError):
        embed_inputs(np.zeros((6, 2)), params)


def test_capsule_dense_degenerate(small):
    _, _, L, rng = small
    cfg = GcapcnConfig(layers=1, embed_dim=3, hidden=(4,), p=1, K=0)
    params = init_params(cfg, 6, 7, 5, rng)
    F = rng.normal(size=(6, 3))
    out = capsule_layer(F, L, params, 1, 1, 0).data
    dense = np.tanh(naive_matmul(F, params["capsule.1.W10"].data))
    np.testing.assert_allclose(out, dense, atol=1e-12)
    other = capsule_layer(F, np.eye(6) * 7, params, 1, 1, 0).data
    np.testing.assert_array_equal(out, other)  # K=0 ignores L


def test_capsule_formula(small):
    _, params, L, rng = small
    F = rng.normal(size=(6, 5)) * 0.5
    out = capsule_layer(F, L, params, 1, 2, 2).data
    caps = []
    for i in (1, 2):
        X = F ** i
        acc = sum(naive_matmul(np.linalg.matrix_power(L, k) @ X, params[f"capsule.1.W{i}{k}"].data)
                  for k in range(3))
        caps.append(np.tanh(acc))
    np.testing.assert_allclose(out, np.concatenate(caps, axis=1), atol=1e-12)
    assert out.shape == (6, 4 * 2)


def test_second_moment_input():
    cfg = GcapcnConfig(layers=1, embed_dim=1, hidden=(1,), p=2, K=0, activation="relu")
    params = init_params(cfg, 2, 1, 1, np.random.default_rng(0))
    for k in params:
        if k.startswith("capsule"):
            params[k] = Tensor(np.ones((1, 1)))
    out = capsule_layer(np.array([[1.0], [2.0]]), np.eye(2), params, 1, 2, 0, "relu").data
    assert out[:, 1].tolist() == [1.0, 4.0]


def test_capsule_nonfinite_raises(small):
    _, params, L, _ = small
    with pytest.raises(FloatingPointError):
        capsule_layer(np.full((6, 5), np.nan), L, params, 1, 2, 2)


def test_graph_embedding(small):
    _, params, _, rng = small
    F = rng.normal(size=(6, 4))
    got = graph_embedding(F, params).data
    want = naive_matmul(params["graph.W_g2"].data,
                        naive_matmul(params["graph.W_g1"].data, F)).mean(axis=1)
    np.testing.assert_allclose(got, want, atol=1e-12)
    assert not graph_embedding(np.zeros((6, 4)), params).data.any()
    with pytest.raises(ValueError):
        graph_embedding(np.zeros((5, 4)), params)


def test_graph_embedding_hand_case():
    params = {"graph.W_g1": Tensor(np.eye(2)), "graph.W_g2": Tensor(np.eye(2))}
    F = np.array([[3.0, 3.0], [5.0, 5.0]])
    # identity weights: row means of F
    assert graph_embedding(F, params).data.tolist() == [3.0, 5.0]


def test_context_encode(small):
    _, params, _, rng = small
    flows = rng.normal(size=7)
    x = np.concatenate([[0.7, 0.02], flows])
    h = np.tanh(x @ params["context.W1"].data + params["context.b1"].data)
    want = h @ params["context.W2"].data + params["context.b2"].data
    np.testing.assert_allclose(context_encode(0.7, 0.02, flows, params).data, want, atol=1e-12)
    assert not context_encode(0.0, 0.0, np.zeros(7), params).data.any()
    with pytest.raises(ValueError):
        context_encode(0.7, 0.02, flows[:3], params)


def test_logits_and_value(small):
    cfg, params, _, rng = small
    g = rng.normal(size=4)
    c = rng.normal(size=4)
    h = np.tanh((g + c) @ params["decoder.mlp.W"].data)
    np.testing.assert_allclose(action_logits(g, c, params).data,
                               h @ params["decoder.out.W"].data, atol=1e-12)
    assert action_logits(g, c, params).shape == (5,)
    hv = np.tanh((g + c) @ params["value.W1"].data)
    assert value_estimate(g, c, params).item() == pytest.approx(
        float(hv @ params["value.W2"].data[:, 0]), abs=1e-12)
    zero = {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()}
    assert value_estimate(g, c, zero).item() == 0.0
    assert not action_logits(g, -g, zero).data.any()


def test_masking_and_distribution():
    out = mask_and_distribution(np.array([0.0, 50.0, 3.0]), np.array([False, False, True]))
    assert out.probs[0] == 0.5 and out.probs[2] == 0.0 and out.probs[1] == 1.0
    assert out.logits[2] == MASK_LOGIT
    assert greedy_action(np.array([0.5, 0.9, 0.2])).tolist() == [False, True, False]
    assert not greedy_action(mask_and_distribution(np.ones(4), np.ones(4, bool)).probs).any()


def test_masked_slot_invariance(small):
    cfg, params, L, rng = small
    pol = GcapcnPolicy(cfg, 6, 7, 5, params=params)
    V, flows = rng.uniform(0.9, 1.0, (6, 3)), rng.normal(size=7)
    mask = np.array([True, False, False, True, False])
    p1 = pol.forward(V, L, 0.5, 0.0, flows, mask)[0].data
    pol.params["decoder.out.b"].data[[0, 3]] += 100.0
    p2 = pol.forward(V, L, 0.5, 0.0, flows, mask)[0].data
    assert np.array_equal(p1, p2)
    a1 = sample_action(p1, np.random.default_rng(5), mask)
    a2 = sample_action(p2, np.random.default_rng(5), mask)
    assert np.array_equal(a1[0], a2[0]) and a1[1] == a2[1]


def test_masked_logit_gets_no_gradient(small):
    cfg, params, L, rng = small
    pol = GcapcnPolicy(cfg, 6, 7, 5, params=params)
    mask = np.array([True, False, False, False, False])
    probs, _, _ = pol.forward(rng.uniform(0.9, 1, (6, 3)), L, 0.5, 0.0, rng.normal(size=7), mask)
    probs.sum().backward()
    assert (pol.params["decoder.out.b"].grad[0] == 0.0)
    assert (pol.params["decoder.out.W"].grad[:, 0] == 0.0).all()


def test_sampling():
    rng = np.random.default_rng(0)
    a, lp = sample_action(np.full(4, 1 - 1e-9), rng)
    assert a.all() and lp == pytest.approx(4 * np.log(1 - 1e-7), abs=1e-12)
    x = np.array([sample_action(np.array([0.3]), rng)[0][0] for _ in range(100_000)])
    assert abs(x.mean() - 0.3) < 0.01
    r1 = sample_action(np.array([0.2, 0.7, 0.5]), np.random.default_rng(9))
    r2 = sample_action(np.array([0.2, 0.7, 0.5]), np.random.default_rng(9))
    assert np.array_equal(r1[0], r2[0]) and r1[1] == r2[1]
    mask = np.array([True, False])
    a, lp = sample_action(np.array([1.0, 0.5]), rng, mask)
    assert not a[0] and lp == pytest.approx(np.log(0.5))
    assert bernoulli_log_prob(np.array([0.25]), np.array([False]), np.array([False])) == \
        pytest.approx(np.log(0.75))


def test_gradients_match_finite_differences():
    errors = policy_gradient_errors(seed=3)
    assert max(errors.values()) < 1e-4, errors


def test_batched_forward_matches_single(small):
    cfg, params, L, rng = small
    pol = GcapcnPolicy(cfg, 6, 7, 5, params=params)
    B = 4
    V = rng.uniform(0.9, 1.0, (B, 6, 3))
    Ls = np.stack([L] * B)
    e, vv, fl = rng.random(B), rng.random(B) * 0.01, rng.normal(size=(B, 7))
    mask = rng.random((B, 5)) < 0.3
    pb, vb, _ = pol.forward(V, Ls, e, vv, fl, mask)
    for b in range(B):
        p1, v1, _ = pol.forward(V[b], L, e[b], vv[b], fl[b], mask[b])
        np.testing.assert_allclose(pb.data[b], p1.data, atol=1e-13)
        assert vb.data[b] == pytest.approx(v1.item(), abs=1e-13)


def test_shape_chain_various_configs():
    rng = np.random.default_rng(1)
    for layers, p, K, act in [(1, 1, 0, "tanh"), (3, 3, 1, "relu"), (2, 2, 3, "tanh")]:
        cfg = GcapcnConfig(layers=layers, embed_dim=4, hidden=(3,) * layers, p=p, K=K,
                           activation=act)
        n = 9
        pol = GcapcnPolicy(cfg, n, 11, 6, rng)
        L = laplacian(random_connected_adjacency(rng, n).astype(float))
        probs, value, logits = pol.forward(rng.random((n, 3)), L, 1.0, 0.0, rng.random(11),
                                           np.zeros(6, bool))
        assert probs.shape == (6,) and value.shape == () and logits.shape == (6,)


def test_config_validation():
    with pytest.raises(ValueError):
        GcapcnConfig(layers=2, hidden=(4,))
    with pytest.raises(ValueError):
        GcapcnConfig(p=0)
    with pytest.raises(ValueError):
        GcapcnConfig(activation="gelu")


def test_checkpoint_round_trip(tmp_path, small):
    cfg, params, L, rng = small
    pol = GcapcnPolicy(cfg, 6, 7, 5, params=params)
    path = tmp_path / "p.ckpt"
    save_policy(path, pol, {"note": "x"}, OrderedDict(extra=np.arange(3.0)))
    pol2, state, extra = load_policy(path)
    assert state["note"] == "x" and extra["extra"].tolist() == [0, 1, 2]
    args = (rng.random((6, 3)), L, 0.3, 0.1, rng.random(7), np.zeros(5, bool))
    assert np.array_equal(pol.forward(*args)[0].data, pol2.forward(*args)[0].data)
    path2 = tmp_path / "q.ckpt"
    save_policy(path2, pol2, {"note": "x"}, extra)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    cfg = GcapcnConfig()
    save_checkpoint(path, cfg, OrderedDict(a=np.ones(3)))
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
