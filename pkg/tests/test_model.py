import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import model_gradient_error, scalar_attention, toy_config
from transducer.autodiff import ShapeError, Tape
from transducer.model import (ModelConfig, attention_mask, bind, init_params, kernel_attention,
                              kernel_score, param_count, param_shapes, predict)


def random_batch(config, n_ctx, n_qry, seed):
    g = np.random.default_rng(seed)
    return (g.standard_normal((n_ctx, config.in_dim)), g.standard_normal((n_ctx, config.out_dim)),
            g.standard_normal((n_qry, config.in_dim)))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(heads=0)
    with pytest.raises(ValueError):
        ModelConfig(kernel="cosine")
    with pytest.raises(ValueError):
        ModelConfig(temperature=0.0)
    assert ModelConfig(head_dim=16).tau == 4.0
    assert ModelConfig(head_dim=16, kernel="rbf").tau == 16.0
    c = ModelConfig(depth=3, tie_weights=True)
    assert ModelConfig.from_dict(c.to_dict()) == c


def test_kernel_score_examples():
    assert kernel_score("exp_dot", [1.0, 0.0], [0.0, 3.0]) == 1.0
    assert kernel_score("rbf", [0.3, -1.0], [0.3, -1.0]) == 1.0
    assert kernel_score("l2", [0.3, -1.0], [0.3, -1.0]) == 0.0
    assert kernel_score("exp_dot", [1.0, 2.0], [3.0, 1.0], tau=2.0) == pytest.approx(math.exp(2.5), rel=1e-15)
    assert kernel_score("rbf", [1.0, 2.0], [3.0, 1.0], tau=2.0) == pytest.approx(math.exp(-2.5), rel=1e-15)
    assert kernel_score("l2", [1.0, 2.0], [3.0, 1.0]) == 5.0
    with pytest.raises(ValueError):
        kernel_score("rbf", [1.0], [1.0], tau=-1.0)


def test_param_count_closed_form():
    # per layer: heads * (Q + K + V + W) + F + G, with F/G = 2 d (norm) + d*h + h + h*d + d
    attn = 32 * (50 * 16 + 50 * 16 + 50 * 16 + 16 * 50)
    ffn = 2 * 50 + 50 * 100 + 100 + 100 * 50 + 50
    expected = 4 * (attn + 2 * ffn)
    assert expected == 491600
    c = ModelConfig()
    assert param_count(c) == expected
    assert sum(a.size for a in init_params(c).values()) == expected


def test_tied_config_has_one_layer():
    tied = ModelConfig(depth=4, tie_weights=True, heads=2, in_dim=4, out_dim=4)
    names = list(param_shapes(tied))
    assert all(n.startswith("layer0.") for n in names)
    untied = ModelConfig(depth=4, heads=2, in_dim=4, out_dim=4)
    assert param_count(untied) == 4 * param_count(tied)


def test_serialization_order_is_layer_major():
    names = list(param_shapes(ModelConfig(depth=2, heads=2, in_dim=4, out_dim=4)))
    assert names[:4] == ["layer0.Q", "layer0.K", "layer0.V", "layer0.W"]
    assert names[4].startswith("layer0.F") and names[10].startswith("layer0.G")
    assert names[16] == "layer1.Q"
    assert len(names) == 32


def test_use_G_false_drops_G_blocks():
    assert not any(".G." in n for n in param_shapes(ModelConfig(use_G=False)))


def test_init_is_seeded_and_scaled():
    c = ModelConfig(depth=1, heads=4)
    a, b = init_params(c, 7), init_params(c, 7)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["layer0.Q"], init_params(c, 8)["layer0.Q"])
    assert np.all(a["layer0.F.ln_gain"] == 1.0) and np.all(a["layer0.F.b1"] == 0.0)
    assert a["layer0.F.W1"].std() == pytest.approx(1 / np.sqrt(50), rel=0.05)
    assert a["layer0.Q"].std() == pytest.approx(1 / np.sqrt(50), rel=0.05)
    assert a["layer0.W"].std() == pytest.approx(1 / np.sqrt(4 * 16), rel=0.05)


def test_attention_mask():
    m = attention_mask(5, 3)
    assert m.shape == (5, 3) and m.all()
    m = attention_mask(5, 3, self_attention=False)
    assert not m[0, 0] and not m[2, 2] and m[0, 1] and m[4].all()


@pytest.mark.parametrize("kernel", ["exp_dot", "rbf", "l2"])
def test_kernel_attention_matches_scalar_oracle(kernel):
    g = np.random.default_rng(3)
    c = ModelConfig(depth=1, heads=1, head_dim=2, value_dim=2, in_dim=3, out_dim=3, kernel=kernel,
                    temperature=1.5)
    Q, K = g.standard_normal((1, 3, 2)), g.standard_normal((1, 3, 2))
    V, W = g.standard_normal((1, 3, 2)), g.standard_normal((1, 2, 3))
    v, u = g.standard_normal((3, 3)), g.standard_normal((3, 3))
    u[2] = 0.0
    tape = Tape()
    p = {f"L.{n}": tape.constant(a) for n, a in dict(Q=Q, K=K, V=V, W=W).items()}
    inc, weights = kernel_attention(tape.constant(v), tape.constant(u), 2, p, "L", c, attention_mask(3, 2))
    oracle = scalar_attention(kernel, 1.5, Q[0].tolist(), K[0].tolist(), V[0].tolist(), W[0].tolist(),
                              v.tolist(), u.tolist(), 2)
    assert np.abs(inc.data - np.array(oracle)).max() < 1e-12
    assert np.abs(weights.data.sum(axis=-1) - 1.0).max() < 1e-12


@pytest.mark.parametrize("kernel", ["exp_dot", "rbf", "l2"])
def test_single_context_element_passes_through_V_and_W(kernel):
    c = ModelConfig(depth=1, heads=3, head_dim=4, value_dim=2, in_dim=5, out_dim=5, kernel=kernel,
                    use_G=False)
    params = init_params(c, 1)
    cv, cu, qv = random_batch(c, 1, 4, 2)
    out = predict(params, c, cv, cu, qv)
    expected = sum(cu[0] @ params["layer0.V"][j] @ params["layer0.W"][j] for j in range(3))
    assert np.abs(out - expected).max() < 1e-12


def test_tau_sharpens_toward_matching_pair():
    # F and G are zeroed so v stays on the unit sphere; with Q = K = I the matching key has the largest score
    g = np.random.default_rng(5)
    base = ModelConfig(depth=1, heads=1, head_dim=4, value_dim=4, in_dim=4, out_dim=4)
    params = init_params(base, 0)
    for blk in ("F", "G"):
        params[f"layer0.{blk}.W2"][:] = 0.0
    params["layer0.Q"] = np.eye(4)[None]
    params["layer0.K"] = np.eye(4)[None]
    cv = g.standard_normal((6, 4))
    cv /= np.linalg.norm(cv, axis=1, keepdims=True)
    cu = g.standard_normal((6, 4))
    target = cu[2] @ params["layer0.V"][0] @ params["layer0.W"][0]
    dist = []
    for tau in (1.0, 0.1):
        c = ModelConfig(**{**base.to_dict(), "temperature": tau})
        dist.append(np.linalg.norm(predict(params, c, cv, cu, cv[2:3])[0] - target))
    assert dist[1] < dist[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["exp_dot", "rbf", "l2"]), st.integers(1, 8), st.booleans())
def test_context_permutation_invariance(seed, kernel, n_ctx, tied):
    c = toy_config(kernel=kernel, tie_weights=tied)
    params = init_params(c, seed % 97)
    cv, cu, qv = random_batch(c, n_ctx, 3, seed)
    perm = np.random.default_rng(seed).permutation(n_ctx)
    a = predict(params, c, cv, cu, qv)
    b = predict(params, c, cv[perm], cu[perm], qv)
    assert np.abs(a - b).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["exp_dot", "rbf", "l2"]))
def test_query_isolation_and_masked_keys(seed, kernel):
    c = toy_config(kernel=kernel)
    params = init_params(c, seed % 89)
    cv, cu, qv = random_batch(c, 4, 5, seed)
    full = predict(params, c, cv, cu, qv)
    # drop, edit and reorder the other queries
    assert np.abs(predict(params, c, cv, cu, qv[[1]]) - full[[1]]).max() < 1e-12
    edited = qv.copy()
    edited[[0, 2, 3, 4]] = np.random.default_rng(seed + 1).standard_normal((4, c.in_dim))
    assert np.abs(predict(params, c, cv, cu, edited)[1] - full[1]).max() < 1e-12
    noisy_u = np.random.default_rng(seed + 2).standard_normal((5, c.out_dim))
    assert np.array_equal(predict(params, c, cv, cu, qv, qry_u=np.zeros((5, c.out_dim))), full)
    trace_a, trace_b = [], []
    predict(params, c, cv, cu, qv, trace=trace_a)
    predict(params, c, cv, cu, qv, trace=trace_b, qry_u=noisy_u)
    # context rows never read query u streams
    for la, lb in zip(trace_a, trace_b):
        assert np.array_equal(la["u"][:4], lb["u"][:4])
        assert np.array_equal(la["weights"], lb["weights"])


def test_attention_weights_sum_to_one_per_head():
    c = toy_config(heads=3, depth=3)
    trace = []
    predict(init_params(c, 2), c, *random_batch(c, 7, 4, 9), trace=trace)
    assert len(trace) == 3
    for layer in trace:
        w = layer["weights"]
        assert w.shape == (3, 11, 7)
        assert np.abs(w.sum(axis=-1) - 1.0).max() < 1e-9
        assert (w >= 0).all()


def test_no_self_attention_zeroes_the_diagonal():
    c = toy_config(self_attention=False)
    trace = []
    predict(init_params(c, 0), c, *random_batch(c, 4, 2, 0), trace=trace)
    w = trace[0]["weights"]
    assert np.all(w[:, np.arange(4), np.arange(4)] == 0.0)
    assert np.abs(w.sum(axis=-1) - 1.0).max() < 1e-12


def test_variable_cardinality():
    c = ModelConfig(depth=2, heads=4)
    params = init_params(c, 0)
    for n in (20, 100):
        out = predict(params, c, *random_batch(c, n, 10, n))
        assert out.shape == (10, 50) and np.isfinite(out).all()


def test_large_logits_stay_finite():
    c = toy_config(temperature=1e-3)
    out = predict(init_params(c, 0), c, *[10 * x for x in random_batch(c, 5, 2, 0)])
    assert np.isfinite(out).all()


def test_input_errors():
    c = toy_config()
    params = init_params(c, 0)
    cv, cu, qv = random_batch(c, 3, 2, 0)
    with pytest.raises(ValueError):
        predict(params, c, cv[:0], cu[:0], qv)
    with pytest.raises(ShapeError):
        predict(params, c, cv[:, :4], cu, qv)
    with pytest.raises(ShapeError):
        predict(params, c, cv, cu[:2], qv)


@pytest.mark.parametrize("kw", [{}, {"kernel": "rbf"}, {"kernel": "l2"}, {"tie_weights": True},
                                {"use_G": False}])
def test_full_model_gradient(kw):
    assert model_gradient_error(toy_config(**kw)) < 1e-6


def test_forward_is_pure():
    c = toy_config()
    params = init_params(c, 0)
    snapshot = {k: a.copy() for k, a in params.items()}
    batch = random_batch(c, 3, 2, 0)
    assert np.array_equal(predict(params, c, *batch), predict(params, c, *batch))
    assert all(np.array_equal(snapshot[k], params[k]) for k in params)
    tape = Tape()
    bind(tape, params, trainable=False)
    assert tape.backward(tape.constant(1.0)) == {}
