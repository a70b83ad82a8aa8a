"""Primitive operations against independent naive oracles, plus tape rules."""

import numpy as np
import pytest

from pixtime import (
    AttentionWeights,
    FeedForwardWeights,
    Parameter,
    Tensor,
    backward,
    concat,
    ffn,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    matmul,
    mse,
    multi_head_attention,
    no_grad,
    reshape,
    slice_axis,
    softmax,
)
from pixtime.autodiff import broadcast_to, swapaxes
from pixtime.errors import ConfigError, NumericError, ShapeError, TapeError


# ---------------------------------------------------------------------------
# oracles (kept independent of the implementations they check)
# ---------------------------------------------------------------------------

def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def naive_softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax on a 2-d array via explicit loops."""
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        shifted = x[i] - max(x[i])
        e = np.exp(shifted)
        out[i] = e / e.sum()
    return out


def naive_layer_norm(x, gain, bias, eps):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def naive_attention(q, k, v, w, n_heads):
    """Per-head attention spelled out step by step on 2-d token arrays."""
    d = q.shape[1]
    hd = d // n_heads
    Q = q @ w["w_q"] + w["b_q"]
    K = k @ w["w_k"]
    V = v @ w["w_v"] + w["b_v"]
    heads = []
    for h in range(n_heads):
        Qh = Q[:, h * hd : (h + 1) * hd]
        Kh = K[:, h * hd : (h + 1) * hd]
        Vh = V[:, h * hd : (h + 1) * hd]
        scores = Qh @ Kh.T / np.sqrt(hd)
        attn = naive_softmax(scores)
        heads.append(attn @ Vh)
    return np.concatenate(heads, axis=1) @ w["w_o"] + w["b_o"]


def _rand_attention_weights(rng, d):
    raw = {
        "w_q": rng.standard_normal((d, d)),
        "b_q": rng.standard_normal(d),
        "w_k": rng.standard_normal((d, d)),
        "w_v": rng.standard_normal((d, d)),
        "b_v": rng.standard_normal(d),
        "w_o": rng.standard_normal((d, d)),
        "b_o": rng.standard_normal(d),
    }
    bundle = AttentionWeights(**{k: Tensor(v) for k, v in raw.items()})
    return raw, bundle


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[3.0], [4.0]])


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


@pytest.mark.parametrize("seed", range(5))
def test_matmul_matches_naive_loops(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    out = matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(out - naive_matmul(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_batch_broadcast():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 3, 4))
    b = rng.standard_normal((4, 2))
    out = matmul(Tensor(a), Tensor(b)).data
    for i in range(5):
        assert np.allclose(out[i], a[i] @ b, atol=1e-14)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_symmetry():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)


def test_softmax_single_entry():
    assert softmax(Tensor([3.7])).data.tolist() == [1.0]


@pytest.mark.parametrize("seed", range(5))
def test_softmax_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(6)
    c = rng.standard_normal()
    a = softmax(Tensor(x)).data
    b = softmax(Tensor(x + c)).data
    assert np.max(np.abs(a - b)) < 1e-14


@pytest.mark.parametrize("seed", range(20))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 7)) * 5
    y = softmax(Tensor(x), axis=-1).data
    assert np.max(np.abs(y.sum(axis=-1) - 1.0)) < 1e-12
    assert np.all(y > 0) and np.all(y <= 1.0)


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------

def test_layer_norm_zero_variance():
    out = layer_norm(Tensor([5.0, 5.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), 1e-5)
    assert np.array_equal(out.data, [0.0, 0.0])


def test_layer_norm_already_standardized():
    out = layer_norm(Tensor([1.0, -1.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), 1e-5)
    assert np.allclose(out.data, [1.0, -1.0], atol=1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_matches_direct_formula(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(9)
    gain = rng.standard_normal(9)
    bias = rng.standard_normal(9)
    out = layer_norm(Tensor(x), Tensor(gain), Tensor(bias), 1e-5).data
    assert np.max(np.abs(out - naive_layer_norm(x, gain, bias, 1e-5))) < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_standardizes(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 8)) * 4
    ones, zeros = Tensor(np.ones(8)), Tensor(np.zeros(8))
    out = layer_norm(Tensor(x), ones, zeros, 1e-5).data
    assert np.max(np.abs(out.mean(axis=-1))) < 1e-10
    assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-4


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def test_attention_single_token_weight_is_one():
    rng = np.random.default_rng(3)
    raw, bundle = _rand_attention_weights(rng, 4)
    token = rng.standard_normal((1, 4))
    out = multi_head_attention(Tensor(token), Tensor(token), Tensor(token), bundle, 2)
    expected = (token @ raw["w_v"] + raw["b_v"]) @ raw["w_o"] + raw["b_o"]
    assert np.max(np.abs(out.data - expected)) < 1e-12


def test_attention_identical_keys_average_values():
    rng = np.random.default_rng(4)
    raw, bundle = _rand_attention_weights(rng, 4)
    q = rng.standard_normal((3, 4))
    k = np.tile(rng.standard_normal(4), (5, 1))
    v = rng.standard_normal((5, 4))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), bundle, 2)
    mean_projected = (v @ raw["w_v"] + raw["b_v"]).mean(axis=0)
    expected = np.tile(mean_projected @ raw["w_o"] + raw["b_o"], (3, 1))
    assert np.max(np.abs(out.data - expected)) < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_attention_matches_per_head_oracle(seed):
    rng = np.random.default_rng(seed)
    raw, bundle = _rand_attention_weights(rng, 4)
    q = rng.standard_normal((3, 4))
    k = rng.standard_normal((2, 4))
    v = rng.standard_normal((2, 4))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), bundle, 2)
    assert np.max(np.abs(out.data - naive_attention(q, k, v, raw, 2))) < 1e-10


@pytest.mark.parametrize("n_q,n_k", [(1, 1), (4, 2), (2, 6)])
def test_attention_output_token_count_tracks_queries(n_q, n_k):
    rng = np.random.default_rng(0)
    _, bundle = _rand_attention_weights(rng, 4)
    out = multi_head_attention(
        Tensor(rng.standard_normal((n_q, 4))),
        Tensor(rng.standard_normal((n_k, 4))),
        Tensor(rng.standard_normal((n_k, 4))),
        bundle,
        2,
    )
    assert out.shape == (n_q, 4)


def test_attention_head_divisibility_error():
    rng = np.random.default_rng(0)
    _, bundle = _rand_attention_weights(rng, 4)
    with pytest.raises(ConfigError):
        multi_head_attention(
            Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))),
            Tensor(np.zeros((2, 4))), bundle, 3,
        )


# ---------------------------------------------------------------------------
# ffn
# ---------------------------------------------------------------------------

def _ffn_weights(w1, b1, w2, b2):
    return FeedForwardWeights(Tensor(w1), Tensor(b1), Tensor(w2), Tensor(b2))


def test_ffn_zero_weights_zero_output():
    w = _ffn_weights(np.zeros((3, 5)), np.zeros(5), np.zeros((5, 3)), np.zeros(3))
    out = ffn(Tensor(np.random.default_rng(0).standard_normal((4, 3))), w)
    assert np.array_equal(out.data, np.zeros((4, 3)))


def test_ffn_second_layer_zero_gives_constant_bias():
    rng = np.random.default_rng(1)
    b2 = rng.standard_normal(3)
    w = _ffn_weights(rng.standard_normal((3, 5)), rng.standard_normal(5),
                     np.zeros((5, 3)), b2)
    out = ffn(Tensor(rng.standard_normal((4, 3))), w)
    assert np.allclose(out.data, np.tile(b2, (4, 1)), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_ffn_matches_direct_composition(seed):
    from scipy.special import erf

    rng = np.random.default_rng(seed)
    w1, b1 = rng.standard_normal((3, 5)), rng.standard_normal(5)
    w2, b2 = rng.standard_normal((5, 3)), rng.standard_normal(3)
    x = rng.standard_normal((4, 3))
    out = ffn(Tensor(x), _ffn_weights(w1, b1, w2, b2)).data
    hidden = x @ w1 + b1
    hidden = hidden * 0.5 * (1.0 + erf(hidden / np.sqrt(2.0)))
    assert np.max(np.abs(out - (hidden @ w2 + b2))) < 1e-12


# ---------------------------------------------------------------------------
# mse
# ---------------------------------------------------------------------------

def test_mse_identity_is_zero():
    assert mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0


def test_mse_hand_case():
    assert mse(Tensor([0.0, 0.0]), Tensor([2.0, 2.0])).item() == 4.0


def test_mse_matches_loop_oracle():
    rng = np.random.default_rng(7)
    p, t = rng.standard_normal(7), rng.standard_normal(7)
    total = 0.0
    for i in range(7):
        total += (p[i] - t[i]) ** 2
    assert abs(mse(Tensor(p), Tensor(t)).item() - total / 7) < 1e-14


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse(Tensor([1.0, 2.0]), Tensor([1.0]))


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------

def test_backward_chain_rule_by_hand():
    w = Parameter("w", np.array([[2.0]]))
    x, y = Tensor([[3.0]]), Tensor([[5.0]])
    backward(mse(matmul(w, x), y))
    assert w.grad.reshape(()) == pytest.approx(2 * 3 * (2 * 3 - 5), abs=1e-12)


def test_backward_unused_parameter_grad_stays_zero():
    w = Parameter("w", np.array([[2.0]]))
    unused = Parameter("unused", np.array([1.0, 1.0]))
    backward(mse(matmul(w, Tensor([[3.0]])), Tensor([[5.0]])))
    assert np.array_equal(unused.grad, np.zeros(2))


def test_backward_accumulates_without_zeroing():
    w = Parameter("w", np.array([[2.0]]))
    x, y = Tensor([[3.0]]), Tensor([[5.0]])
    backward(mse(matmul(w, x), y))
    once = w.grad.copy()
    backward(mse(matmul(w, x), y))
    assert np.allclose(w.grad, 2 * once, atol=1e-14)


def test_backward_on_detached_value_raises():
    with pytest.raises(TapeError):
        backward(Tensor(3.0))


def test_backward_requires_scalar():
    w = Parameter("w", np.array([1.0, 2.0]))
    with pytest.raises(ShapeError):
        backward(w + Tensor([0.0, 0.0]))


def test_no_grad_detaches():
    w = Parameter("w", np.array([[2.0]]))
    with no_grad():
        out = matmul(w, Tensor([[3.0]]))
    assert not out.requires_grad


def test_nonfinite_forward_raises():
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        matmul(Tensor([[1e300]]), Tensor([[1e300]]))


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(11)
    _, bundle = _rand_attention_weights(rng, 4)
    x = Tensor(rng.standard_normal((3, 4)))
    a = multi_head_attention(x, x, x, bundle, 2).data
    b = multi_head_attention(x, x, x, bundle, 2).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# per-op gradients against central finite differences
# ---------------------------------------------------------------------------

def _fd_check(build_loss, param, h=1e-5, tol=1e-4):
    """Central finite differences on every coordinate of `param`."""
    param.zero_grad()
    backward(build_loss())
    analytic = param.grad.copy()
    flat = param.data.reshape(-1)
    fd = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            fd[i] = (up - down) / (2 * h)
    rel = np.abs(analytic.reshape(-1) - fd) / np.maximum(
        np.maximum(np.abs(analytic.reshape(-1)), np.abs(fd)), 1e-8
    )
    assert rel.max() < tol, f"max rel err {rel.max():.2e}"


@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    target = Tensor(rng.standard_normal((3, 4)))

    p = Parameter("p", rng.standard_normal((3, 4)))
    _fd_check(lambda: mse(gelu(p), target), p)
    _fd_check(lambda: mse(softmax(p, axis=-1), target), p)
    _fd_check(
        lambda: mse(
            layer_norm(p, Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5), target
        ),
        p,
    )

    w = Parameter("w", rng.standard_normal((4, 4)))
    _fd_check(lambda: mse(matmul(p.detach(), w), target), w)

    gain = Parameter("gain", rng.standard_normal(4))
    _fd_check(
        lambda: mse(layer_norm(p.detach(), gain, Tensor(np.zeros(4)), 1e-5), target),
        gain,
    )


@pytest.mark.parametrize("seed", range(20))
def test_structural_op_gradients(seed):
    rng = np.random.default_rng(seed)
    p = Parameter("p", rng.standard_normal((4, 3)))
    tgt_cat = Tensor(rng.standard_normal((8, 3)))
    _fd_check(lambda: mse(concat([p, p], axis=0), tgt_cat), p)

    tgt_slice = Tensor(rng.standard_normal((2, 3)))
    _fd_check(lambda: mse(slice_axis(p, 0, 1, 3), tgt_slice), p)

    tgt_flat = Tensor(rng.standard_normal(12))
    _fd_check(lambda: mse(reshape(p, (12,)), tgt_flat), p)

    tgt_t = Tensor(rng.standard_normal((3, 4)))
    _fd_check(lambda: mse(swapaxes(p, 0, 1), tgt_t), p)

    table = Parameter("table", rng.standard_normal((5, 3)))
    ids = [0, 2, 2, 4]
    tgt_rows = Tensor(rng.standard_normal((4, 3)))
    _fd_check(lambda: mse(gather_rows(table, ids), tgt_rows), table)

    row = Parameter("row", rng.standard_normal((1, 3)))
    tgt_b = Tensor(rng.standard_normal((4, 3)))
    _fd_check(lambda: mse(broadcast_to(row, (4, 3)), tgt_b), row)


@pytest.mark.parametrize("seed", range(20))
def test_attention_and_ffn_gradients(seed):
    rng = np.random.default_rng(seed)
    d = 4
    raw, _ = _rand_attention_weights(rng, d)
    params = {k: Parameter(k, v) for k, v in raw.items()}
    bundle = AttentionWeights(**params)
    q = Tensor(rng.standard_normal((3, d)))
    kv = Tensor(rng.standard_normal((2, d)))
    target = Tensor(rng.standard_normal((3, d)))

    name = ["w_q", "w_k", "w_v", "w_o", "b_q", "b_v", "b_o"][seed % 7]
    _fd_check(
        lambda: mse(multi_head_attention(q, kv, kv, bundle, 2), target), params[name]
    )

    fw = {
        "w1": Parameter("w1", rng.standard_normal((d, 6))),
        "b1": Parameter("b1", rng.standard_normal(6)),
        "w2": Parameter("w2", rng.standard_normal((6, d))),
        "b2": Parameter("b2", rng.standard_normal(d)),
    }
    f_bundle = FeedForwardWeights(**fw)
    x = Tensor(rng.standard_normal((3, d)))
    _fd_check(lambda: mse(ffn(x, f_bundle), target), fw[["w1", "b1", "w2", "b2"][seed % 4]])


def test_linear_bias_broadcast_gradient():
    rng = np.random.default_rng(5)
    b = Parameter("b", rng.standard_normal(3))
    x = Tensor(rng.standard_normal((4, 2)))
    w = Tensor(rng.standard_normal((2, 3)))
    target = Tensor(rng.standard_normal((4, 3)))
    _fd_check(lambda: mse(linear(x, w, b), target), b)
