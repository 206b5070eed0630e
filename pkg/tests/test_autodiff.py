import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbqgen import autodiff as ad


def finite_diff(f, params, eps=1e-5):
    """Independent central-difference oracle; never touches backward()."""
    grads = []
    with ad.no_grad():
        for p in params:
            flat = p.value.data.reshape(-1)
            g = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                g[i] = (hi - lo) / (2 * eps)
            grads.append(g.reshape(p.value.data.shape))
    return grads


def analytic_grads(f, params):
    for p in params:
        p.zero_grad()
    loss = f()
    ad.backward(loss)
    return [p.grad.copy() for p in params]


def rel_err(a, n):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def check_op(f, params):
    a = analytic_grads(f, params)
    n = finite_diff(f, params)
    return max(rel_err(x, y) for x, y in zip(a, n))


def test_matmul_identity():
    i2 = ad.tensor(np.eye(2))
    out = ad.matmul(i2, i2)
    assert np.array_equal(out.data, np.eye(2))


def test_matmul_hand():
    a = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = ad.tensor([[1.0], [1.0]])
    assert np.array_equal(ad.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    a = ad.tensor(np.zeros((3, 4)))
    b = ad.tensor(np.zeros((3, 2)))
    with pytest.raises(ad.ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        ad.matmul(a, b)


def test_matmul_gradients_vs_finite_differences():
    rng = np.random.default_rng(0)
    a = ad.Parameter("a", rng.normal(size=(3, 4)))
    b = ad.Parameter("b", rng.normal(size=(4, 2)))

    def f():
        return ad.sum_all(ad.tanh(ad.matmul(a.value, b.value)))

    assert check_op(f, [a, b]) < 1e-4


def test_softmax_uniform_on_equal_logits():
    out = ad.softmax_rows(ad.tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])


def test_softmax_no_overflow():
    out = ad.softmax_rows(ad.tensor([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0, 0] > 0.999999
    assert out.data[0, 1] < 1e-6


def test_softmax_nan_rejected():
    with pytest.raises(ad.NumericError):
        ad.softmax_rows(ad.tensor([[np.nan, 0.0]]))


def test_softmax_backward_vs_finite_differences():
    rng = np.random.default_rng(1)
    p = ad.Parameter("x", rng.normal(size=(2, 5)))
    w = ad.tensor(rng.normal(size=(2, 5)))

    def f():
        return ad.sum_all(ad.mul(ad.softmax_rows(p.value), w))

    assert check_op(f, [p]) < 1e-4


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 5),
    st.integers(1, 6),
    st.integers(0, 2**32 - 1),
)
def test_softmax_rows_sum_to_one(m, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=10.0, size=(m, n))
    out = ad.softmax_rows(ad.tensor(x))
    assert np.all(np.abs(out.data.sum(axis=1) - 1.0) < 1e-9)


def test_layer_norm_constant_row_is_zero():
    gain = ad.tensor(np.ones((1, 3)))
    bias = ad.tensor(np.zeros((1, 3)))
    out = ad.layer_norm(ad.tensor([[5.0, 5.0, 5.0]]), gain, bias)
    assert np.allclose(out.data, 0.0)


def test_layer_norm_two_values():
    # (x - mu)/sigma for [1, 3]: mu=2, sigma=1 -> [-1, 1] up to the 1e-5 eps
    gain = ad.tensor(np.ones((1, 2)))
    bias = ad.tensor(np.zeros((1, 2)))
    out = ad.layer_norm(ad.tensor([[1.0, 3.0]]), gain, bias)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_gradients():
    rng = np.random.default_rng(2)
    x = ad.Parameter("x", rng.normal(size=(3, 6)))
    gain = ad.Parameter("g", rng.normal(size=(1, 6)))
    bias = ad.Parameter("b", rng.normal(size=(1, 6)))
    w = ad.tensor(rng.normal(size=(3, 6)))

    def f():
        return ad.sum_all(ad.mul(ad.layer_norm(x.value, gain.value, bias.value), w))

    assert check_op(f, [x, gain, bias]) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_layer_norm_standardizes_rows(n, seed):
    # the 1e-5 variance bound needs row variance >> eps, so skip degenerate rows
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=3.0, size=(4, n))
    if np.any(x.var(axis=1) < 2.0):
        return
    gain = ad.tensor(np.ones((1, n)))
    bias = ad.tensor(np.zeros((1, n)))
    out = ad.layer_norm(ad.tensor(x), gain, bias).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-7)
    assert np.all(np.abs(out.var(axis=1) - 1.0) < 1e-5)


def test_relu_and_sigmoid_points():
    assert ad.relu(ad.tensor([[-1.0, 2.0]])).data.tolist() == [[0.0, 2.0]]
    assert ad.sigmoid(ad.tensor([[0.0]])).item() == 0.5


def test_gather_grad_counts_occurrences():
    table = ad.Parameter("emb", np.arange(12, dtype=np.float64).reshape(4, 3))
    ids = [2, 0, 2]
    out = ad.sum_all(ad.gather(table.value, ids))
    table.zero_grad()
    ad.backward(out)
    # each gathered row receives one unit of gradient per occurrence
    expected = np.zeros((4, 3))
    expected[2] = 2.0
    expected[0] = 1.0
    assert np.array_equal(table.grad, expected)


def test_gather_out_of_bounds_names_index():
    table = ad.tensor(np.zeros((4, 3)))
    with pytest.raises(IndexError, match="7"):
        ad.gather(table, [1, 7])


def test_backward_non_scalar_rejected():
    p = ad.Parameter("p", np.ones((2, 2)))
    out = ad.mul(p.value, p.value)
    with pytest.raises(ad.ContractError):
        ad.backward(out)


def test_backward_is_additive():
    rng = np.random.default_rng(3)
    init = rng.normal(size=(2, 3))

    def losses(p):
        l1 = ad.sum_all(ad.mul(p.value, p.value))
        l2 = ad.sum_all(ad.tanh(p.value))
        return l1, l2

    p = ad.Parameter("p", init.copy())
    l1, l2 = losses(p)
    ad.backward(l1)
    ad.backward(l2)
    separate = p.grad.copy()

    p2 = ad.Parameter("p", init.copy())
    l1, l2 = losses(p2)
    ad.backward(ad.add(l1, l2))
    assert np.allclose(separate, p2.grad, rtol=1e-12, atol=1e-15)


def test_grad_check_quadratic():
    # f(theta) = sum(theta^2): analytic gradient 2*theta
    p = ad.Parameter("p", np.array([[0.3, -1.2, 2.0]]))

    def f():
        return ad.sum_all(ad.mul(p.value, p.value))

    assert ad.grad_check(f, [p]) < 1e-7


def test_grad_check_constant_function():
    p = ad.Parameter("p", np.ones((1, 2)))
    c = ad.tensor([[4.0]])

    def f():
        return ad.add(ad.scale(ad.sum_all(p.value), 0.0), c)

    assert ad.grad_check(f, [p]) == 0.0


def test_group_max_rows_forward_and_backward():
    x = ad.Parameter("x", np.array([[0.2, 0.5, 0.3], [0.9, 0.1, 0.9]]))
    groups = [[0, 2], [1]]
    out = ad.group_max_rows(x.value, groups)
    assert np.allclose(out.data, [[0.3, 0.5], [0.9, 0.1]])
    x.zero_grad()
    ad.backward(ad.sum_all(out))
    # row 0: max of cols {0,2} is col 2; row 1 ties -> lowest index col 0
    expected = np.array([[0.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
    assert np.array_equal(x.grad, expected)


def test_neg_log_prob_floor_keeps_loss_finite():
    p = ad.tensor([[0.0, 1.0]])
    out = ad.neg_log_prob(p, [0])
    assert np.isfinite(out.item())
    assert out.item() == pytest.approx(-np.log(1e-12))


def test_concat_roundtrip_gradients():
    rng = np.random.default_rng(4)
    a = ad.Parameter("a", rng.normal(size=(2, 3)))
    b = ad.Parameter("b", rng.normal(size=(2, 2)))
    w = ad.tensor(rng.normal(size=(2, 5)))

    def f():
        return ad.sum_all(ad.mul(ad.concat([a.value, b.value], axis=1), w))

    assert check_op(f, [a, b]) < 1e-4


PRIMITIVE_CASES = {
    "matmul": lambda p, q, w: ad.matmul(p, q),
    "transpose": lambda p, q, w: ad.matmul(ad.transpose(p), w),
    "add": lambda p, q, w: ad.add(p, q),
    "sub": lambda p, q, w: ad.sub(p, q),
    "mul": lambda p, q, w: ad.mul(p, q),
    "div": lambda p, q, w: ad.div(p, q),
    "relu": lambda p, q, w: ad.relu(p),
    "tanh": lambda p, q, w: ad.tanh(p),
    "sigmoid": lambda p, q, w: ad.sigmoid(p),
    "softmax": lambda p, q, w: ad.softmax_rows(p),
    "concat0": lambda p, q, w: ad.concat([p, q], axis=0),
    "gather": lambda p, q, w: ad.gather(p, [1, 0, 1]),
    "gather_cols": lambda p, q, w: ad.gather_cols(p, [2, 0]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    p = ad.Parameter("p", rng.normal(size=(3, 3)) + 2.0)
    q = ad.Parameter("q", rng.normal(size=(3, 3)) + 2.0)
    w = ad.tensor(rng.normal(size=(3, 3)))
    op = PRIMITIVE_CASES[name]
    probe = ad.tensor(rng.normal(size=op(p.value, q.value, w).shape))

    def f():
        return ad.sum_all(ad.mul(op(p.value, q.value, w), probe))

    assert check_op(f, [p, q]) < 1e-4


@pytest.mark.parametrize("causal", [False, True])
def test_multihead_attention_gradients(causal):
    rng = np.random.default_rng(11 + causal)
    d, n = 4, 3
    x = ad.Parameter("x", rng.normal(size=(n, d)))
    wq = ad.Parameter("wq", rng.normal(size=(d, d)) * 0.3)
    wk = ad.Parameter("wk", rng.normal(size=(d, d)) * 0.3)
    wv = ad.Parameter("wv", rng.normal(size=(d, d)) * 0.3)
    wo = ad.Parameter("wo", rng.normal(size=(d, d)) * 0.3)
    params = [x, wq, wk, wv, wo]

    def f():
        out = ad.multihead_attention(
            x.value, x.value, wq.value, wk.value, wv.value, wo.value,
            n_heads=2, scale_factor=1.0 / np.sqrt(d / 2), causal=causal,
        )
        return ad.sum_all(ad.tanh(out))

    assert check_op(f, params) < 1e-4


def test_multihead_attention_cross_gradients():
    rng = np.random.default_rng(13)
    d = 4
    x = ad.Parameter("x", rng.normal(size=(3, d)))
    kv = ad.Parameter("kv", rng.normal(size=(2, d)))
    mats = [ad.Parameter(nm, rng.normal(size=(d, d)) * 0.3) for nm in "qkvo"]

    def f():
        out = ad.multihead_attention(
            x.value, kv.value, *[m.value for m in mats],
            n_heads=2, scale_factor=0.7,
        )
        return ad.sum_all(ad.tanh(out))

    assert check_op(f, [x, kv] + mats) < 1e-4


def test_no_grad_blocks_recording():
    p = ad.Parameter("p", np.ones((1, 2)))
    with ad.no_grad():
        out = ad.sum_all(ad.mul(p.value, p.value))
    assert not out.requires_grad
    with pytest.raises(ad.ContractError):
        ad.backward(out)
