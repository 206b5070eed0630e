"""Small dense-tensor autodiff engine for the question generation model.

All tensors are 2-D row-major arrays (scalars are [1,1], vectors [1,n]).
float64 is the default and the only mode the test suite uses; finite
differences are not trustworthy in float32, which is offered purely as a
training-speed option. Every operation records its inputs and a backward
closure on its output, so a forward pass rebuilds the computation record
from scratch (define-by-run) and ``backward`` replays it once in reverse
topological order.

Graphs are single-use: an optimizer may mutate Parameter values between
passes, never during one. Recording is skipped entirely inside ``no_grad``.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the operation."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph recording (decoding, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A 2-D array plus a lazily allocated gradient slot and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            arr = np.atleast_2d(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named trainable tensor; ``grad`` accumulates until explicitly zeroed."""

    def __init__(self, name, data):
        self.name = name
        self.value = Tensor(data, requires_grad=True)
        self.value.grad = np.zeros_like(self.value.data)

    @property
    def grad(self):
        return self.value.grad

    def zero_grad(self):
        self.value.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.data.shape})"


def tensor(data):
    """Constant (non-differentiable) tensor from array-like data."""
    return Tensor(data)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backward_fn):
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward_fn
        return out
    return Tensor(data)


def _toposort(root):
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss):
    """Accumulate d(loss)/d(x) into .grad of every reachable tensor.

    The reverse sweep walks the recorded operations once, in reverse
    topological order; tensors not on a path to ``loss`` keep their grads.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a constant: nothing requires grad")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _reduce_to(g, shape):
    """Sum a broadcasted gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    if shape == (1, g.shape[1]):
        return g.sum(axis=0, keepdims=True)
    if shape == (g.shape[0], 1):
        return g.sum(axis=1, keepdims=True)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a, b, op):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sb == (1, 1) or sa == (1, 1):
        return
    if sb == (1, sa[1]) or sb == (sa[0], 1):
        return
    if sa == (1, sb[1]) or sa == (sb[0], 1):
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not align")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product [m,k]x[k,n] -> [m,n]."""
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}"
        )

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def transpose(a):
    def bwd(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), bwd)


def add(a, b):
    _check_broadcast(a, b, "add")

    def bwd(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    _check_broadcast(a, b, "sub")

    def bwd(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    _check_broadcast(a, b, "mul")

    def bwd(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b):
    _check_broadcast(a, b, "div")

    def bwd(g):
        _accum(a, _reduce_to(g / b.data, a.data.shape))
        _accum(b, _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), bwd)


def scale(a, c):
    """Multiply by a Python float constant."""
    c = float(c)

    def bwd(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bwd)


def relu(a):
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _make(out_data, (a,), bwd)


def tanh(a):
    out_data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bwd)


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd)


def concat(parts, axis):
    """Concatenate along axis 0 (rows) or 1 (columns)."""
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    parts = list(parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            piece = g[lo:hi] if axis == 0 else g[:, lo:hi]
            _accum(p, piece)

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


def gather(a, rows):
    """Pick rows by index; backward scatter-adds into the source rows."""
    rows = np.asarray(rows, dtype=np.int64)
    n = a.data.shape[0]
    for r in rows:
        if r < 0 or r >= n:
            raise IndexError(f"gather index {int(r)} out of range for {n} rows")

    def bwd(g):
        gf = np.zeros_like(a.data)
        np.add.at(gf, rows, g)
        _accum(a, gf)

    return _make(a.data[rows], (a,), bwd)


def gather_cols(a, cols):
    cols = np.asarray(cols, dtype=np.int64)
    n = a.data.shape[1]
    for c in cols:
        if c < 0 or c >= n:
            raise IndexError(f"gather_cols index {int(c)} out of range for {n} columns")

    def bwd(g):
        gf = np.zeros_like(a.data)
        np.add.at(gf.T, cols, g.T)
        _accum(a, gf)

    return _make(a.data[:, cols], (a,), bwd)


def sum_all(a):
    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(a.data.sum().reshape(1, 1), (a,), bwd)


def softmax_rows(a):
    """Row-wise softmax with max-subtraction; rows are nonnegative and sum to 1."""
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows over NaN input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), bwd)


def layer_norm(a, gain, bias, eps=1e-5):
    """Per-row standardization followed by an affine map with [1,n] gain/bias."""
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = (x - mu) / s
    out_data = gain.data * xhat + bias.data

    def bwd(g):
        n = x.shape[1]
        _accum(bias, g.sum(axis=0, keepdims=True))
        _accum(gain, (g * xhat).sum(axis=0, keepdims=True))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        _accum(a, (dxhat - m1 - xhat * m2) / s)

    return _make(out_data, (a, gain, bias), bwd)


def group_max_rows(a, groups):
    """Per-row max over column groups; [m,n] -> [m,G].

    Ties resolve to the lowest column index (groups carry ascending
    positions). Backward routes the gradient only to the arg-max column.
    """
    m = a.data.shape[0]
    arg = np.empty((m, len(groups)), dtype=np.int64)
    out_data = np.empty((m, len(groups)), dtype=a.data.dtype)
    rows = np.arange(m)
    for k, pos in enumerate(groups):
        pos_arr = np.asarray(pos, dtype=np.int64)
        block = a.data[:, pos_arr]
        j = block.argmax(axis=1)
        arg[:, k] = pos_arr[j]
        out_data[:, k] = block[rows, j]

    def bwd(g):
        gf = np.zeros_like(a.data)
        for k in range(arg.shape[1]):
            np.add.at(gf, (rows, arg[:, k]), g[:, k])
        _accum(a, gf)

    return _make(out_data, (a,), bwd)


def neg_log_prob(p, cols, floor=1e-12):
    """Per-row -log p[r, cols[r]], clamped below at ``floor``; [m,n] -> [m,1].

    In the clamp region the gradient is zero (the clamped loss is constant
    there), which keeps early training finite without exploding steps.
    """
    cols = np.asarray(cols, dtype=np.int64)
    m = p.data.shape[0]
    rows = np.arange(m)
    vals = p.data[rows, cols]
    out_data = -np.log(np.maximum(vals, floor)).reshape(m, 1)

    def bwd(g):
        gf = np.zeros_like(p.data)
        live = vals > floor
        gf[rows[live], cols[live]] = -g[live, 0] / vals[live]
        _accum(p, gf)

    return _make(out_data, (p,), bwd)


def multihead_attention(q_in, kv_in, wq, wk, wv, wo, n_heads, scale_factor, causal=False):
    """Fused multi-head attention: one recorded op instead of a dozen.

    q_in [n,d] and kv_in [m,d] may be the same tensor (self-attention);
    wq/wk/wv/wo are [d,d] with per-head column blocks of width d/heads.
    With ``causal`` each query row only ever touches key/value rows up to
    its own position, so earlier outputs are bit-identical under appends.
    """
    n, d = q_in.data.shape
    m = kv_in.data.shape[0]
    if d % n_heads:
        raise ShapeError(f"model width {d} not divisible by {n_heads} heads")
    if causal and n != m:
        raise ShapeError(f"causal attention needs square shape, got {n}x{m}")
    dh = d // n_heads
    Q = q_in.data @ wq.data
    K = kv_in.data @ wk.data
    V = kv_in.data @ wv.data
    heads = np.empty((n, d), dtype=Q.dtype)
    attn = []
    for j in range(n_heads):
        sl = slice(j * dh, (j + 1) * dh)
        Qj, Kj, Vj = Q[:, sl], K[:, sl], V[:, sl]
        if causal:
            rows = []
            for t in range(n):
                s = (Qj[t] @ Kj[: t + 1].T) * scale_factor
                e = np.exp(s - s.max())
                a_row = e / e.sum()
                rows.append(a_row)
                heads[t, sl] = a_row @ Vj[: t + 1]
            attn.append(rows)
        else:
            s = (Qj @ Kj.T) * scale_factor
            e = np.exp(s - s.max(axis=1, keepdims=True))
            a_mat = e / e.sum(axis=1, keepdims=True)
            attn.append(a_mat)
            heads[:, sl] = a_mat @ Vj
    out_data = heads @ wo.data

    def bwd(g):
        _accum(wo, heads.T @ g)
        dheads = g @ wo.data.T
        dQ = np.zeros_like(Q)
        dK = np.zeros_like(K)
        dV = np.zeros_like(V)
        for j in range(n_heads):
            sl = slice(j * dh, (j + 1) * dh)
            Qj, Kj, Vj = Q[:, sl], K[:, sl], V[:, sl]
            dHj = dheads[:, sl]
            if causal:
                for t in range(n):
                    a_row = attn[j][t]
                    dA = dHj[t] @ Vj[: t + 1].T
                    dV[: t + 1, sl] += np.outer(a_row, dHj[t])
                    ds = a_row * (dA - (dA * a_row).sum())
                    dQ[t, sl] += scale_factor * (ds @ Kj[: t + 1])
                    dK[: t + 1, sl] += scale_factor * np.outer(ds, Qj[t])
            else:
                A = attn[j]
                dA = dHj @ Vj.T
                dV[:, sl] += A.T @ dHj
                dS = A * (dA - (dA * A).sum(axis=1, keepdims=True))
                dQ[:, sl] += scale_factor * (dS @ Kj)
                dK[:, sl] += scale_factor * (dS.T @ Qj)
        _accum(wq, q_in.data.T @ dQ)
        _accum(wk, kv_in.data.T @ dK)
        _accum(wv, kv_in.data.T @ dV)
        _accum(q_in, dQ @ wq.data.T)
        _accum(kv_in, dK @ wk.data.T + dV @ wv.data.T)

    return _make(out_data, (q_in, kv_in, wq, wk, wv, wo), bwd)


def dropout(a, rate, rng):
    """Inverted dropout with a mask drawn from ``rng``; identity at rate 0."""
    if rate <= 0.0:
        return a
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(mask.astype(a.data.dtype)))


def grad_check(f, params, eps=1e-5):
    """Worst relative error of analytic grads vs central finite differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    tensor. Denominator per coordinate is max(|analytic|, |numeric|, 1e-8).
    Only meaningful in float64.
    """
    if eps <= 0:
        raise ContractError("grad_check needs eps > 0")
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.value.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                num = (hi - lo) / (2.0 * eps)
                err = abs(aflat[i] - num) / max(abs(aflat[i]), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
