"""Dense tensors with reverse-mode differentiation.

Every op records its operands and a backward closure on the output tensor;
``backward`` walks the implicit graph in reverse topological order. Only the
primitives the translation models need are provided.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """Raised when a primitive produces NaN or Inf."""


class ShapeError(ValueError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (current thread only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # a NaN/Inf anywhere makes the sum non-finite; re-check elementwise only
    # when the sum itself overflowed
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in execution (topological) order."""
    return _topological(root)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params``; unreachable params get exact zeros."""
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), bw, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), bw, "sigmoid")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return _make(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), bw, "relu")


def square(x: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * x.data * g,)

    return _make(x.data * x.data, (x,), bw, "square")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for x of shape (..., d_in), W (d_in, d_out), b (d_out,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(
            f"affine shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        x2 = x.data.reshape(-1, W.shape[0])
        return (g @ W.data.T, x2.T @ g2, g2.sum(axis=0))

    return _make(x.data @ W.data + b.data, (x, W, b), bw, "affine")


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def getitem(x: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(x.data[index], (x,), bw, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    try:
        rows = table.data[ids]
    except IndexError:
        raise IndexError(f"id out of range for table with {table.shape[0]} rows") from None
    if (ids < 0).any():
        raise IndexError("negative id in embedding lookup")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(rows, (table,), bw, "take_rows")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


# ---------------------------------------------------------------- normalisers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """Summed ``-log softmax(logits)[target]``.

    ``logits`` is (V,) with an integer target, or (N, V) with N targets. Optional
    per-row ``weights`` (e.g. a padding mask divided by the token count) scale
    each row's loss.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if tgt.shape != (z.shape[0],):
        raise ShapeError(f"{tgt.shape[0]} targets for {z.shape[0]} rows of logits")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= z.shape[1]):
        raise IndexError(f"target index out of range for {z.shape[1]} classes")
    w = np.ones(z.shape[0], dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)
    logp = log_softmax_np(z)
    rows = np.arange(z.shape[0])
    loss = -(w * logp[rows, tgt]).sum()

    def bw(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        d = g * w[:, None] * p
        return (d[0] if single else d,)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- fused layers


def lstm_cell(state: Tensor, x: Tensor, W_x: Tensor, W_h: Tensor, b: Tensor,
              mask=None) -> Tensor:
    """One step of a 4-gate LSTM cell on a packed state ``[c, h]`` of shape (B, 2n).

    Gate order in the packed weights is (input, forget, output, candidate).
    Returns the new packed state. Rows whose ``mask`` entry is 0 carry the
    previous state through unchanged.
    """
    n = state.shape[-1] // 2
    if W_x.shape != (x.shape[-1], 4 * n) or W_h.shape != (n, 4 * n) or b.shape != (4 * n,):
        raise ShapeError(
            f"lstm mismatch: x {x.shape}, state {state.shape}, W_x {W_x.shape}, "
            f"W_h {W_h.shape}, b {b.shape}")
    c_prev, h_prev = state.data[:, :n], state.data[:, n:]
    z = x.data @ W_x.data + h_prev @ W_h.data + b.data
    gates = _sigmoid(z[:, :3 * n])
    i, f, o = gates[:, :n], gates[:, n:2 * n], gates[:, 2 * n:]
    gc = np.tanh(z[:, 3 * n:])
    c = f * c_prev + i * gc
    tc = np.tanh(c)
    out = np.concatenate([c, o * tc], axis=1)
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=c.dtype).reshape(-1, 1)
        out = m * out + (1.0 - m) * state.data

    def bw(g):
        g_keep = None
        if m is not None:
            g_keep = (1.0 - m) * g
            g = m * g
        dc_out, dh_out = g[:, :n], g[:, n:]
        dc = dc_out + dh_out * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gc * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dh_out * tc * o * (1.0 - o),
            dc * i * (1.0 - gc * gc),
        ], axis=1)
        dstate = np.concatenate([dc * f, dz @ W_h.data.T], axis=1)
        if g_keep is not None:
            dstate = dstate + g_keep
        return (dstate, dz @ W_x.data.T, x.data.T @ dz, h_prev.T @ dz, dz.sum(axis=0))

    return _make(out, (state, x, W_x, W_h, b), bw, "lstm_cell")


def lstm_step(c_prev: Tensor, h_prev: Tensor, x: Tensor, W_x: Tensor, W_h: Tensor,
              b: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """:func:`lstm_cell` with separate cell and hidden tensors; returns ``(c, h)``.

    Accepts a batch (B, n) or a single vector (n,).
    """
    c_prev, h_prev, x = as_tensor(c_prev), as_tensor(h_prev), as_tensor(x)
    if c_prev.shape != h_prev.shape:
        raise ShapeError(f"cell {c_prev.shape} and hidden {h_prev.shape} differ")
    if c_prev.ndim == 1:
        c, h = lstm_step(reshape(c_prev, (1, -1)), reshape(h_prev, (1, -1)), reshape(x, (1, -1)),
                         W_x, W_h, b, mask)
        return reshape(c, c_prev.shape), reshape(h, h_prev.shape)
    return split_state(lstm_cell(concat([c_prev, h_prev], axis=1), x, W_x, W_h, b, mask))


def split_state(state: Tensor) -> tuple[Tensor, Tensor]:
    n = state.shape[-1] // 2
    return state[:, :n], state[:, n:]


def attend(query: Tensor, keys: Tensor, W_q: Tensor, v: Tensor, values: Tensor,
           mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Additive attention as one primitive.

    scores ``e_t = v . tanh(keys_t + query W_q)`` for keys (B, T, a), query
    (B, d); weights are the softmax of the scores over unmasked positions and
    the context is ``values_0 + sum_t w_t (values_t - values_0)``, i.e. the
    weighted mean of values (B, T, D) accumulated relative to the first row.
    Returns the context (B, D) and the weights as a plain array (B, T).
    """
    B, T, a = keys.shape
    if query.shape[0] != B or W_q.shape != (query.shape[1], a) or v.shape != (a,):
        raise ShapeError(
            f"attention mismatch: query {query.shape}, keys {keys.shape}, W {W_q.shape}, v {v.shape}")
    if values.shape[:2] != (B, T):
        raise ShapeError(f"values {values.shape} do not line up with keys {keys.shape}")
    hid = np.tanh(keys.data + (query.data @ W_q.data)[:, None, :])
    e = hid @ v.data
    if mask is not None and not mask.all():
        e = np.where(mask > 0, e, -np.inf)
    e = e - e.max(axis=1, keepdims=True)
    w = np.exp(e)
    w /= w.sum(axis=1, keepdims=True)
    h = values.data
    offsets = h - h[:, :1]
    ctx = (w[:, None, :] @ offsets)[:, 0] + h[:, 0]

    def bw(g):
        dw = (offsets @ g[:, :, None])[:, :, 0]
        de = w * (dw - (w * dw).sum(axis=1, keepdims=True))
        dpre = de[:, :, None] * v.data * (1.0 - hid * hid)
        dq = dpre.sum(axis=1)
        dvals = w[:, :, None] * g[:, None, :]
        dvals[:, 0] += (1.0 - w.sum(axis=1))[:, None] * g
        dv = de.reshape(-1) @ hid.reshape(-1, a)
        return dq @ W_q.data.T, dpre, query.data.T @ dq, dv, dvals

    return _make(ctx, (query, keys, W_q, v, values), bw, "attend"), w


def conv_out_len(length: int) -> int:
    return (length + 1) // 2


def conv2d(x: Tensor, filters: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution with stride 2 on both axes.

    ``x`` is (B, T, F, depth), ``filters`` is (3, 3, depth, K). Each axis is
    zero-padded by one cell on both sides, so the output is
    (B, ceil(T/2), ceil(F/2), K).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be (B, T, F, depth), got {x.shape}")
    B, T, F, D = x.shape
    if T < 1 or F < 1:
        raise ShapeError(f"conv2d got empty input {x.shape}")
    if filters.shape[:3] != (3, 3, D) or bias.shape != (filters.shape[3],):
        raise ShapeError(f"filters {filters.shape} / bias {bias.shape} do not fit input depth {D}")
    K = filters.shape[3]
    To, Fo = conv_out_len(T), conv_out_len(F)
    # pad to 2*To+1 x 2*Fo+1 so every stride-2 window is in range
    padded = np.zeros((B, 2 * To + 1, 2 * Fo + 1, D), dtype=x.dtype)
    padded[:, 1:T + 1, 1:F + 1] = x.data
    cols = np.empty((B, To, Fo, 3, 3, D), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di, dj] = padded[:, di:di + 2 * To:2, dj:dj + 2 * Fo:2]
    cols2 = cols.reshape(-1, 9 * D)
    W2 = filters.data.reshape(9 * D, K)
    out = (cols2 @ W2 + bias.data).reshape(B, To, Fo, K)

    def bw(g):
        g2 = g.reshape(-1, K)
        dW = (cols2.T @ g2).reshape(filters.shape)
        dcols = (g2 @ W2.T).reshape(B, To, Fo, 3, 3, D)
        dpad = np.zeros_like(padded)
        for di in range(3):
            for dj in range(3):
                dpad[:, di:di + 2 * To:2, dj:dj + 2 * Fo:2] += dcols[:, :, :, di, dj]
        return dpad[:, 1:T + 1, 1:F + 1], dW, g2.sum(axis=0)

    return _make(out, (x, filters, bias), bw, "conv2d")


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-3,
               stencil: int = 3) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` recomputes a scalar loss from the current contents of ``params``;
    entries are perturbed in place and restored. ``stencil`` is 3 (plain
    central difference) or 5 (fourth-order central difference). Relative error
    per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    analytic = gradients(f(), params)

    def value() -> float:
        with no_grad():
            v = float(f().data)
        if not np.isfinite(v):
            raise NumericError("loss is not finite at a perturbed point")
        return v

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            if stencil == 3:
                flat[j] = orig + step
                fp = value()
                flat[j] = orig - step
                fm = value()
                num = (fp - fm) / (2 * step)
            else:
                vals = []
                for k in (2, 1, -1, -2):
                    flat[j] = orig + k * step
                    vals.append(value())
                num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step)
            flat[j] = orig
            err = abs(a_flat[j] - num) / max(abs(a_flat[j]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
