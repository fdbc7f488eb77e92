"""Dense arrays with tape-based reverse-mode differentiation.

Every differentiable primitive records a node on creation; nodes carry a
monotonically increasing sequence number, so sorting reachable nodes by that
number replays the tape in reverse topological order.  Storage is float32 by
default, reductions and contractions accumulate in float64.  Passing float64
arrays keeps the whole graph in float64, which is what the finite-difference
checks use.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32
ACC = np.float64

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded primitive: its inputs and the rule mapping the output
    gradient to input gradients."""

    __slots__ = ("op", "inputs", "backward_fn", "seq", "consumed")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.consumed = False


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.array(arr, dtype=dtype, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, retain_graph=False):
        return backward(self, retain_graph=retain_graph)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._node = Node(op, tuple(parents), backward_fn)
    return out


def _check_broadcast(a_shape, b_shape, op):
    if a_shape == b_shape:
        return
    if int(np.prod(a_shape)) == 1 or int(np.prod(b_shape)) == 1:
        return
    try:
        out = np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        out = None
    # one-sided expansion only: the result must already be one operand's shape
    if out is None or (out != tuple(a_shape) and out != tuple(b_shape)):
        raise DimensionError(f"{op}: incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}")


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=ACC)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True, dtype=ACC)
    return g.reshape(shape)


def _out_dtype(*ts):
    return np.result_type(*[t.dtype for t in ts])


# -- elementwise -----------------------------------------------------------
def add(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a.shape, b.shape, "add")
    dt = _out_dtype(a, b)
    data = (a.data + b.data).astype(dt, copy=False)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), bw, "add")


def mul(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a.shape, b.shape, "mul")
    dt = _out_dtype(a, b)
    data = (a.data * b.data).astype(dt, copy=False)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), bw, "mul")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    p = float(p)
    data = np.power(a.data, p)

    def bw(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _result(data, (a,), bw, "pow")


def exp(a):
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,), "exp")


def log(a):
    data = np.log(a.data)
    return _result(data, (a,), lambda g: (g / a.data,), "log")


def elu(a):
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0))
    data = np.where(x > 0, x, neg_part).astype(x.dtype, copy=False)

    def bw(g):
        return (g * np.where(x > 0, 1.0, neg_part + 1.0).astype(x.dtype, copy=False),)

    return _result(data, (a,), bw, "elu")


def sigmoid(a):
    x = a.data
    data = (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)
    return _result(data, (a,), lambda g: (g * data * (1.0 - data),), "sigmoid")


def tanh(a):
    data = np.tanh(a.data)
    return _result(data, (a,), lambda g: (g * (1.0 - data * data),), "tanh")


def softmax(a):
    """Softmax over the last axis; rows sum to one."""
    x = a.data.astype(ACC)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    data = s.astype(a.dtype)

    def bw(g):
        g64 = g.astype(ACC)
        return ((s * (g64 - (g64 * s).sum(axis=-1, keepdims=True))).astype(a.dtype),)

    return _result(data, (a,), bw, "softmax")


softmax_lastdim = softmax


def log_softmax(a):
    x = a.data.astype(ACC)
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    y = x - lse
    data = y.astype(a.dtype)

    def bw(g):
        g64 = g.astype(ACC)
        return ((g64 - np.exp(y) * g64.sum(axis=-1, keepdims=True)).astype(a.dtype),)

    return _result(data, (a,), bw, "log_softmax")


# -- reductions and shape ops ---------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    data = np.asarray(a.data.sum(axis=axes, keepdims=keepdims, dtype=ACC), dtype=a.dtype)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result(data, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    data = np.asarray(a.data.sum(axis=axes, keepdims=keepdims, dtype=ACC) / n, dtype=a.dtype)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),)

    return _result(data, (a,), bw, "mean")


def reshape(a, shape):
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _result(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {a.shape}")
    inv = np.argsort(axes)
    data = a.data.transpose(axes)
    return _result(data, (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    try:
        data = a.data[idx]
    except IndexError as exc:
        raise DimensionError(f"index {idx!r} invalid for shape {a.shape}") from exc
    data = np.array(data, dtype=a.dtype)

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(data, (a,), bw, "slice")


slice_ = getitem


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    nd = tensors[0].ndim
    (ax,) = _norm_axis(axis, nd)
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat along axis {ax}: incompatible shapes {tensors[0].shape} and {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=ax).astype(_out_dtype(*tensors), copy=False)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _result(data, tuple(tensors), bw, "concat")


def concat_axis0(tensors):
    return concat(tensors, axis=0)


def embed_lookup(indices, table):
    """Rows of ``table`` (V, C) selected by an integer array of any shape."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("embed_lookup needs integer indices")
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"index out of range for table with {table.shape[0]} rows")
    data = table.data[idx]

    def bw(g):
        full = np.zeros(table.shape, dtype=ACC)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full.astype(table.dtype),)

    return _result(data, (table,), bw, "embed_lookup")


def pick(a, indices):
    """a[..., indices[...]]: one entry of the last axis per leading position."""
    idx = np.asarray(indices)[..., None]
    if idx.shape[:-1] != a.shape[:-1]:
        raise DimensionError(f"pick: index shape {idx.shape[:-1]} vs {a.shape[:-1]}")
    data = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _result(data, (a,), bw, "pick")


def stop_gradient(x):
    """Forward identity, treated as a constant by backpropagation."""
    out = Tensor.__new__(Tensor)
    out.data = x.data.copy()
    out.grad = None
    out._node = None
    out.requires_grad = False
    return out


def straight_through(x, target):
    """Forward value of ``target`` (bit-exact), gradient copied to ``x`` only.

    Equivalent to x + stop_gradient(target - x) without the float rounding.
    """
    if x.shape != target.shape:
        raise DimensionError(f"straight_through: {x.shape} vs {target.shape}")
    return _result(target.data.copy(), (x,), lambda g: (g,), "straight_through")


# -- contractions ----------------------------------------------------------
def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for {a.shape} and {b.shape}")
    dt = _out_dtype(a, b)
    data = np.matmul(a.data.astype(ACC), b.data.astype(ACC)).astype(dt)

    def bw(g):
        g64 = g.astype(ACC)
        ga = np.matmul(g64, np.swapaxes(b.data.astype(ACC), -1, -2))
        gb = np.matmul(np.swapaxes(a.data.astype(ACC), -1, -2), g64)
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga.astype(a.dtype), gb.astype(b.dtype)

    return _result(data, (a, b), bw, "matmul")


def _conv2d_fwd(x, w, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    kh, kw = w.shape[2:]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("bchwij,ocij->bohw", win, w, optimize=True)


def _conv2d_dx(g, w, x_shape, stride, pad):
    b, c, h, wd = x_shape
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    dxp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad), dtype=ACC)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                "bohw,oc->bchw", g, w[:, :, i, j], optimize=True)
    return dxp[:, :, pad:pad + h, pad:pad + wd]


def _conv2d_dw(g, x, w_shape, stride, pad):
    kh, kw = w_shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :g.shape[2], :g.shape[3]]
    return np.einsum("bohw,bchwij->ocij", g, win, optimize=True)


def conv2d(x, w, b=None, stride=1, padding=0):
    """x (B, Cin, H, W), w (Cout, Cin, kh, kw), b (Cout,)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs weight {w.shape}")
    dt = _out_dtype(x, w)
    x64, w64 = x.data.astype(ACC), w.data.astype(ACC)
    out = _conv2d_fwd(x64, w64, stride, padding)
    parents = [x, w]
    if b is not None:
        out = out + b.data.astype(ACC)[None, :, None, None]
        parents.append(b)

    def bw(g):
        g64 = g.astype(ACC)
        gx = _conv2d_dx(g64, w64, x.shape, stride, padding).astype(x.dtype)
        gw = _conv2d_dw(g64, x64, w.shape, stride, padding).astype(w.dtype)
        if b is None:
            return gx, gw
        return gx, gw, g64.sum(axis=(0, 2, 3)).astype(b.dtype)

    return _result(out.astype(dt), tuple(parents), bw, "conv2d")


def conv_transpose2d(x, w, b=None, stride=1, padding=0):
    """Adjoint of conv2d. x (B, Cin, h, w), w (Cin, Cout, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} vs weight {w.shape}")
    bsz, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wd - 1) * stride - 2 * padding + kw
    dt = _out_dtype(x, w)
    x64, w64 = x.data.astype(ACC), w.data.astype(ACC)
    out = _conv2d_dx(x64, w64, (bsz, w.shape[1], oh, ow), stride, padding)
    parents = [x, w]
    if b is not None:
        out = out + b.data.astype(ACC)[None, :, None, None]
        parents.append(b)

    def bw(g):
        g64 = g.astype(ACC)
        gx = _conv2d_fwd(g64, w64, stride, padding)[:, :, :h, :wd].astype(x.dtype)
        gw = _conv2d_dw(x64, g64, w.shape, stride, padding).astype(w.dtype)
        if b is None:
            return gx, gw
        return gx, gw, g64.sum(axis=(0, 2, 3)).astype(b.dtype)

    return _result(np.ascontiguousarray(out).astype(dt), tuple(parents), bw, "conv_transpose2d")


def causal_conv1d(x, w, b=None, stride=1):
    """Strided causal convolution over sequences.

    x (B, N, Cin), w (L, Cin, Cout).  Left-pads L-1 zeros, so
    out[u] = sum_k w[k] . x[u*stride + k - (L-1)] and output length is ceil(N/stride).
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise DimensionError(f"causal_conv1d: input {x.shape} vs weight {w.shape}")
    bsz, n, _ = x.shape
    klen = w.shape[0]
    m = -(-n // stride)
    dt = _out_dtype(x, w)
    x64, w64 = x.data.astype(ACC), w.data.astype(ACC)
    xp = np.pad(x64, ((0, 0), (klen - 1, 0), (0, 0)))
    win = sliding_window_view(xp, klen, axis=1)[:, ::stride][:, :m]  # (B, M, Cin, L)
    out = np.einsum("bmcl,lco->bmo", win, w64, optimize=True)
    parents = [x, w]
    if b is not None:
        out = out + b.data.astype(ACC)
        parents.append(b)

    def bw(g):
        g64 = g.astype(ACC)
        gxp = np.zeros_like(xp)
        for k in range(klen):
            gxp[:, k:k + stride * m:stride] += g64 @ w64[k].T
        gw = np.einsum("bmcl,bmo->lco", win, g64, optimize=True)
        grads = [gxp[:, klen - 1:].astype(x.dtype), gw.astype(w.dtype)]
        if b is not None:
            grads.append(g64.sum(axis=(0, 1)).astype(b.dtype))
        return tuple(grads)

    return _result(out.astype(dt), tuple(parents), bw, "causal_conv1d")


def _transposed_full(x64, w64, stride):
    bsz, m, _ = x64.shape
    klen, _, cout = w64.shape
    out = np.zeros((bsz, (m - 1) * stride + klen, cout), dtype=ACC)
    for k in range(klen):
        out[:, k:k + stride * m:stride] += x64 @ w64[k]
    return out


def causal_conv_transpose1d(x, w, b=None, stride=1):
    """Causal transposed convolution over sequences.

    x (B, M, Cin), w (L, Cin, Cout).  out[t] = sum over u with 0 <= t - u*stride < L
    of w[t - u*stride] . x[u]; output length M*stride.  out[t] therefore only sees
    x[u] for u <= floor(t / stride).
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise DimensionError(f"causal_conv_transpose1d: input {x.shape} vs weight {w.shape}")
    bsz, m, _ = x.shape
    klen = w.shape[0]
    n_out = m * stride
    dt = _out_dtype(x, w)
    x64, w64 = x.data.astype(ACC), w.data.astype(ACC)
    full = _transposed_full(x64, w64, stride)
    out = np.zeros((bsz, n_out, w.shape[2]), dtype=ACC)
    keep = min(n_out, full.shape[1])
    out[:, :keep] = full[:, :keep]
    parents = [x, w]
    if b is not None:
        out = out + b.data.astype(ACC)
        parents.append(b)

    def bw(g):
        g64 = g.astype(ACC)
        gfull = np.zeros((bsz, full.shape[1], w.shape[2]), dtype=ACC)
        gfull[:, :keep] = g64[:, :keep]
        gx = np.zeros_like(x64)
        gw = np.zeros_like(w64)
        for k in range(klen):
            gk = gfull[:, k:k + stride * m:stride]
            gx += gk @ w64[k].T
            gw[k] = np.einsum("bmc,bmo->co", x64, gk)
        grads = [gx.astype(x.dtype), gw.astype(w.dtype)]
        if b is not None:
            grads.append(g64.sum(axis=(0, 1)).astype(b.dtype))
        return tuple(grads)

    return _result(out.astype(dt), tuple(parents), bw, "causal_conv_transpose1d")


# -- composites ------------------------------------------------------------
def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (..., K)."""
    return neg(mean(pick(log_softmax(logits), labels)))


def mse(a, b):
    d = a - b
    return mean(d * d)


# -- reverse pass ----------------------------------------------------------
def backward(loss, retain_graph=False):
    """Backpropagate from a scalar ``loss``.

    Accumulates into ``.grad`` of every reachable leaf with ``requires_grad`` and
    returns ``{leaf: grad array}``.  The graph is consumed unless ``retain_graph``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    # collect reachable recorded tensors
    seen, stack, recorded, leaves = set(), [loss], [], {}
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is None:
            if t.requires_grad:
                leaves[id(t)] = t
            continue
        if t._node.consumed:
            raise ContractError("graph already consumed; pass retain_graph=True to reuse it")
        recorded.append(t)
        stack.extend(p for p in t._node.inputs if p.requires_grad)
    recorded.sort(key=lambda t: t._node.seq, reverse=True)

    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in recorded:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        for parent, pg in zip(node.inputs, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        if not retain_graph:
            node.consumed = True

    result = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.dtype)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result
