"""A small reverse-mode automatic differentiation engine on top of numpy.

Operations executed inside a :class:`Tape` context are appended to the tape
in execution order, which is already a topological order of the graph;
:meth:`Tape.backward` walks the records in reverse and accumulates gradients
into every tensor created with ``requires_grad=True``.

Outside a tape, ops evaluate eagerly and record nothing.

Recurrent cells, graph convolution and temporal convolution are fused ops
with hand-written backward passes; everything else composes elementwise
primitives.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import (
    IndexOutOfRange,
    NonFiniteError,
    ShapeMismatch,
    UnnormalizedAdjacency,
)

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "add",
    "mul",
    "matmul",
    "relu",
    "sigmoid",
    "tanh",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "concat",
    "dropout",
    "linear",
    "graph_conv",
    "temporal_conv",
    "gru_step",
    "lstm_step",
    "gru_layer",
    "lstm_layer",
    "softmax",
    "softmax_cross_entropy",
    "gradcheck",
]

_local = threading.local()

# Set to False to skip the finiteness check after each forward op.
CHECK_FINITE = True


def current_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __array_priority__ = 100
    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        value = np.array(value, dtype=np.float64)
        value.setflags(write=False)
        self.value = value
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, value: np.ndarray, requires_grad: bool) -> "Tensor":
        # op outputs are fresh arrays, no defensive copy needed
        out = cls.__new__(cls)
        value = np.asarray(value, dtype=np.float64)
        value.setflags(write=False)
        out.value = value
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(tensor(other)))

    def __rsub__(self, other):
        return add(tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records ops in execution order; exclusive to one forward/backward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, loss: Tensor, grad=None) -> None:
        if grad is None:
            if loss.size != 1:
                raise ShapeMismatch("backward without an explicit gradient needs a scalar")
            grad = np.ones_like(loss.value)
        loss.grad = np.asarray(grad, dtype=np.float64)
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    raise ShapeMismatch(f"gradient shape {g.shape} for input of shape {inp.shape}")
                inp.grad = g if inp.grad is None else inp.grad + g


def _record(value: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, track)
    if track:
        tape.records.append((out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        value = a.value + b.value
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} and {b.shape}") from None
    return _record(value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a) -> Tensor:
    a = tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    try:
        value = a.value * b.value
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} and {b.shape}") from None
    return _record(value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape),
                              _unbroadcast(g * a.value, b.shape)), "mul")


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = tensor(a)
    s = _sigmoid(a.value)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = tensor(a)
    t = np.tanh(a.value)
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


# -- shape ------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from None
    return _record(value, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = tensor(a)
    value = a.value[index]

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(value, (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeMismatch(str(err)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(value, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = tensor(a)
    value = a.value.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(value), (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum(a, axis) / count


# -- linear algebra -----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for arrays with at least two dimensions (leading dims broadcast)."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    try:
        value = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _record(value, (a, b), backward, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any number of leading dims)."""
    x, w = tensor(x), tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear of {x.shape} with weight {w.shape}")
    lead = x.shape[:-1]
    flat = x.value.reshape(-1, x.shape[-1])
    value = (flat @ w.value).reshape(lead + (w.shape[1],))
    inputs = [x, w]
    if b is not None:
        b = tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeMismatch(f"bias {b.shape} for weight {w.shape}")
        value = value + b.value
        inputs.append(b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.value.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _record(value, inputs, backward, "linear")


def _node_mix(adj: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``out[..., n, f] = sum_m adj[n, m] * x[..., m, f]`` as one GEMM."""
    xt = np.moveaxis(x, -2, 0)
    shape = xt.shape
    out = adj @ xt.reshape(shape[0], -1)
    return np.moveaxis(out.reshape((adj.shape[0],) + shape[1:]), 0, -2)


def graph_conv(x, a_norm, w, atol: float = 1e-9) -> Tensor:
    """Spatial graph convolution ``a_norm @ x @ w`` over the node axis (-2).

    ``x`` is ``(..., N, Fin)``, ``a_norm`` row-normalized ``(N, N)``,
    ``w`` is ``(Fin, Fout)``.
    """
    x, a_norm, w = tensor(x), tensor(a_norm), tensor(w)
    if x.ndim < 2 or a_norm.shape != (x.shape[-2], x.shape[-2]) or w.ndim != 2 \
            or w.shape[0] != x.shape[-1]:
        raise ShapeMismatch(f"graph_conv of x {x.shape}, adjacency {a_norm.shape}, weight {w.shape}")
    rows = a_norm.value.sum(axis=1)
    if not np.allclose(rows, 1.0, rtol=0.0, atol=atol):
        raise UnnormalizedAdjacency(f"adjacency row sums deviate from 1 by up to "
                                    f"{np.abs(rows - 1).max():.3g}")
    ax = _node_mix(a_norm.value, x.value)
    lead = ax.shape[:-1]
    ax_flat = ax.reshape(-1, w.shape[0])
    value = (ax_flat @ w.value).reshape(lead + (w.shape[1],))

    def backward(g):
        g_flat = g.reshape(-1, g.shape[-1])
        gw = ax_flat.T @ g_flat if w.requires_grad else None
        gax = (g_flat @ w.value.T).reshape(ax.shape)
        gx = _node_mix(a_norm.value.T, gax) if x.requires_grad else None
        ga = None
        if a_norm.requires_grad:
            # dA[n, m] = sum over leading dims and features of gax[..., n, f] * x[..., m, f]
            gn = np.moveaxis(gax, -2, 0).reshape(ax.shape[-2], -1)
            xn = np.moveaxis(x.value, -2, 0).reshape(x.shape[-2], -1)
            ga = gn @ xn.T
        return gx, ga, gw

    return _record(value, (x, a_norm, w), backward, "graph_conv")


def conv_length(frames: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (frames + 2 * padding - kernel) // stride + 1


def temporal_conv(x, kernel, stride: int = 1, padding: int = 0, axis: int = -2) -> Tensor:
    """Per-feature (depthwise) 1-D convolution along ``axis``.

    ``x`` has features on its last axis; ``kernel`` is ``(K,)`` or ``(K, F)``
    (one tap column per feature). Zero padding; the output length is
    ``(T + 2 * padding - K) // stride + 1``.
    """
    x, kernel = tensor(x), tensor(kernel)
    if x.ndim < 2:
        raise ShapeMismatch("temporal_conv needs at least (T, F)")
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        raise ShapeMismatch("the time axis cannot be the feature axis")
    feats = x.shape[-1]
    k = kernel.shape[0]
    if kernel.ndim == 1:
        kv = kernel.value[:, None]
    elif kernel.ndim == 2 and kernel.shape[1] in (1, feats):
        kv = kernel.value
    else:
        raise ShapeMismatch(f"kernel {kernel.shape} for {feats} features")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    kv = np.broadcast_to(kv, (k, feats))
    frames = x.shape[axis]
    out_len = conv_length(frames, k, stride, padding)
    if out_len < 1:
        raise ShapeMismatch(f"kernel {k} longer than padded length {frames + 2 * padding}")

    # Work with time on axis 1 and features last: (lead, T, rest..., F).
    xm = np.moveaxis(x.value, axis, 0)[None] if axis == 0 else x.value
    t_axis = 1 if axis == 0 else axis
    span = stride * (out_len - 1) + 1

    def padded(arr, before, after):
        widths = [(0, 0)] * arr.ndim
        widths[t_axis] = (before, after)
        return np.pad(arr, widths) if before or after else arr

    def windows(arr):
        # (..., T_out, ..., F, K) views of K consecutive frames
        w = np.lib.stride_tricks.sliding_window_view(arr, k, axis=t_axis)
        idx = [slice(None)] * w.ndim
        idx[t_axis] = slice(0, span, stride) if stride > 1 else slice(None)
        return w[tuple(idx)]

    xp = padded(xm, padding, padding)
    value = np.einsum("...fk,kf->...f", windows(xp), kv)
    if axis == 0:
        value = np.moveaxis(value[0], 0, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, 0)[None] if axis == 0 else g
        gx = None
        if x.requires_grad:
            # transpose conv: dilate by the stride, full-correlate with the flipped kernel
            if stride > 1:
                shape = list(gm.shape)
                shape[t_axis] = span
                gd = np.zeros(shape)
                idx = [slice(None)] * gm.ndim
                idx[t_axis] = slice(None, None, stride)
                gd[tuple(idx)] = gm
            else:
                gd = gm
            full = np.einsum("...fk,kf->...f", windows_full(gd), kv[::-1])
            total = xp.shape[t_axis]
            full = padded(full, 0, total - full.shape[t_axis])
            idx = [slice(None)] * full.ndim
            idx[t_axis] = slice(padding, padding + frames)
            gx = full[tuple(idx)]
            if axis == 0:
                gx = np.moveaxis(gx[0], 0, axis)
        gk = None
        if kernel.requires_grad:
            lead = "".join(chr(ord("a") + i) for i in range(gm.ndim - 1))
            gk = np.einsum(f"{lead}fk,{lead}f->kf", windows(xp), gm)
            if kernel.ndim == 1:
                gk = gk.sum(axis=1)
            elif kernel.shape[1] == 1:
                gk = gk.sum(axis=1, keepdims=True)
        return gx, gk

    def windows_full(arr):
        arr = padded(arr, k - 1, k - 1)
        return np.lib.stride_tricks.sliding_window_view(arr, k, axis=t_axis)

    return _record(value, (x, kernel), backward, "temporal_conv")


# -- recurrent cells ------------------------------------------------------------------
#
# GRU (gate order r, z, n), with gx = x @ w_ih + b_ih precomputed:
#   r = sigmoid(gx_r + h @ w_hr + b_hr)
#   z = sigmoid(gx_z + h @ w_hz + b_hz)
#   n = tanh(gx_n + r * (h @ w_hn + b_hn))
#   h' = (1 - z) * n + z * h
#
# LSTM (gate order i, f, g, o), gx as above:
#   gates = gx + h @ w_hh + b_hh
#   c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
#   h' = sigmoid(o) * tanh(c')


def _gru_fwd(gx, h, w_hh, b_hh):
    hs = h.shape[-1]
    gh = h @ w_hh + b_hh
    r = _sigmoid(gx[:, :hs] + gh[:, :hs])
    z = _sigmoid(gx[:, hs:2 * hs] + gh[:, hs:2 * hs])
    ghn = gh[:, 2 * hs:]
    n = np.tanh(gx[:, 2 * hs:] + r * ghn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (h, r, z, n, ghn)


def _gru_bwd(dh_new, cache, w_hh):
    h, r, z, n, ghn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    da_n = dn * (1.0 - n * n)
    da_r = da_n * ghn * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    dgx = np.concatenate([da_r, da_z, da_n], axis=1)
    dgh = np.concatenate([da_r, da_z, da_n * r], axis=1)
    dh = dh + dgh @ w_hh.T
    dw_hh = h.T @ dgh
    db_hh = dgh.sum(axis=0)
    return dgx, dh, dw_hh, db_hh


def _lstm_fwd(gx, h, c, w_hh, b_hh):
    hs = h.shape[-1]
    a = gx + h @ w_hh + b_hh
    i = _sigmoid(a[:, :hs])
    f = _sigmoid(a[:, hs:2 * hs])
    g = np.tanh(a[:, 2 * hs:3 * hs])
    o = _sigmoid(a[:, 3 * hs:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (h, c, i, f, g, o, tc)


def _lstm_bwd(dh_new, dc_new, cache, w_hh):
    h, c, i, f, g, o, tc = cache
    do = dh_new * tc
    dc = dc_new + dh_new * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c
    dg = dc * i
    da = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                         dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1)
    dh = da @ w_hh.T
    dc_prev = dc * f
    return da, dh, dc_prev, h.T @ da, da.sum(axis=0)


def _check_rnn(x, h, w_ih, w_hh, b_ih, b_hh, gates: int):
    hs = h.shape[-1]
    ok = (h.ndim == 2 and w_ih.shape == (x.shape[-1], gates * hs)
          and w_hh.shape == (hs, gates * hs) and b_ih.shape == (gates * hs,)
          and b_hh.shape == (gates * hs,) and x.shape[0] == h.shape[0])
    if not ok:
        raise ShapeMismatch(
            f"recurrent cell with x {x.shape}, h {h.shape}, w_ih {w_ih.shape}, "
            f"w_hh {w_hh.shape}, b_ih {b_ih.shape}, b_hh {b_hh.shape}")


def gru_step(x_t, h_prev, params) -> Tensor:
    """One GRU update. ``params`` maps w_ih (I, 3H), w_hh (H, 3H), b_ih, b_hh (3H)."""
    x_t, h_prev = tensor(x_t), tensor(h_prev)
    w_ih, w_hh, b_ih, b_hh = (tensor(params[k]) for k in ("w_ih", "w_hh", "b_ih", "b_hh"))
    if x_t.ndim != 2:
        raise ShapeMismatch(f"x_t must be (B, I), got {x_t.shape}")
    _check_rnn(x_t, h_prev, w_ih, w_hh, b_ih, b_hh, 3)
    gx = linear(x_t, w_ih, b_ih)
    h_new, cache = _gru_fwd(gx.value, h_prev.value, w_hh.value, b_hh.value)

    def backward(g):
        dgx, dh, dw, db = _gru_bwd(g, cache, w_hh.value)
        return dgx, dh, dw, db

    return _record(h_new, (gx, h_prev, w_hh, b_hh), backward, "gru_step")


def lstm_step(x_t, state, params):
    """One LSTM update; ``state`` is ``(h, c)``; returns ``(h', c')``."""
    x_t = tensor(x_t)
    h_prev, c_prev = (tensor(s) for s in state)
    w_ih, w_hh, b_ih, b_hh = (tensor(params[k]) for k in ("w_ih", "w_hh", "b_ih", "b_hh"))
    if x_t.ndim != 2 or c_prev.shape != h_prev.shape:
        raise ShapeMismatch(f"lstm_step with x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape}")
    _check_rnn(x_t, h_prev, w_ih, w_hh, b_ih, b_hh, 4)
    gx = linear(x_t, w_ih, b_ih)
    h_new, c_new, cache = _lstm_fwd(gx.value, h_prev.value, c_prev.value, w_hh.value, b_hh.value)
    packed = np.concatenate([h_new, c_new], axis=1)
    hs = h_new.shape[1]

    def backward(g):
        da, dh, dc, dw, db = _lstm_bwd(g[:, :hs], g[:, hs:], cache, w_hh.value)
        return da, dh, dc, dw, db

    both = _record(packed, (gx, h_prev, c_prev, w_hh, b_hh), backward, "lstm_step")
    return both[:, :hs], both[:, hs:]


def _rnn_layer(x, h0, params, cell: str) -> Tensor:
    x = tensor(x)
    gates = 3 if cell == "gru" else 4
    w_ih, w_hh, b_ih, b_hh = (tensor(params[k]) for k in ("w_ih", "w_hh", "b_ih", "b_hh"))
    if x.ndim != 3:
        raise ShapeMismatch(f"sequence input must be (B, T, I), got {x.shape}")
    batch, steps, _ = x.shape
    hs = w_hh.shape[0]
    h0 = tensor(np.zeros((batch, hs)) if h0 is None else h0)
    _check_rnn(x.value[:, 0], h0, w_ih, w_hh, b_ih, b_hh, gates)
    gx_all = linear(x, w_ih, b_ih)  # (B, T, G*H)
    gxv = gx_all.value
    out = np.empty((batch, steps, hs))
    caches = []
    h = h0.value
    c = np.zeros_like(h)
    for t in range(steps):
        if cell == "gru":
            h, cache = _gru_fwd(gxv[:, t], h, w_hh.value, b_hh.value)
        else:
            h, c, cache = _lstm_fwd(gxv[:, t], h, c, w_hh.value, b_hh.value)
        caches.append(cache)
        out[:, t] = h

    def backward(g):
        dgx = np.empty_like(gxv)
        dw = np.zeros_like(w_hh.value)
        db = np.zeros_like(b_hh.value)
        dh = np.zeros((batch, hs))
        dc = np.zeros((batch, hs))
        for t in range(steps - 1, -1, -1):
            dh = dh + g[:, t]
            if cell == "gru":
                dgx[:, t], dh, dw_t, db_t = _gru_bwd(dh, caches[t], w_hh.value)
            else:
                dgx[:, t], dh, dc, dw_t, db_t = _lstm_bwd(dh, dc, caches[t], w_hh.value)
            dw += dw_t
            db += db_t
        return dgx, dh, dw, db

    return _record(out, (gx_all, h0, w_hh, b_hh), backward, f"{cell}_layer")


def gru_layer(x, params, h0=None) -> Tensor:
    """Run a GRU over ``x`` of shape (B, T, I); returns all hidden states (B, T, H)."""
    return _rnn_layer(x, h0, params, "gru")


def lstm_layer(x, params, h0=None) -> Tensor:
    """Run an LSTM over ``x`` of shape (B, T, I) from zero cell state; returns (B, T, H)."""
    return _rnn_layer(x, h0, params, "lstm")


# -- regularization and losses -----------------------------------------------------------


def dropout(x, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = tensor(x)
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.value * mask, (x,), lambda g: (g * mask,), "dropout")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets, class_weights=None):
    """Weighted mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    With ``class_weights`` w, the loss is ``sum_i w[y_i] * nll_i / sum_i w[y_i]``.
    Returns ``(loss, probabilities)``.
    """
    logits = tensor(logits)
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be (B, K), got {logits.shape}")
    batch, k = logits.shape
    y = np.asarray(targets)
    if y.shape != (batch,):
        raise ShapeMismatch(f"{y.shape[0] if y.ndim else 0} targets for {batch} rows")
    if not np.issubdtype(y.dtype, np.integer):
        raise IndexOutOfRange("targets must be integer class indices")
    if (y < 0).any() or (y >= k).any():
        raise IndexOutOfRange(f"target outside [0, {k})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(batch), y]
    probs = np.exp(z - lse[:, None])
    w = np.ones(batch) if class_weights is None else np.asarray(class_weights, float)[y]
    total = w.sum()
    loss = float((w * nll).sum() / total)

    def backward(g):
        grad = probs.copy()
        grad[np.arange(batch), y] -= 1.0
        return (grad * (w / total)[:, None] * g,)

    return _record(np.asarray(loss), (logits,), backward, "softmax_cross_entropy"), probs


# -- gradient checking --------------------------------------------------------------------


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Max elementwise relative error between reverse-mode and central-difference gradients.

    The error per element is ``|g - g_num| / max(1e-8, |g| + |g_num|)``.
    ``f`` must return a scalar tensor.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
    if out.size != 1:
        raise ShapeMismatch("gradcheck needs a scalar-valued function")
    tape.backward(out)
    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f(*(Tensor(x) for x in arrays)).item()
            flat[j] = orig - eps
            fm = f(*(Tensor(x) for x in arrays)).item()
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            g = analytic.reshape(-1)[j]
            err = abs(g - num) / max(1e-8, abs(g) + abs(num))
            worst = max(worst, err)
    return worst
