"""Small dense-tensor engine with tape-based reverse-mode gradients.

Storage is a numpy array. Operations record themselves on the active
:class:`GradTape` whenever one of their inputs requires a gradient; with no
tape active nothing is recorded and tensors behave as immutable values.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SOFTPLUS_THRESHOLD = 20.0
LN_EPS = 1e-5

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward result contains NaN or Inf."""


class GradError(RuntimeError):
    """Misuse of the gradient machinery (non-scalar loss, detached graph, ...)."""


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of executed operations.

    Use as a context manager; :func:`backward` replays the record in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def record(self, node):
        if self.consumed:
            raise GradError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)

    def reset(self):
        self.nodes = []
        self.consumed = False


def active_tape():
    return getattr(_state, "tape", None)


@contextlib.contextmanager
def no_tape():
    """Run ops without recording, even inside an active tape."""
    prev = getattr(_state, "tape", None)
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = prev


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op, out, inputs: Sequence[Tensor], backward: Callable):
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: non-finite values in forward result")
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape()
    result = Tensor(out, requires_grad=needs and tape is not None)
    if result.requires_grad:
        tape.record(_Node(op, tuple(inputs), result, backward))
    return result


def backward(loss: Tensor, tape: GradTape):
    """Populate ``.grad`` of every ``requires_grad`` tensor upstream of ``loss``.

    Gradients add into existing ``.grad`` buffers.
    """
    if loss.data.size != 1:
        raise GradError(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise GradError("backward() already called on this tape")
    if not tape.nodes or not any(n.output is loss for n in reversed(tape.nodes)):
        raise GradError("loss was not produced on this tape (detached graph)")
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    seen = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = g if key not in grads else grads[key] + g
            seen[key] = t
    for key, t in seen.items():
        _accumulate(t, grads[key])


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = np.array(g) if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _finish("add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _finish("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def scale(x, c: float):
    out = x.data * x.data.dtype.type(c)
    return _finish("scale", out, (x,), lambda g: (g * c,))


def hadamard(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data
    return _finish("hadamard", out, (a, b), lambda g: (g * b.data, g * a.data))


def _softplus(x):
    # x + log1p(exp(-x)) above the threshold keeps exp() from overflowing
    big = x > SOFTPLUS_THRESHOLD
    safe = np.where(big, 0.0, x)
    return np.where(big, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(safe)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def mish(x):
    sp = _softplus(x.data)
    tsp = np.tanh(sp)
    out = (x.data * tsp).astype(x.dtype, copy=False)

    def bw(g):
        d = tsp + x.data * (1.0 - tsp * tsp) * _sigmoid(x.data)
        return (g * d,)

    return _finish("mish", out, (x,), bw)


def sigmoid(x):
    s = _sigmoid(x.data)
    return _finish("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def absolute(x):
    out = np.abs(x.data)
    return _finish("abs", out, (x,), lambda g: (g * np.sign(x.data),))


# ---------------------------------------------------------------- linear algebra

def linear(u, w, bias=None):
    """``out[..., g] = sum_f u[..., f] * w[f, g] (+ bias[g])``."""
    if u.shape[-1] != w.shape[0] or w.data.ndim != 2:
        raise ShapeError(f"linear: input {u.shape} incompatible with weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {w.shape}")
    u2 = u.data.reshape(-1, w.shape[0])
    out = u2 @ w.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(u.shape[:-1] + (w.shape[1],))
    inputs = (u, w) if bias is None else (u, w, bias)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gu = (g2 @ w.data.T).reshape(u.shape) if u.requires_grad else None
        gw = u2.T @ g2 if w.requires_grad else None
        if bias is None:
            return gu, gw
        return gu, gw, g2.sum(axis=0)

    return _finish("linear", out, inputs, bw)


def layer_norm(u, gain, offset, eps=LN_EPS):
    """Normalize over the last axis with biased variance, then scale and shift."""
    n = u.shape[-1]
    if gain.shape != (n,) or offset.shape != (n,):
        raise ShapeError(f"layer_norm: gain/offset must have shape ({n},)")
    mu = u.data.mean(axis=-1, keepdims=True)
    xc = u.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + offset.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = g * gain.data
        gu = rstd * (gg - gg.mean(axis=-1, keepdims=True)
                     - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return gu, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _finish("layer_norm", out, (u, gain, offset), bw)


# ---------------------------------------------------------------- layout

def reshape(x, shape):
    out = x.data.reshape(shape)
    return _finish("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose_axes(e):
    """Swap the last two axes of a rank-3 tensor."""
    if e.data.ndim != 3:
        raise ShapeError(f"transpose_axes expects rank 3, got {e.shape}")
    out = np.ascontiguousarray(e.data.transpose(0, 2, 1))
    return _finish("transpose_axes", out, (e,),
                   lambda g: (np.ascontiguousarray(g.transpose(0, 2, 1)),))


def time_shift(e):
    """Causal one-step shift along axis 1: zero at t=0, ``e[t-1]`` afterwards."""
    if e.data.ndim != 3:
        raise ShapeError(f"time_shift expects (B, T, F), got {e.shape}")
    out = np.zeros_like(e.data)
    out[:, 1:] = e.data[:, :-1]

    def bw(g):
        gi = np.zeros_like(g)
        gi[:, :-1] = g[:, 1:]
        return (gi,)

    return _finish("time_shift", out, (e,), bw)


def diff(x, axis):
    """Forward difference ``x[i+1] - x[i]`` along ``axis``."""
    axis = axis % x.data.ndim
    if x.shape[axis] < 2:
        raise ShapeError(f"diff needs at least 2 entries along axis {axis}")
    out = np.diff(x.data, axis=axis)

    def bw(g):
        pad = [(0, 0)] * g.ndim
        pad[axis] = (1, 0)
        lo = np.pad(g, pad)
        pad[axis] = (0, 1)
        return (lo - np.pad(g, pad),)

    return _finish("diff", out, (x,), bw)


# ---------------------------------------------------------------- image ops

def _im2col(xp, stride, ho, wo):
    # (N, C, Hp, Wp) -> (N, Ho, Wo, C*9)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    n, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * 9)


def conv2d(x, k, bias=None, stride=1):
    """3x3 cross-correlation with zero padding 1."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or k.data.ndim != 4 or k.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {k.shape}")
    n, cin, h, w = x.shape
    cout = k.shape[0]
    if k.shape[1] != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {k.shape[1]}")
    if h < 3 or w < 3:
        raise ShapeError(f"conv2d: spatial size {h}x{w} below kernel size")
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, ho, wo).reshape(-1, cin * 9)
    kmat = k.data.reshape(cout, cin * 9)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, k) if bias is None else (x, k, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, cin, 3, 3)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, 1:-1, 1:-1]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return _finish("conv2d", out, inputs, bw)


def nearest_upsample2x(x):
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _finish("nearest_upsample2x", out, (x,), bw)


# ---------------------------------------------------------------- reductions

def reduce(x, kind="mean"):
    """Reduce to a scalar: ``sum``, ``mean`` or ``abs_mean``.

    The ``abs_mean`` subgradient at 0 is 0.
    """
    n = x.data.size
    if n == 0:
        raise ShapeError("reduce of an empty tensor")
    if kind == "sum":
        out = x.data.sum()
        bw = lambda g: (np.broadcast_to(g, x.shape).copy(),)
    elif kind == "mean":
        out = x.data.mean()
        bw = lambda g: (np.full(x.shape, g / n, dtype=x.dtype),)
    elif kind == "abs_mean":
        out = np.abs(x.data).mean()
        bw = lambda g: (np.sign(x.data) * (g / n),)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _finish(f"reduce_{kind}", np.asarray(out, dtype=x.dtype), (x,), bw)


# ---------------------------------------------------------------- gradient checking

def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.data``.

    The step is scaled by ``|x| + 1`` per entry.
    """
    flat = param.data.reshape(-1)
    g = np.zeros(flat.shape, dtype=np.float64)
    with no_tape():
        for i in range(flat.size):
            orig = flat[i]
            h = step * (abs(orig) + 1.0)
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
    return g.reshape(param.shape)


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]):
    for p in params:
        p.grad = None
        p.requires_grad = True
    with GradTape() as tape:
        loss = fn()
    backward(loss, tape)
    return [np.zeros(p.shape) if p.grad is None else p.grad for p in params]


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], step=1e-5) -> float:
    """Worst relative error between analytic and finite-difference gradients."""
    analytic = analytic_grads(fn, params)
    return max(rel_error(ga, numeric_grad(fn, p, step)) for ga, p in zip(analytic, params))


def iter_ops() -> Iterator[str]:
    yield from ("add", "sub", "scale", "hadamard", "mish", "sigmoid", "abs", "linear",
                "layer_norm", "reshape", "transpose_axes", "time_shift", "diff",
                "conv2d", "nearest_upsample2x", "reduce")
