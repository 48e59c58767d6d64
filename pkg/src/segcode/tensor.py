"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node holding its inputs and a
closure that maps the output gradient to input gradients. ``backward``
linearises the graph reachable from a scalar loss into a tape (a
topologically ordered node list) and replays it in reverse.

Training runs in float32; gradient oracles switch to float64 with
:func:`default_dtype`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (e.g. ``np.float64``)."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if arr.ndim and min(arr.shape) < 1:
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    # -- autograd ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor needing it."""
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(tape(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

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
        return transpose(self, axes or None)


def tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of graph nodes feeding ``root``.

    Each node appears once and after all of its inputs.
    """
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    info = np.finfo(x.dtype)
    # keep the open interval (0, 1) even where the exact value rounds to an endpoint
    return np.clip(s, info.tiny, 1.0 - info.epsneg)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_array(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    ax = axis % ndim
    lead = [t.shape[:ax] + t.shape[ax + 1:] for t in tensors]
    if any(s != lead[0] for s in lead):
        raise DimensionError(
            f"concat along axis {axis}: other extents differ: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(out, tensors, backward)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """``a || b`` along the last axis; ``a`` occupies the leading entries."""
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"leading extents differ: {a.shape} vs {b.shape}")
    return concat([a, b], axis=-1)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if any(t.shape != tensors[0].shape for t in tensors):
        raise DimensionError(f"stack needs equal shapes: {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _node(out, tensors, backward)


# ---------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w + bias`` for x of shape (..., i), w (i, o), bias (o,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {w.shape}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} incompatible with weight shape {w.shape}")
    out = matmul(x, w)
    return out if bias is None else out + bias


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (b, c, h, w) input with (f, c, kh, kw) kernels."""
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    b, c, h, w = x.shape
    f, _, kh, kw = kernels.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (b, ho, wo, c, kh, kw) -> rows of patches
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    kmat = kernels.data.reshape(f, c * kh * kw)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, f)
        gk = (gm.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(b, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk, gb

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _node(np.ascontiguousarray(out), parents, backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling; trailing rows/cols are dropped."""
    b, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"max_pool2d: input {x.shape} smaller than window {size}")
    xc = x.data[:, :, :ho * size, :wo * size]
    blocks = xc.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg, g[..., None], axis=-1)
        gb = gb.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * size, wo * size)
        full = np.zeros_like(x.data)
        full[:, :, :ho * size, :wo * size] = gb
        return (full,)

    return _node(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(b, c, h, w) -> (b, c)."""
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------
# probability heads
# ---------------------------------------------------------------------

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward)


def cross_entropy(logits: Tensor, labels, class_weights: Tensor | None = None) -> Tensor:
    """Mean over the batch of ``weight[label] * -log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {b} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels must lie in [0, {c}), got {labels.tolist()}")
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros((b, c), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    if class_weights is not None:
        if class_weights.shape != (c,):
            raise DimensionError(f"class weights shape {class_weights.shape} != ({c},)")
        onehot = onehot * class_weights.data[labels][:, None]
    return -(logp * Tensor(onehot, dtype=logits.dtype)).sum() * (1.0 / b)


# ---------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------

class LSTMParams:
    """Weights of one LSTM direction; gate blocks are ordered input, forget, cell, output."""

    def __init__(self, w_ih: Tensor, w_hh: Tensor, bias: Tensor):
        units = w_hh.shape[0]
        if w_hh.shape != (units, 4 * units) or w_ih.shape[1] != 4 * units or bias.shape != (4 * units,):
            raise DimensionError(
                f"LSTM params inconsistent: w_ih {w_ih.shape}, w_hh {w_hh.shape}, bias {bias.shape}")
        self.w_ih, self.w_hh, self.bias = w_ih, w_hh, bias

    @property
    def units(self) -> int:
        return self.w_hh.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[0]


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LSTMParams) -> tuple[Tensor, Tensor]:
    u = params.units
    if x.shape[-1] != params.input_size or h_prev.shape[-1] != u or c_prev.shape != h_prev.shape:
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} do not fit "
            f"input size {params.input_size} / units {u}")
    z = matmul(x, params.w_ih) + matmul(h_prev, params.w_hh) + params.bias
    i = sigmoid(z[..., 0:u])
    f = sigmoid(z[..., u:2 * u])
    g = tanh(z[..., 2 * u:3 * u])
    o = sigmoid(z[..., 3 * u:4 * u])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


# ---------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], x: Tensor | Iterable[Tensor], eps: float = 1e-5,
               entries: int | None = None, rng: np.random.Generator | None = None,
               numeric_dtype=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument closure returning a scalar tensor that depends on
    the tensor(s) ``x``; the tensors must be float64. When ``entries`` is given,
    that many coordinates are sampled per tensor instead of checking all.

    ``numeric_dtype`` (e.g. ``np.longdouble``) evaluates only the finite
    differences in a wider type. The analytic side always stays float64. In
    float64 the difference quotient carries ~1e-11 absolute rounding noise,
    which swamps true gradients of magnitude below ~1e-7.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.size != 1:
        raise DimensionError("grad_check: f must return a scalar")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    ndt = np.dtype(numeric_dtype or np.float64)
    saved = [t.data for t in xs]
    h = ndt.type(eps)
    worst = 0.0
    try:
        with no_grad():
            for t in xs:
                t.data = t.data.astype(ndt)
            for t, an in zip(xs, analytic):
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if entries is not None and entries < flat.size:
                    idx = (rng or np.random.default_rng(0)).choice(flat.size, entries, replace=False)
                for j in idx:
                    orig = flat[j]
                    up, down = orig + h, orig - h
                    flat[j] = up
                    fp = np.asarray(f().data, dtype=ndt).reshape(-1)[0]
                    flat[j] = down
                    fm = np.asarray(f().data, dtype=ndt).reshape(-1)[0]
                    flat[j] = orig
                    # divide by the step actually taken, not the nominal 2*eps
                    num = float((fp - fm) / (up - down))
                    a = float(an.reshape(-1)[j])
                    err = abs(a - num) / max(1e-8, abs(a) + abs(num))
                    worst = max(worst, err)
    finally:
        for t, d in zip(xs, saved):
            t.data = d
    return worst
