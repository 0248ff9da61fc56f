"""Reverse-mode differentiation over a dynamically recorded tape.

Operations executed inside an active :class:`Tape` whose inputs require
gradients are appended to that tape together with a closure mapping the
output gradient to input gradients. ``Tape.backward`` replays the records in
reverse. Outside a tape (or with constant inputs) operations are plain numpy.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100.0
    __array_ufunc__ = None  # let ndarray operands defer to the reflected Tensor methods

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Context manager recording differentiable operations.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)
    >>> w.grad
    array([4.])
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, out, parents, backward):
        self.records.append((out, parents, backward))

    def backward(self, loss: Tensor, grad=None):
        if not self.records:
            raise RuntimeError("backward called before any differentiable forward computation")
        if loss.data.size != 1 and grad is None:
            raise ValueError("backward needs a scalar loss or an explicit output gradient")
        loss.grad = np.ones_like(loss.data) if grad is None else np.array(grad, dtype=DTYPE)
        for out, parents, fn in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for p, pg in zip(parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                _accumulate(p, pg)
            if out is not loss:
                # Intermediate gradients are not needed after propagation.
                out.grad = None
        self.records.clear()


def _accumulate(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE)
    else:
        t.grad += g


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        tape.record(out, tuple(parents), backward)
        return out
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# Elementwise binary.

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, m]``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if bd.ndim != 2:
        raise ValueError("matmul expects a 2-d right operand")

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


# Elementwise unary.

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a, slope=0.01) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,))


# Reductions and shape manipulation.

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if _needs_add_at(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), backward)


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def unstack(a, axis=0) -> list[Tensor]:
    """Split along ``axis``; slice gradients accumulate into one shared buffer."""
    a = as_tensor(a)
    data = np.moveaxis(a.data, axis, 0)
    tape = _active_tape()
    if tape is None or not a.requires_grad:
        return [Tensor(d) for d in data]
    # The hub is recorded before the slices, so it is replayed after all of them.
    hub = Tensor(np.empty(0), requires_grad=True)
    tape.record(hub, (a,), lambda g: (np.moveaxis(g, 0, axis),))

    def slot(i):
        def backward(g):
            if hub.grad is None:
                hub.grad = np.zeros(data.shape, dtype=DTYPE)
            hub.grad[i] += g
            return (None,)
        return backward

    outs = []
    for i, d in enumerate(data):
        out = Tensor(d, requires_grad=True)
        outs.append(out)
        tape.record(out, (hub,), slot(i))
    return outs


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def pick(a, index) -> Tensor:
    """``a[..., index[...]]``: select one entry of the last axis per position."""
    a = as_tensor(a)
    index = np.asarray(index)
    idx = index[..., None]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _make(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), backward)


def permute_time(a, perm) -> Tensor:
    """Reorder axis 0 independently per column: ``out[t, b] = a[perm[t, b], b]``.

    ``perm[:, b]`` must be a permutation of ``range(T)``.
    """
    a = as_tensor(a)
    perm = np.asarray(perm)
    cols = np.arange(perm.shape[1])[None, :]
    inv = np.empty_like(perm)
    inv[perm, cols] = np.arange(perm.shape[0])[:, None]
    return _make(a.data[perm, cols], (a,), lambda g: (g[inv, cols],))


# Convolution.

def conv1d(x, w) -> Tensor:
    """Valid cross-correlation. ``x``: (N, C_in, L), ``w``: (C_out, C_in, K)."""
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    n, cin, length = xd.shape
    cout, cin_w, k = wd.shape
    if cin != cin_w:
        raise ValueError(f"conv1d channel mismatch: input {cin}, kernel {cin_w}")
    lout = length - k + 1
    if lout < 1:
        raise ValueError(f"conv1d kernel {k} longer than input {length}")
    windows = np.lib.stride_tricks.sliding_window_view(xd, k, axis=2)  # (N, C, Lout, K)
    out = np.einsum("nclk,ock->nol", windows, wd, optimize=True)

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.einsum("nol,nclk->ock", g, windows, optimize=True)
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for j in range(k):
                gx[:, :, j:j + lout] += np.einsum("nol,oc->ncl", g, wd[:, :, j], optimize=True)
        return gx, gw

    return _make(out, (x, w), backward)


def maxpool1d(x, size: int) -> Tensor:
    """Non-overlapping max pooling over the last axis; a trailing remainder is dropped."""
    x = as_tensor(x)
    xd = x.data
    n, c, length = xd.shape
    lout = length // size
    if lout < 1:
        raise ValueError(f"pool size {size} longer than input {length}")
    blocks = xd[:, :, :lout * size].reshape(n, c, lout, size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, lout, size), dtype=DTYPE)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(xd)
        gx[:, :, :lout * size] = gb.reshape(n, c, lout * size)
        return (gx,)

    return _make(out, (x,), backward)
