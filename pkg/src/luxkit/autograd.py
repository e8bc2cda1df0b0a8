"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the denoiser and the condition embedders need. Every op
works in the dtype of its inputs, so the same graph runs in float32 for
training and float64 for finite-difference checks. Images are channels-last.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor({self.name or ''} shape={self.shape}, dtype={self.data.dtype})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate gradients of this (scalar) tensor into every leaf."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data) if grad is None else grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    node.grad = None  # free interior buffers

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(as_tensor(o, self.data.dtype)))

    def __rsub__(self, o):
        return add(as_tensor(o, self.data.dtype), neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 else axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.data.dtype)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(-g)

    return Tensor(-a.data, _parents=(a,), _backward=bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.data.dtype)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, _parents=(a, b), _backward=bw)


def silu(a: Tensor) -> Tensor:
    e = np.exp(-np.abs(a.data))  # stable sigmoid, no overflow
    s = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = a.data * s

    def bw(g):
        a._accum(g * (s * (1.0 + a.data * (1.0 - s))))

    return Tensor(out, _parents=(a,), _backward=bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(2.0 * g * a.data)

    return Tensor(a.data * a.data, _parents=(a,), _backward=bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        a._accum(np.broadcast_to(g / n, a.shape))

    return Tensor(a.data.mean(dtype=np.float64).astype(a.data.dtype), _parents=(a,), _backward=bw)


# --------------------------------------------------------------------------
# shape
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        a._accum(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=bw)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        a._accum(g.transpose(inv))

    return Tensor(a.data.transpose(axes), _parents=(a,), _backward=bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    def bw(g):
        a._accum(_unbroadcast(g, a.shape))

    return Tensor(np.broadcast_to(a.data, shape), _parents=(a,), _backward=bw)


def concat(ts: list, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(part)

    return Tensor(np.concatenate([t.data for t in ts], axis=axis), _parents=tuple(ts), _backward=bw)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor(a.data @ b.data, _parents=(a, b), _backward=bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return Tensor(s, _parents=(a,), _backward=bw)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the last two axes."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), scale)
    return matmul(softmax(logits, -1), v)


# --------------------------------------------------------------------------
# convolution and resampling (NHWC)
# --------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """``x``: (N, H, W, Cin); ``w``: (k, k, Cin, Cout); zero 'same' padding of k//2."""
    k = w.shape[0]
    pad = k // 2
    n, h, wd, cin = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]  # (N, Ho, Wo, Cin, k, k)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * cin)
    wmat = w.data.reshape(k * k * cin, -1)
    out = (cols @ wmat).reshape(n, ho, wo, -1)
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(n * ho * wo, -1)
        if w.requires_grad:
            w._accum((cols.T @ g2).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, cin)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
            x._accum(dxp[:, pad:pad + h, pad:pad + wd])

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, _parents=parents, _backward=bw)


def avgpool2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g):
        up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        x._accum(up.astype(x.data.dtype))

    return Tensor(out.astype(x.data.dtype), _parents=(x,), _backward=bw)


def upsample2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        x._accum(g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))

    return Tensor(out, _parents=(x,), _backward=bw)
