"""Minimal reverse-mode automatic differentiation over float32 numpy arrays.

The engine is define-by-run: every operation on :class:`Tensor` records a node
(the tensor itself) holding references to its parents and a backward closure.
Calling ``backward()`` on a scalar walks the recorded graph once, in reverse
topological order, accumulating gradients into every tensor that requires
them. Graphs are rebuilt on every forward pass, which is what lets the
statistics-mixing layer change topology per step (its activation coin flip).

All values are float32. Detaching (``stop_gradient``) removes the edge from
the graph entirely, so blocked gradients are exactly zero, not merely small.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_f32(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype != np.float32:
        a = a.astype(np.float32)
    return a


class Tensor:
    """A float32 array plus an optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # Own the buffer: incoming g may alias a child's grad or a view.
        t.grad = np.array(g, dtype=np.float32)
    else:
        t.grad += g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(np.float32, copy=False)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def square(a) -> Tensor:
    a = _wrap(a)
    out_data = a.data * a.data

    def backward(g):
        _accumulate(a, (2.0 * g * a.data).astype(np.float32, copy=False))

    return _node(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, (g * (0.5 / out_data)).astype(np.float32, copy=False))

    return _node(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (out_data > 0.0))

    return _node(out_data, (a,), backward)


def stop_gradient(a) -> Tensor:
    """Forward identity whose backward contribution is exactly zero.

    The returned tensor has no parents, so the blocked branch is absent from
    the graph rather than carrying a zeroed edge.
    """
    return _wrap(a).detach()


# -- reductions and shape movement ---------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).astype(np.float32, copy=False))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).astype(np.float32, copy=False))

    return _node(np.asarray(out_data, dtype=np.float32), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    inv = np.float32(1.0 / count)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g * inv, a.data.shape).astype(np.float32, copy=False))
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg * inv, a.data.shape).astype(np.float32, copy=False))

    return _node(np.asarray(out_data, dtype=np.float32), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(out_data, (a,), backward)


def take_rows(a, indices) -> Tensor:
    """Gather rows of a matrix by index; backward scatter-adds."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    return _node(out_data, (a,), backward)


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(out_data, (a, b), backward)


def linear(x, weight, bias) -> Tensor:
    """Affine map of a (B, D) batch: x @ weight + bias, weight (D, K), bias (K,)."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(
            f"linear expects (B,D), (D,K), (K,), got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {weight.shape} + {bias.shape}")
    return add(matmul(x, weight), bias)


# -- convolution and pooling ------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b, c * kh * kw, oh * ow)


def _col2im(gcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    b, c, _, _ = xp_shape
    g = gcols.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros(xp_shape, dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g[:, :, i, j]
    return out


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-D cross-correlation.

    x: (B, Cin, H, W); weight: (Cout, Cin, kh, kw); bias: (Cout,).
    Output spatial dims follow floor((H + 2*padding - kh) / stride) + 1.
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d padding must be >= 0, got {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input/kernel, got {x.shape}, {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_k, kh, kw = weight.shape
    if cin != cin_k:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has {cin} channels, kernel {weight.shape} expects {cin_k}"
        )
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d kernel {weight.shape} too large for input {x.shape} (padding={padding})")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)  # (B, K, P)
    wmat = weight.data.reshape(cout, -1)  # (Cout, K)
    out = np.matmul(wmat, cols)  # (B, Cout, P)
    out += bias.data[:, None]
    out_data = out.reshape(b, cout, oh, ow)

    def backward(g):
        g2 = g.reshape(b, cout, oh * ow)
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=(0, 2)))
        if weight.requires_grad:
            gflat = np.ascontiguousarray(g2.transpose(1, 0, 2)).reshape(cout, -1)
            cflat = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(cols.shape[1], -1)
            _accumulate(weight, (gflat @ cflat.T).reshape(weight.data.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)  # (B, K, P)
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, oh, ow)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, np.ascontiguousarray(gxp))

    return _node(out_data, (x, weight, bias), backward)


def avg_pool2d(x, window: int) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide the window."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects rank-4 input, got {x.shape}")
    b, c, h, w = x.shape
    if window < 1 or h % window or w % window:
        raise ShapeError(f"avg_pool2d window {window} does not tile input {x.shape}")
    oh, ow = h // window, w // window
    view = x.data.reshape(b, c, oh, window, ow, window)
    out_data = view.mean(axis=(3, 5), dtype=np.float32)
    inv = np.float32(1.0 / (window * window))

    def backward(g):
        gx = np.empty_like(x.data)
        gview = gx.reshape(b, c, oh, window, ow, window)
        gview[...] = (g * inv)[:, :, :, None, :, None]
        _accumulate(x, gx)

    return _node(out_data, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Spatial mean per channel: (B, C, H, W) -> (B, C)."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects rank-4 input, got {x.shape}")
    return tmean(x, axis=(2, 3))


# -- classification loss ----------------------------------------------------------


def softmax_cross_entropy(logits, targets) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy of integer targets, with the softmax probabilities.

    Numerically stabilized by max-subtraction. The probability matrix is
    returned as a plain array (detached) for pseudo-labeling and metrics.
    """
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, K) logits, got {logits.shape}")
    b, k = logits.shape
    if k < 2:
        raise ShapeError(f"softmax_cross_entropy requires K >= 2 classes, got K={k}")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (b,):
        raise ShapeError(f"targets shape {t.shape} != ({b},)")
    if t.min() < 0 or t.max() >= k:
        raise ShapeError(f"targets out of range [0, {k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    log_probs = z - np.log(denom)
    loss_val = np.float32(-log_probs[np.arange(b), t].mean(dtype=np.float32))

    def backward(g):
        if logits.requires_grad:
            grad = probs.copy()
            grad[np.arange(b), t] -= 1.0
            grad *= np.float32(g) / np.float32(b)
            _accumulate(logits, grad.astype(np.float32, copy=False))

    return _node(np.asarray(loss_val), (logits,), backward), probs


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis of a plain array."""
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)
