"""Reverse-mode automatic differentiation over dense real arrays.

Every operation that sees a tracked input records its parents and a local
gradient closure on the output tensor. Tensors are numbered in creation
order, so walking the reachable set of a loss in descending creation order
is exactly a reverse pass over the recording tape: each node is visited
once, after every node that consumed it.

Values are stored as float32 by default (float64 is available for
verification work, e.g. finite-difference checks). Reductions use numpy's
sequential kernels, so repeated runs on identical inputs are bit-identical.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "square",
    "sqrt",
    "tanh",
    "scale",
    "matmul",
    "conv2d",
    "relu",
    "reshape",
    "add_bias",
    "tensor_sum",
    "tensor_mean",
    "amax",
    "softmax_cross_entropy",
    "backward",
    "sample_sphere",
    "sample_sphere_batch",
]

DIV_GUARD = 1e-12

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable recording inside the block (pure inference, no tape growth)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense real array that can participate in the gradient graph.

    ``requires_grad=True`` marks a leaf whose gradient ``backward`` should
    report. Derived tensors keep references to their parents and a closure
    mapping the output gradient to per-parent gradients.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 parents: tuple = (), backward_fn=None):
        arr = _as_array(data, dtype)
        if arr.size == 0:
            raise ValueError("tensors must have positive dimension sizes")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def numpy(self) -> np.ndarray:
        """Copy of the values, detached from the graph."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # arithmetic sugar; scalars are folded into constant-parameter ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap_const(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap_const(other, self), self)

    def __neg__(self):
        return neg(self)

    def abs(self):
        return absolute(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


def _wrap_const(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Create the op output, recording parents only when gradients can flow."""
    if _grad_enabled and any(p.tracked for p in parents):
        return Tensor(data, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data)


def _check_binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                     "(only equal shapes or a scalar operand are supported)")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a broadcast gradient back onto a scalar-shaped operand."""
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape).astype(grad.dtype)


# ---------------------------------------------------------------------------
# elementwise operations


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + np.asarray(c, a.dtype), (a,), lambda g: (g,))
    _check_binary_shapes(a, b, "add")
    a_shape, b_shape = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a_shape), _reduce_to(g, b_shape)))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data - np.asarray(c, a.dtype), (a,), lambda g: (g,))
    _check_binary_shapes(a, b, "sub")
    a_shape, b_shape = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a_shape), _reduce_to(-g, b_shape)))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_binary_shapes(a, b, "mul")
    a_data, b_data = a.data, b.data
    return _make(a_data * b_data, (a, b),
                 lambda g: (_reduce_to(g * b_data, a_data.shape),
                            _reduce_to(g * a_data, b_data.shape)))


def div(a: Tensor, b, stabilizer: float | None = None) -> Tensor:
    """Elementwise quotient.

    Denominator entries with magnitude below 1e-12 are an error unless the
    caller passes ``stabilizer``, which is added to the denominator before
    dividing (the caller owns the resulting bias).
    """
    if not isinstance(b, Tensor):
        c = float(b)
        if stabilizer is not None:
            c += stabilizer
        if abs(c) < DIV_GUARD:
            raise ZeroDivisionError(f"division by near-zero constant {c!r}")
        return scale(a, 1.0 / c)
    _check_binary_shapes(a, b, "div")
    if stabilizer is not None:
        denom = b.data + np.asarray(stabilizer, b.dtype)
    else:
        if np.any(np.abs(b.data) < DIV_GUARD):
            raise ZeroDivisionError(
                "division by near-zero denominator; pass stabilizer= to accept")
        denom = b.data
    a_data = a.data
    out = a_data / denom
    return _make(out, (a, b),
                 lambda g: (_reduce_to(g / denom, a_data.shape),
                            _reduce_to(-g * a_data / (denom * denom), b.data.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * np.asarray(c, a.dtype), (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 is 0 (sign(0) == 0), fixed for determinism
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    a_data = a.data
    return _make(a_data * a_data, (a,), lambda g: (g * (2.0 * a_data),))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative values")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0), (a,),
                 lambda g: (np.where(mask, g, 0),))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data
    return _make(a_data @ b_data, (a, b),
                 lambda g: (g @ b_data.T, a_data.T @ g))


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Valid cross-correlation of a BxCxHxW batch with an FxCxKhxKw kernel, stride 1."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    batch, cin, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != cin:
        raise ValueError(f"conv2d: channel mismatch input={cin} kernel={kc}")
    if kh > h or kw > w:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    x_data, k_data = x.data, kernel.data
    windows = sliding_window_view(x_data, (kh, kw), axis=(2, 3))
    out = np.einsum("bcxyuv,fcuv->bfxy", windows, k_data)
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        dk = np.einsum("bfxy,bcxyuv->fcuv", g, windows)
        pad = ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1))
        g_pad = np.pad(g, pad)
        g_windows = sliding_window_view(g_pad, (kh, kw), axis=(2, 3))
        k_flip = k_data[:, :, ::-1, ::-1]
        dx = np.einsum("bfxyuv,fcuv->bcxy", g_windows, k_flip)
        return np.ascontiguousarray(dx), np.ascontiguousarray(dk)

    return _make(out, (x, kernel), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(old),))


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-d bias along one axis of ``x`` (the broadcast layers need)."""
    if b.data.ndim != 1:
        raise ValueError("bias must be 1-d")
    ax = axis % x.data.ndim
    if x.shape[ax] != b.shape[0]:
        raise ValueError(f"bias length {b.shape[0]} does not match axis {ax} "
                         f"of {x.shape}")
    bshape = [1] * x.data.ndim
    bshape[ax] = b.shape[0]
    other_axes = tuple(i for i in range(x.data.ndim) if i != ax)
    return _make(x.data + b.data.reshape(bshape), (x, b),
                 lambda g: (g, g.sum(axis=other_axes)))


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    a_shape, a_dtype = a.shape, a.dtype
    out = np.sum(a.data, axis=axis)

    def backward_fn(g):
        if axis is None:
            return (np.full(a_shape, g, dtype=a_dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a_shape).copy(),)

    return _make(np.asarray(out, a_dtype), (a,), backward_fn)


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis), 1.0 / n)


def amax(a: Tensor, axis=None) -> Tensor:
    """Maximum along an axis; ties route the gradient to the first maximum."""
    a_data = a.data
    if axis is None:
        idx = np.unravel_index(np.argmax(a_data), a_data.shape)
        out = np.asarray(a_data[idx], a.dtype)

        def backward_fn(g):
            da = np.zeros_like(a_data)
            da[idx] = g
            return (da,)
    else:
        arg = np.argmax(a_data, axis=axis)
        out = np.take_along_axis(a_data, np.expand_dims(arg, axis), axis)
        out = np.squeeze(out, axis=axis)

        def backward_fn(g):
            da = np.zeros_like(a_data)
            np.put_along_axis(da, np.expand_dims(arg, axis),
                              np.expand_dims(g, axis), axis)
            return (da,)

    return _make(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# classification loss


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class over the batch.

    Stabilized by per-row max subtraction; the backward pass is
    (softmax - one_hot) / batch.
    """
    if logits.data.ndim != 2:
        raise ValueError("logits must be [batch, classes]")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError("labels must be one class index per batch row")
    batch, classes = logits.shape
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"label out of range [0, {classes})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(batch), labels].mean()
    probs = np.exp(log_probs)

    def backward_fn(g):
        d = probs.copy()
        d[np.arange(batch), labels] -= 1.0
        return ((g / batch) * d,)

    return _make(np.asarray(loss, logits.dtype), (logits,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> dict:
    """Gradients of a scalar loss for every reachable requires_grad tensor.

    Walks the reachable graph in reverse creation order (the tape order),
    visiting each node exactly once. Pure: repeated calls return identical
    values and never mutate the graph.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        return {}

    reachable = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen.add(t.node_id)
        reachable.append(t)
        stack.extend(t._parents)
    reachable.sort(key=lambda t: t.node_id, reverse=True)

    grads = {loss.node_id: np.ones_like(loss.data)}
    results: dict[Tensor, np.ndarray] = {}
    for t in reachable:
        g = grads.pop(t.node_id, None)
        if g is None:
            continue
        if g.shape != t.shape:
            raise AssertionError(
                f"gradient shape {g.shape} does not match tensor shape {t.shape}")
        if t.requires_grad:
            results[t] = g
        if t._backward_fn is None:
            continue
        parent_grads = t._backward_fn(g)
        for parent, pg in zip(t._parents, parent_grads):
            if pg is None or not parent.tracked:
                continue
            acc = grads.get(parent.node_id)
            grads[parent.node_id] = pg if acc is None else acc + pg
    return results


# ---------------------------------------------------------------------------
# sphere sampling


def sample_sphere(center, radius: float, rng: np.random.Generator) -> Tensor:
    """Uniform point on the L2 sphere of ``radius`` around ``center``.

    Direction is a normalized Gaussian draw; a (probability ~0) zero-norm
    draw is redrawn. The result is detached from the graph.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    c = center.data if isinstance(center, Tensor) else _as_array(center)
    direction = rng.standard_normal(c.shape)
    norm = np.linalg.norm(direction)
    while norm < 1e-12:
        direction = rng.standard_normal(c.shape)
        norm = np.linalg.norm(direction)
    point = c.astype(np.float64) + (radius / norm) * direction
    return Tensor(point.astype(c.dtype))


def sample_sphere_batch(centers: np.ndarray, radius: float,
                        rng: np.random.Generator) -> np.ndarray:
    """One sphere sample per leading-axis row of ``centers`` (vectorized)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    c = np.asarray(centers)
    flat_axes = tuple(range(1, c.ndim))
    direction = rng.standard_normal(c.shape)
    norms = np.sqrt((direction ** 2).sum(axis=flat_axes, keepdims=True))
    while np.any(norms < 1e-12):
        bad = (norms < 1e-12).reshape(-1)
        redraw = rng.standard_normal(c.shape)
        direction[bad] = redraw[bad]
        norms = np.sqrt((direction ** 2).sum(axis=flat_axes, keepdims=True))
    points = c.astype(np.float64) + (radius / norms) * direction
    return points.astype(c.dtype)
