"""Differentiable ops on :class:`Tensor`.

Layout convention for sequence ops is channels-last: ``(batch, time, channels)``.
Every op returns a fresh tensor and registers a backward closure returning one
gradient (or ``None``) per parent.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make

# ---------------------------------------------------------------------------
# Frozen-value tape.
#
# Ops whose backward rule deliberately differs from the derivative of their
# forward pass (stop_gradient, straight_through, the quantizer argmin, dropout
# masks) route their non-differentiable values through ``_frozen``. In record
# mode the values are stored in call order; in replay mode the stored values are
# returned instead of being recomputed. The gradient checker replays a tape so
# that finite differences see exactly the function the backward pass
# differentiates.
# ---------------------------------------------------------------------------


class FrozenTape:
    def __init__(self) -> None:
        self.values: list = []
        self.kinds: list[str] = []
        self.replaying = False
        self._cursor = 0

    def rewind(self) -> None:
        self.replaying = True
        self._cursor = 0

    def take(self, kind: str, compute):
        if not self.replaying:
            value = compute()
            self.values.append(value)
            self.kinds.append(kind)
            return value
        if self._cursor >= len(self.values) or self.kinds[self._cursor] != kind:
            raise RuntimeError("frozen tape replay diverged from the recorded call order")
        value = self.values[self._cursor]
        self._cursor += 1
        return value


_TAPE: FrozenTape | None = None


@contextlib.contextmanager
def frozen_tape(tape: FrozenTape) -> Iterator[FrozenTape]:
    global _TAPE
    old = _TAPE
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = old


def _frozen(kind: str, compute):
    if _TAPE is None:
        return compute()
    return _TAPE.take(kind, compute)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return make(a.data**exponent, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else tuple(np.argsort(axes))
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make(a.data[index], (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# Normalisation, softmax, losses
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make(out, (a,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over the last axis against integer class targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    n_classes = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError("cross_entropy target out of range")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    losses = -picked
    count = max(losses.size, 1)

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        if reduction == "mean":
            return (p * (g / count),)
        if reduction == "sum":
            return (p * g,)
        return (p * g[..., None],)

    if reduction == "mean":
        value = np.asarray(losses.mean() if losses.size else 0.0, dtype=logits.dtype)
    elif reduction == "sum":
        value = np.asarray(losses.sum(), dtype=logits.dtype)
    elif reduction == "none":
        value = losses
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return make(value, (logits,), backward, "cross_entropy")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    return make(out.astype(x.dtype, copy=False), parents, backward, "layer_norm")


def mse(a: Tensor, b) -> Tensor:
    diff = sub(a, b)
    return mean(mul(diff, diff))


def l1(a: Tensor, b) -> Tensor:
    return mean(abs(sub(a, b)))


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return make(table.data[idx], (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# Gradient routing
# ---------------------------------------------------------------------------


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; contributes no gradient to ``a``."""
    data = _frozen("stop_gradient", lambda: a.data.copy())
    return Tensor(data, op="stop_gradient")


def straight_through(x: Tensor, quantized: Tensor) -> Tensor:
    """Forward value of ``quantized``, gradient copied straight onto ``x``.

    Under a replaying frozen tape the output becomes ``x + (quantized - x)``
    with the offset taken from the recorded call, whose derivative is exactly
    the straight-through rule.
    """
    offset = _frozen("straight_through", lambda: quantized.data - x.data)
    data = quantized.data.copy() if _TAPE is None or not _TAPE.replaying else x.data + offset
    return make(data, (x,), lambda g: (g,), "straight_through")


def frozen_indices(compute) -> np.ndarray:
    """Non-differentiable integer selection (argmin/argmax) routed through the tape."""
    return _frozen("indices", compute)


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    keep = 1.0 - p
    mask = _frozen("dropout", lambda: (rng.random(a.shape) < keep).astype(a.dtype) / keep)
    return make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# Temporal convolutions, channels-last
# ---------------------------------------------------------------------------


def _resolve_padding(padding, k: int) -> tuple[int, int]:
    if padding == "valid" or padding is None:
        return 0, 0
    if padding == "same":
        total = k - 1
        return total // 2, total - total // 2
    if isinstance(padding, int):
        return padding, padding
    left, right = padding
    return int(left), int(right)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """1-D convolution over time.

    x: (B, T, Cin); weight: (k, Cin, Cout); bias: (Cout,).
    Output length is ``(T + left + right - k) // stride + 1``.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError(f"conv1d expects (B,T,C) input and (k,Cin,Cout) kernel, got {x.shape} and {weight.shape}")
    k, cin, cout = weight.shape
    if x.shape[2] != cin:
        raise ValueError(f"conv1d channel mismatch: input has {x.shape[2]}, kernel expects {cin}")
    if stride < 1:
        raise ValueError("stride must be positive")
    left, right = _resolve_padding(padding, k)
    B, T, _ = x.shape
    tp = T + left + right
    if tp < k:
        raise ValueError(f"conv1d input too short: padded length {tp} < kernel {k}")
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0))) if left or right else x.data
    t_out = (tp - k) // stride + 1
    windows = sliding_window_view(xp, k, axis=1)[:, : stride * (t_out - 1) + 1 : stride]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(B * t_out, k * cin)
    w2 = weight.data.reshape(k * cin, cout)
    out = (cols @ w2).reshape(B, t_out, cout)
    if bias is not None:
        out = out + bias.data
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        g2 = g.reshape(B * t_out, cout)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, t_out, k, cin)
            gxp = np.zeros((B, tp, cin), dtype=x.dtype)
            span = stride * (t_out - 1) + 1
            for j in range(k):
                gxp[:, j : j + span : stride] += gcols[:, :, j]
            gx = gxp[:, left : left + T]
        gw = (cols.T @ g2).reshape(k, cin, cout) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make(out, parents, backward, "conv1d")


def zero_insert(x: Tensor, factor: int) -> Tensor:
    """Insert ``factor - 1`` zeros between consecutive time steps."""
    B, T, C = x.shape
    out = np.zeros((B, (T - 1) * factor + 1, C), dtype=x.dtype)
    out[:, ::factor] = x.data
    return make(out, (x,), lambda g: (g[:, ::factor].copy(),), "zero_insert")


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution as zero-insertion upsampling followed by conv1d.

    Output length is ``(T - 1) * stride - 2 * padding + k``.
    """
    k = weight.shape[0]
    if padding > k - 1:
        raise ValueError("conv_transpose1d padding must be < kernel size")
    up = zero_insert(x, stride) if stride > 1 else x
    return conv1d(up, weight, bias, stride=1, padding=k - 1 - padding)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every time step ``factor`` times."""
    B, T, C = x.shape

    def backward(g):
        return (g.reshape(B, T, factor, C).sum(axis=2),)

    return make(np.repeat(x.data, factor, axis=1), (x,), backward, "upsample_nearest")


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``softmax((q k^T + mask) / sqrt(c)) v`` with an additive mask.

    ``c`` is the key width (last axis of ``q``). The mask is added before the
    joint scaling; it broadcasts over leading (batch, head) axes.
    """
    c = q.shape[-1]
    logits = matmul(q, swapaxes(k, -1, -2))
    if mask is not None:
        logits = add(logits, Tensor(np.asarray(mask, dtype=q.dtype)))
    weights = softmax(mul(logits, 1.0 / math.sqrt(c)), axis=-1)
    weights = dropout(weights, dropout_p, training, rng)
    return matmul(weights, v)
