"""Differentiable ops over :class:`Tensor`.

Each op computes its forward value with numpy and hands a closure computing
input gradients to :func:`make_result`.  Scalars and arrays passed where a
tensor is expected are wrapped as constants with the other operand's dtype.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor, make_result


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(op: str, sa: tuple, sb: tuple) -> tuple:
    """Result shape under the one-directional, trailing-aligned rule."""
    try:
        shape = np.broadcast_shapes(sa, sb)
    except ValueError:
        shape = None
    if shape is None or (shape != tuple(sa) and shape != tuple(sb)):
        raise ShapeError(f"{op}: cannot broadcast shapes {sa} and {sb}")
    return shape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a.shape, b.shape)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a.shape, b.shape)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a.shape, b.shape)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("div", out, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return make_result("neg", -x.data, (x,), lambda g: (-g,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.data)
    return make_result("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    return make_result("square", x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result("sqrt", out, (x,), lambda g: (g / (2 * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def silu(x: Tensor) -> Tensor:
    sig = expit(x.data)
    out = x.data * sig

    def bw(g):
        return (g * (sig * (1 + x.data * (1 - sig))),)

    return make_result("silu", out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


# -- reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result("mean", np.asarray(out, dtype=x.dtype), (x,), bw)


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference over all elements."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    out = np.asarray(np.abs(diff).mean(), dtype=a.dtype)
    sign = np.sign(diff) / diff.size

    def bw(g):
        return g * sign, -g * sign

    return make_result("l1_loss", out, (a, b), bw)


def mse_loss(a: Tensor, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean(), dtype=a.dtype)

    def bw(g):
        gd = g * 2 * diff / diff.size
        return gd, -gd

    return make_result("mse_loss", out, (a, b), bw)


# -- shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return make_result("transpose", out, (x,), lambda g: (g.transpose(inv),))


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(x.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result("concat", out, tuple(xs), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)

    return make_result("upsample2x", out, (x,), bw)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across a's leading axes) or has exactly the
    same leading axes as ``a``.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_result("matmul", out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` with ``w`` stored as (in, out)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Patches of x (N, C, H, W) as rows (N*Ho*Wo, kh*kw*C), channel fastest.

    Works in channels-last layout so every slice copy moves whole rows.
    """
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def _col2im(gcols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    gxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=gcols.dtype)
    g6 = gcols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g6[:, :, :, i, j, :]
    return gxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, weights (out, in, kh, kw), zero padding."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {w.shape} do not conform")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    n = x.shape[0]
    o, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(-1, o)
    flat = cols @ wmat
    inputs = (x, w)
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {o} output channels")
        flat += b.data
        inputs = (x, w, b)
    out = np.ascontiguousarray(flat.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(kh, kw, -1, o).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            gx = _col2im(g2 @ wmat.T, x.shape, kh, kw, stride, padding, ho, wo)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result("conv2d", out, inputs, bw)


# -- normalisation / attention primitives ---------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result("softmax", out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (x,), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray, axis: int = 1) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` along ``axis``."""
    labels = np.asarray(labels)
    moved = np.moveaxis(logits.data, axis, -1)
    if moved.shape[:-1] != labels.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = moved - moved.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    idx = labels[..., None].astype(np.int64)
    picked = np.take_along_axis(logp, idx, axis=-1)
    count = labels.size
    out = np.asarray(-picked.mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, idx, 1.0, axis=-1)
        return (np.moveaxis(g * (p - onehot) / count, -1, axis),)

    return make_result("cross_entropy", out, (logits,), bw)


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation of x (N, C, ...) with per-channel affine (C,)."""
    n, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {weight.shape}/{bias.shape} for {c} channels")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * weight.data.reshape(bshape) + bias.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = (g * weight.data.reshape(bshape)).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=-1, keepdims=True))
            gx = gx.reshape(x.shape)
        gw = (g * xhat).sum(axis=red) if weight.requires_grad else None
        gb = g.sum(axis=red) if bias.requires_grad else None
        return gx, gw, gb

    return make_result("group_norm", out, (x, weight, bias), bw)
