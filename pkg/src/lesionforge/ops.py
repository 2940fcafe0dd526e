"""Differentiable operations over :class:`~lesionforge.tensor.Tensor`.

Every op is pure: it reads ``.data`` of its inputs and returns a new tensor.
The only exception is :func:`batch_norm` in training mode, which updates the
running-statistics arrays it is handed.

Layouts follow the usual conventions: images are NCHW, conv kernels are
``(out, in, kh, kw)``, transposed-conv kernels are ``(in, out, kh, kw)`` and
dense weights are ``(in_features, out_features)``.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor

BCE_EPS = 1e-7


def _const(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def backward(g):
        return (np.full(shape, g / n, dtype=g.dtype),)

    return Tensor._from_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return Tensor._from_op(x.data.reshape(tuple(shape)), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default, as used by U-Net skips)."""
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        index = [builtins.slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = builtins.slice(int(lo), int(hi))
            out.append(g[tuple(index)])
        return out

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply an NCHW tensor by a per-(sample, channel) NC gate."""
    if gate.shape != x.shape[:2]:
        raise ValueError(f"gate shape {gate.shape} does not match {x.shape[:2]}")
    return mul(x, reshape(gate, gate.shape + (1, 1)))


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> (C, kh, kw, N, ho, wo)
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _col2im(cols: np.ndarray, out_shape: tuple, stride: int) -> np.ndarray:
    # adjoint of _im2col: (C, kh, kw, N, ho, wo) -> (N, C, Hp, Wp)
    c, kh, kw, n, ho, wo = cols.shape
    out = np.zeros((out_shape[1], out_shape[0]) + tuple(out_shape[2:]), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an ``(out, in, kh, kw)`` kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and 4-D kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride {stride} / padding {padding}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output size would be {ho}x{wo}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} does not match {o} output channels")

    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(c * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    xp_shape = xp.shape

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        dx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            dx = _col2im(dcols, xp_shape, stride)
            if padding:
                dx = dx[:, :, padding:-padding, padding:-padding]
            dx = np.ascontiguousarray(dx)
        dk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dk, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, backward)


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Transposed convolution; the adjoint of :func:`conv2d` with the same kernel.

    ``kernel`` is ``(in, out, kh, kw)``; output spatial size is ``(H-1)*stride + k``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"transposed_conv2d expects NCHW input and 4-D kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ValueError(f"invalid stride {stride}")
    n, c, h, w = x.shape
    ci, o, kh, kw = kernel.shape
    if c != ci:
        raise ValueError(f"transposed_conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} does not match {o} output channels")
    ho, wo = (h - 1) * stride + kh, (w - 1) * stride + kw

    x2 = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    wmat = kernel.data.reshape(c, -1)
    cols = (wmat.T @ x2).reshape(o, kh, kw, n, h, w)
    out = _col2im(cols, (n, o, ho, wo), stride)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gcols = _im2col(g, kh, kw, stride, h, w).reshape(o * kh * kw, -1)
        dx = None
        if x.requires_grad:
            dx = np.ascontiguousarray((wmat @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        dk = (x2 @ gcols.T).reshape(kernel.shape) if kernel.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dk, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, backward)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution with a ``(C, 1, kh, kw)`` kernel (groups == channels)."""
    n, c, h, w = x.shape
    if kernel.shape[0] != c or kernel.shape[1] != 1:
        raise ValueError(f"depthwise kernel {kernel.shape} does not match {c} channels")
    kh, kw = kernel.shape[2:]
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"depthwise_conv2d output size would be {ho}x{wo}")
    xp = _pad(x.data, padding)
    k = kernel.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * k[None, :, i, j, None, None]

    def backward(g):
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dk = np.zeros_like(kernel.data)
        for i in range(kh):
            for j in range(kw):
                window = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                dk[:, 0, i, j] = np.einsum("nchw,nchw->c", g, window)
                if dxp is not None:
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * k[None, :, i, j, None, None]
        dx = None
        if dxp is not None:
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            dx = np.ascontiguousarray(dx)
        return dx, dk

    return Tensor._from_op(out, (x, kernel), backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max pooling without padding; ties route the gradient to the first cell in row-major order."""
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"pool window {window} exceeds spatial extent {h}x{w}")
    ho, wo = _out_size(h, window, stride, 0), _out_size(w, window, stride, 0)
    slices = [
        x.data[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        for i in range(window)
        for j in range(window)
    ]
    stacked = np.stack(slices, axis=-1)
    arg = stacked.argmax(axis=-1)
    out = np.take_along_axis(stacked, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        for idx in range(window * window):
            i, j = divmod(idx, window)
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(arg == idx, g, 0)
        return (dx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W: NCHW -> NC."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"global_avg_pool expects non-empty NCHW, got {x.shape}")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,), backward)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over NCHW (or NC) input.

    In training mode the batch mean/variance normalise the input and the
    running arrays are updated in place as
    ``running = (1 - momentum) * running + momentum * batch`` (variance
    unbiased). In inference mode the running statistics are used instead.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)
    # keep the result strictly inside (0, 1) where float rounding would hit an endpoint
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(x.data * mask, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1 - s),)

    return Tensor._from_op(s, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * (s + x.data * s * (1 - s)),)

    return Tensor._from_op(x.data * s, (x,), backward)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "silu": silu}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


# ---------------------------------------------------------------------------
# dense / dropout
# ---------------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape (N, F) and ``weight`` (F, K)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense dimension mismatch: {x.shape} @ {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        dx = g @ weight.data.T
        dw = x.data.T @ g
        db = g.sum(axis=0) if bias is not None else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` so inference is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng stream")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)

    def backward(g):
        return (g * keep,)

    return Tensor._from_op(x.data * keep, (x,), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def bce_loss(pred: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to ``[eps, 1 - eps]``.

    The gradient is evaluated at the clamped prediction and passed through the
    clamp, so saturated outputs still receive a corrective signal.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ValueError(f"bce_loss shape mismatch: pred {pred.shape} vs target {t.shape}")
    t = t.astype(pred.dtype, copy=False)
    p = np.clip(pred.data, eps, 1.0 - eps)
    n = p.size
    loss = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()

    def backward(g):
        return (g * (p - t) / (p * (1 - p)) / n,)

    return Tensor._from_op(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


def l2_penalty(params: Sequence[Tensor], lam: float) -> Tensor:
    """``lam * sum(w**2)`` over the given weight tensors."""
    if lam < 0:
        raise ValueError("l2 lambda must be non-negative")
    params = tuple(params)
    if not params:
        return Tensor(0.0)
    dtype = params[0].dtype
    total = np.asarray(lam * np.sum([np.sum(np.square(p.data)) for p in params]), dtype=dtype)

    def backward(g):
        return tuple(g * (2.0 * lam) * p.data for p in params)

    return Tensor._from_op(total, params, backward)
