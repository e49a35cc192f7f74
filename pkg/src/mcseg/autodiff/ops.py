"""Differentiable operations on :class:`~mcseg.autodiff.tensor.Tensor`.

Image tensors are NCHW.  Every function returns a fresh tensor and, when grad
recording is on and an input requires grad, attaches a backward rule.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, Tensor, as_tensor, is_debug

UPSAMPLE_FACTORS = (2, 4, 8)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def neg(a):
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        k = b
        return Tensor._from_op(a.data * np.asarray(k, a.dtype), (a,), lambda g: (g * np.asarray(k, g.dtype),), "scale")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def reciprocal(a):
    out = 1.0 / a.data
    return Tensor._from_op(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def square(a):
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def abs(a):  # noqa: A001 - mirrors numpy naming
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a):
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    if is_debug() and np.any(a.data <= 0):
        raise ContractError("log of non-positive value")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# -- reductions ---------------------------------------------------------------


def sum(a, axis=None):  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis), 1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# -- activations --------------------------------------------------------------


def relu(a):
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a):
    """log(sigmoid(x)) computed without overflow."""
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    s_neg = _sigmoid(-x)  # = 1 - sigmoid(x) without cancellation
    return Tensor._from_op(out, (a,), lambda g: (g * s_neg,), "log_sigmoid")


def softmax_channel(a):
    if a.ndim < 3:
        raise ContractError(f"softmax_channel needs >=3 dims, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(p, (a,), backward, "softmax_channel")


def log_softmax_channel(a):
    if a.ndim < 3:
        raise ContractError(f"log_softmax_channel needs >=3 dims, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, (a,), backward, "log_softmax_channel")


def activation(a, kind):
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "softmax_channel": softmax_channel}[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(a)


# -- spatial ops --------------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation of NCHW ``x`` with ``weight`` [Cout, Cin, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ContractError(f"conv2d channel mismatch: input has Cin={cin}, weight expects Cin={wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d kernel must be odd, got kh={kh}, kw={kw}")
    if bias is not None and bias.shape != (cout,):
        raise ContractError(f"conv2d bias shape {bias.shape} does not match Cout={cout}")
    span_h, span_w = h + 2 * pad - kh, w + 2 * pad - kw
    if span_h < 0 or span_w < 0 or stride < 1:
        raise ContractError(
            f"conv2d kernel {kh}x{kw} does not fit input H={h}, W={w} with pad={pad}, stride={stride}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, : stride * ho : stride, : stride * wo : stride].reshape(n, cin, ho * wo)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : stride * ho : stride, : stride * wo : stride]
        # (n, cin, ho, wo, kh, kw) -> (n, cin*kh*kw, ho*wo)
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, cin * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        gm = g.reshape(n, cout, ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def _interp_matrix(size, factor, dtype):
    """Linear map from ``size`` samples to ``size*factor`` (half-pixel centers)."""
    out = size * factor
    src = (np.arange(out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    m = np.zeros((out, size), dtype=np.float64)
    m[np.arange(out), lo] += 1.0 - frac
    m[np.arange(out), hi] += frac
    return m.astype(dtype)


def bilinear_upsample(x, factor):
    if factor not in UPSAMPLE_FACTORS:
        raise ContractError(f"upsample factor must be one of {UPSAMPLE_FACTORS}, got {factor}")
    if x.ndim != 4:
        raise ContractError(f"bilinear_upsample expects NCHW, got shape {x.shape}")
    _, _, h, w = x.shape
    mh = _interp_matrix(h, factor, x.dtype)
    mw = _interp_matrix(w, factor, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return Tensor._from_op(out, (x,), backward, "bilinear_upsample")


def concat_channels(a, b):
    if a.ndim != b.ndim or a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
        raise ContractError(f"concat_channels needs matching non-channel dims, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor._from_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


def combine(a, b, kind):
    if kind == "concat_channels":
        return concat_channels(a, b)
    if kind not in ("add", "mul"):
        raise ContractError(f"unknown combine kind {kind!r}")
    if a.shape != b.shape:
        raise ContractError(f"combine({kind}) needs identical shapes, got {a.shape} and {b.shape}")
    return add(a, b) if kind == "add" else mul(a, b)
