"""Differentiable operations on :class:`~guidedconv.tensor.Tensor`.

Convolutions use the NCHW layout and an im2col formulation so each layer is
a single batched matrix product.  Kernel-offset loops always run in row-major
order, which fixes the summation order and keeps results bit-reproducible.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    a = as_tensor(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, sa) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, sb) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), grad_fn)


def square(x):
    def grad_fn(g):
        return (2.0 * x.data * g,)

    return make_result(x.data * x.data, (x,), grad_fn)


def relu(x):
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return (np.where(out > 0, g, 0),)

    return make_result(out, (x,), grad_fn)


def sum(x):
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), grad_fn)


def mean(x):
    shape, n = x.shape, x.size

    def grad_fn(g):
        return (np.full(shape, g / n, dtype=g.dtype),)

    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), grad_fn)


def reshape(x, shape):
    old = x.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return make_result(x.data.reshape(shape), (x,), grad_fn)


def concat(tensors, axis=1):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


# -- convolution machinery ---------------------------------------------------

def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def im2col(xp, k, stride, out_h, out_w):
    """Gather K x K patches of a padded (N, C, Hp, Wp) array.

    Returns (N, C*K*K, out_h*out_w) with the row index ordered (c, i, j).
    """
    n, c = xp.shape[:2]
    if k == 1:
        return np.ascontiguousarray(xp[:, :, ::stride, ::stride][:, :, :out_h, :out_w]).reshape(n, c, out_h * out_w)
    cols = np.empty((n, c, k, k, out_h, out_w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
    return cols.reshape(n, c * k * k, out_h * out_w)


def col2im(cols, padded_shape, k, stride, out_h, out_w):
    """Scatter-add patches back onto a zero (N, C, Hp, Wp) canvas; adjoint of im2col."""
    n, c = padded_shape[:2]
    cols = cols.reshape(n, c, k, k, out_h, out_w)
    canvas = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            canvas[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += cols[:, :, i, j]
    return canvas


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _check_conv_args(x, weight, in_axis, stride, what):
    if x.ndim != 4:
        raise ValueError(f"{what}: input must be 4-D (N, C, H, W), got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"{what}: weight must be 4-D with square kernel, got shape {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ValueError(
            f"{what}: input shape {x.shape} has {x.shape[1]} channels but weight shape "
            f"{weight.shape} expects {weight.shape[in_axis]}")
    if int(stride) < 1:
        raise ValueError(f"{what}: stride must be a positive integer, got {stride}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Standard 2-D convolution (cross-correlation), weight (C_out, C_in, K, K)."""
    _check_conv_args(x, weight, 1, stride, "conv2d")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    n, _, h, w = x.shape
    c_out = weight.shape[0]
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: input shape {x.shape} too small for weight shape {weight.shape}")
    xp = _pad(x.data, padding)
    cols = im2col(xp, k, stride, oh, ow)
    w2 = weight.data.reshape(c_out, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1)
    out = out.reshape(n, c_out, oh, ow)
    parents = (x, weight) if bias is None else (x, weight, bias)
    xp_shape = xp.shape

    def grad_fn(g):
        g2 = g.reshape(n, c_out, oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            gxp = col2im(gcols, xp_shape, k, stride, oh, ow)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, grad_fn)


def deconv_output_size(size, k, stride, padding, output_padding=0):
    return (size - 1) * stride - 2 * padding + k + output_padding


def deconv2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution, weight (C_in, C_out, K, K).

    The exact adjoint of :func:`conv2d` with the same weight array, stride and
    padding; ``output_padding`` appends rows/columns so that K=3, stride 2,
    padding 1, output_padding 1 doubles the spatial size.
    """
    _check_conv_args(x, weight, 0, stride, "deconv2d")
    if not 0 <= output_padding < stride:
        raise ValueError("deconv2d: output_padding must be smaller than stride")
    k = weight.shape[2]
    n, c_in, h, w = x.shape
    c_out = weight.shape[1]
    oh = deconv_output_size(h, k, stride, padding, output_padding)
    ow = deconv_output_size(w, k, stride, padding, output_padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"deconv2d: input shape {x.shape} too small for weight shape {weight.shape}")
    canvas_shape = (n, c_out, oh + 2 * padding, ow + 2 * padding)
    w2 = weight.data.reshape(c_in, -1)
    xf = x.data.reshape(n, c_in, h * w)
    cols = np.matmul(w2.T, xf)
    canvas = np.zeros(canvas_shape, dtype=cols.dtype)
    cols6 = cols.reshape(n, c_out, k, k, h, w)
    for i in range(k):
        for j in range(k):
            canvas[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += cols6[:, :, i, j]
    out = canvas[:, :, padding:padding + oh, padding:padding + ow]
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gp = _pad(g, padding)
        gcols = im2col(gp, k, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(xf, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, grad_fn)


# -- normalization, pooling, dense -------------------------------------------

BN_EPS = 1e-5


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, training=True,
               momentum=0.1, eps=BN_EPS):
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics (plain numpy arrays) are updated
    in place by exponential moving average.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm: input must be 4-D, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m == 0:
        raise ValueError("batch_norm: empty batch*spatial extent")
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu.reshape(1, c, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
        xc = xd - mu.reshape(1, c, 1, 1)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def grad_fn(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                s1 = gxhat.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (gxhat * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                gx = (gxhat - s1 - xhat * s2) * inv_std.reshape(1, c, 1, 1)
            else:
                gx = gxhat * inv_std.reshape(1, c, 1, 1)
        return gx, gg, gbeta

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), grad_fn)


def avg_pool_global(x):
    """Per-channel spatial mean: (N, C, H, W) -> (N, C, 1, 1)."""
    if x.ndim != 4:
        raise ValueError(f"avg_pool_global: input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    hw = h * w

    def grad_fn(g):
        return (np.broadcast_to(g / hw, x.shape).astype(g.dtype, copy=True),)

    return make_result(x.data.mean(axis=(2, 3), keepdims=True), (x,), grad_fn)


def fully_connected(x, weight, bias=None):
    """Affine map of the flattened input: (N, F) @ weight.T + bias, weight (O, F)."""
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    if weight.ndim != 2 or flat.shape[1] != weight.shape[1]:
        raise ValueError(
            f"fully_connected: input shape {x.shape} flattens to {flat.shape[1]} features "
            f"but weight shape {weight.shape} expects {weight.shape[-1]}")
    out = flat @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gx = (g @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g.T @ flat if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, parents, grad_fn)
