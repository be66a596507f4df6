"""Content-dependent, spatially-variant guided convolution.

The guided convolution filters a depth feature map ``S`` (N, M, H, W) with
kernels generated from an image feature map ``I`` of the same spatial size.
The full unfactorised operator needs one (M x N x K x K) kernel per pixel;
the factorised form splits it into

* a channel-wise stage: one K x K kernel per pixel and channel, produced by
  a convolution over ``I`` (:func:`generate_channelwise_kernels`), and
* a cross-channel stage: one M x N mixing matrix per image, produced by
  global average pooling of ``I`` followed by a fully-connected layer
  (:func:`generate_crosschannel_kernels`).

:func:`naive_guided_conv` evaluates the unfactorised operator directly and
serves as the reference for the factorisation and as the memory baseline.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Conv2d, Linear, Module
from .tensor import Tensor, as_tensor, make_result

ORACLE_CAP_ELEMS = 2 ** 26

_alloc_log = None


class KernelCapExceeded(ValueError):
    """The unfactorised kernel tensor would exceed the configured element cap."""


@contextlib.contextmanager
def track_kernel_allocations():
    """Record (kind, nbytes) for every kernel buffer created inside the block."""
    global _alloc_log
    prev, _alloc_log = _alloc_log, []
    try:
        yield _alloc_log
    finally:
        _alloc_log = prev


def _record(kind, arr):
    if _alloc_log is not None:
        _alloc_log.append((kind, int(arr.nbytes)))


def _kernel_size(k2):
    k = int(round(np.sqrt(k2)))
    if k * k != k2 or k % 2 == 0:
        raise ValueError(f"kernel axis of length {k2} is not an odd square")
    return k


@dataclass
class ChannelwiseKernels:
    """Per-pixel, per-channel K x K kernels, weights shape (N, M, K*K, H, W)."""

    weights: Tensor

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        if self.weights.ndim != 5:
            raise ValueError(f"channel-wise kernels must be 5-D (N, M, K*K, H, W), got {self.weights.shape}")
        _kernel_size(self.weights.shape[2])
        _record("channelwise", self.weights.data)

    @property
    def K(self):
        return _kernel_size(self.weights.shape[2])

    @property
    def shape(self):
        return self.weights.shape


@dataclass
class CrossChannelKernels:
    """Per-image M x N mixing matrices, weights shape (N_batch, M, N)."""

    weights: Tensor

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        if self.weights.ndim != 3:
            raise ValueError(f"cross-channel kernels must be 3-D (batch, M, N), got {self.weights.shape}")
        _record("crosschannel", self.weights.data)

    @property
    def shape(self):
        return self.weights.shape


@dataclass
class FullVariantKernels:
    """Unfactorised kernels, weights shape (batch, M, N, K*K, H, W); numpy only."""

    weights: np.ndarray
    cap: int = ORACLE_CAP_ELEMS

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 6:
            raise ValueError(f"full kernels must be 6-D (batch, M, N, K*K, H, W), got {w.shape}")
        check_oracle_cap(w.shape, w.dtype.itemsize, self.cap)
        _kernel_size(w.shape[3])
        self.weights = w
        _record("full", w)

    @property
    def K(self):
        return _kernel_size(self.weights.shape[3])


def check_oracle_cap(shape, itemsize=4, cap=ORACLE_CAP_ELEMS):
    elems = int(np.prod([int(s) for s in shape], dtype=object))
    if elems > cap:
        raise KernelCapExceeded(
            f"full kernel of shape {tuple(shape)} needs {elems} elements = {elems * itemsize} bytes, "
            f"over the cap of {cap} elements")
    return elems


# -- kernel generation -------------------------------------------------------

def generate_channelwise_kernels(image_feat, weight, bias, channels, k=3, target_hw=None):
    """Run the kernel-generating convolution and regroup its output per channel.

    ``weight`` has shape (channels*k*k, C_img, K_gen, K_gen); output channel
    ``m*k*k + i*k + j`` becomes the (i, j) tap of channel ``m``'s kernel.
    """
    if target_hw is not None and tuple(image_feat.shape[2:]) != tuple(target_hw):
        raise ValueError(
            f"image feature spatial size {tuple(image_feat.shape[2:])} does not match "
            f"depth feature spatial size {tuple(target_hw)}")
    if weight.shape[0] != channels * k * k:
        raise ValueError(f"generator weight shape {weight.shape} cannot produce {channels} channels of {k}x{k} kernels")
    pad = (weight.shape[2] - 1) // 2
    raw = ops.conv2d(image_feat, weight, bias, stride=1, padding=pad)
    n, _, h, w = raw.shape
    return ChannelwiseKernels(ops.reshape(raw, (n, channels, k * k, h, w)))


def generate_crosschannel_kernels(image_feat, weight, bias, in_channels, out_channels):
    """Global average pooling then a fully-connected layer, reshaped to (batch, M, N)."""
    pooled = ops.avg_pool_global(image_feat)
    flat = ops.fully_connected(pooled, weight, bias)
    if flat.shape[1] != in_channels * out_channels:
        raise ValueError(
            f"fully-connected output width {flat.shape[1]} != {in_channels}*{out_channels}")
    return CrossChannelKernels(ops.reshape(flat, (flat.shape[0], in_channels, out_channels)))


def generate_full_kernels(image_feat, weight, bias, in_channels, out_channels, k=3, cap=ORACLE_CAP_ELEMS):
    """Unfactorised generator: one convolution emitting all M*N*K*K taps per pixel.

    Forward only.  Shape (batch, M, N, K*K, H, W); refuses to allocate past ``cap``.
    """
    n, _, h, w = image_feat.shape
    check_oracle_cap((n, in_channels, out_channels, k * k, h, w), 4, cap)
    pad = (weight.shape[2] - 1) // 2
    raw = ops.conv2d(as_tensor(image_feat).detach(), as_tensor(weight).detach(),
                     None if bias is None else as_tensor(bias).detach(), padding=pad)
    return FullVariantKernels(raw.data.reshape(n, in_channels, out_channels, k * k, h, w), cap=cap)


# -- kernel application ------------------------------------------------------

def _as_weights(kernels, cls):
    return kernels.weights if isinstance(kernels, cls) else as_tensor(kernels)


def channelwise_variant_conv(depth_feat, kernels):
    """Apply each pixel's own K x K kernel to the same-channel neighbourhood.

    out[b, m, y, x] = sum_{i,j} W[b, m, i*K+j, y, x] * S[b, m, y+i-r, x+j-r]
    with zero padding r = (K-1)/2, so the output has the input's size.
    """
    wt = _as_weights(kernels, ChannelwiseKernels)
    s = as_tensor(depth_feat)
    if s.ndim != 4 or wt.ndim != 5:
        raise ValueError(f"channelwise_variant_conv: expected 4-D features and 5-D kernels, got {s.shape} and {wt.shape}")
    n, m, h, w = s.shape
    if wt.shape[:2] != (n, m) or wt.shape[3:] != (h, w):
        raise ValueError(f"channelwise_variant_conv: feature shape {s.shape} incompatible with kernel shape {wt.shape}")
    k = _kernel_size(wt.shape[2])
    r = (k - 1) // 2
    sp = np.pad(s.data, ((0, 0), (0, 0), (r, r), (r, r))) if r else s.data
    wd = wt.data
    out = np.zeros((n, m, h, w), dtype=np.result_type(s.dtype, wt.dtype))
    for i in range(k):
        for j in range(k):
            out += wd[:, :, i * k + j] * sp[:, :, i:i + h, j:j + w]

    def grad_fn(g):
        gs = gw = None
        if wt.requires_grad:
            gw = np.empty_like(wd)
            for i in range(k):
                for j in range(k):
                    gw[:, :, i * k + j] = g * sp[:, :, i:i + h, j:j + w]
        if s.requires_grad:
            gsp = np.zeros(sp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gsp[:, :, i:i + h, j:j + w] += g * wd[:, :, i * k + j]
            gs = np.ascontiguousarray(gsp[:, :, r:r + h, r:r + w]) if r else gsp
        return gs, gw

    return make_result(out, (s, wt), grad_fn)


def crosschannel_conv(depth_feat, kernels):
    """Per-pixel mixing by each image's M x N matrix: out[b,n,p] = sum_m W[b,m,n] * D[b,m,p]."""
    wt = _as_weights(kernels, CrossChannelKernels)
    d = as_tensor(depth_feat)
    if d.ndim != 4 or wt.ndim != 3 or wt.shape[:2] != d.shape[:2]:
        raise ValueError(f"crosschannel_conv: feature shape {d.shape} incompatible with kernel shape {wt.shape}")
    n, m, h, w = d.shape
    c_out = wt.shape[2]
    df = d.data.reshape(n, m, h * w)
    wd = wt.data
    out = np.matmul(wd.transpose(0, 2, 1), df).reshape(n, c_out, h, w)

    def grad_fn(g):
        g2 = g.reshape(n, c_out, h * w)
        gd = np.matmul(wd, g2).reshape(d.shape) if d.requires_grad else None
        gw = np.matmul(df, g2.transpose(0, 2, 1)) if wt.requires_grad else None
        return gd, gw

    return make_result(out, (d, wt), grad_fn)


def naive_guided_conv(depth_feat, kernels):
    """Unfactorised spatially-variant convolution (forward only).

    out[b, n, p] = sum_m sum_k W[b, m, n, k, p] * S[b, m, p + offset(k)]
    """
    if not isinstance(kernels, FullVariantKernels):
        kernels = FullVariantKernels(np.asarray(kernels))
    wd = kernels.weights
    s = depth_feat.data if isinstance(depth_feat, Tensor) else np.asarray(depth_feat)
    n, m, h, w = s.shape
    if wd.shape[:2] != (n, m) or wd.shape[4:] != (h, w):
        raise ValueError(f"naive_guided_conv: feature shape {s.shape} incompatible with kernel shape {wd.shape}")
    k = kernels.K
    r = (k - 1) // 2
    sp = np.pad(s, ((0, 0), (0, 0), (r, r), (r, r))) if r else s
    out = np.zeros((n, wd.shape[2], h, w), dtype=np.result_type(s.dtype, wd.dtype))
    for i in range(k):
        for j in range(k):
            out += np.einsum("bmnhw,bmhw->bnhw", wd[:, :, :, i * k + j], sp[:, :, i:i + h, j:j + w])
    return out


def induce_full_kernels(channelwise, crosschannel, cap=ORACLE_CAP_ELEMS):
    """Expand a factorised pair into W[b,m,n,k,p] = W''[b,m,n] * W'[b,m,k,p]."""
    wc = _as_weights(channelwise, ChannelwiseKernels).data
    wx = _as_weights(crosschannel, CrossChannelKernels).data
    n, m, k2, h, w = wc.shape
    check_oracle_cap((n, m, wx.shape[2], k2, h, w), wc.dtype.itemsize, cap)
    full = wx[:, :, :, None, None, None] * wc[:, :, None, :, :, :]
    return FullVariantKernels(full, cap=cap)


# -- module ------------------------------------------------------------------

def guided_module_forward(image_feat, depth_feat, params, k=3):
    """Generate both kernel stages from ``image_feat`` and apply them to ``depth_feat``.

    ``params`` maps ``kgl_weight``, ``kgl_bias``, ``fc_weight``, ``fc_bias``
    to tensors; the output has ``fc_weight.shape[0] // M`` channels.
    """
    if tuple(image_feat.shape[2:]) != tuple(depth_feat.shape[2:]) or image_feat.shape[0] != depth_feat.shape[0]:
        raise ValueError(f"image feature shape {image_feat.shape} and depth feature shape {depth_feat.shape} disagree")
    m = depth_feat.shape[1]
    n_out = params["fc_weight"].shape[0] // m
    cw = generate_channelwise_kernels(image_feat, params["kgl_weight"], params.get("kgl_bias"), m, k,
                                      target_hw=depth_feat.shape[2:])
    cc = generate_crosschannel_kernels(image_feat, params["fc_weight"], params.get("fc_bias"), m, n_out)
    return crosschannel_conv(channelwise_variant_conv(depth_feat, cw), cc)


class GuidedConv(Module):
    """Guided convolution layer with learnable kernel generators.

    ``image_channels`` is the width of the guidance feature, ``in_channels``
    (M) and ``out_channels`` (N) the widths of the depth feature before and
    after the layer.
    """

    def __init__(self, image_channels, in_channels, out_channels=None, k=3, gen_k=3, rng=None):
        out_channels = in_channels if out_channels is None else out_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k = k
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kgl = Conv2d(image_channels, in_channels * k * k, gen_k, bias=True, rng=rng)
        self.fc = Linear(image_channels, in_channels * out_channels, bias=True, rng=rng)

    def params(self):
        return {"kgl_weight": self.kgl.weight, "kgl_bias": self.kgl.bias,
                "fc_weight": self.fc.weight, "fc_bias": self.fc.bias}

    def kernels(self, image_feat):
        cw = generate_channelwise_kernels(image_feat, self.kgl.weight, self.kgl.bias, self.in_channels, self.k)
        cc = generate_crosschannel_kernels(image_feat, self.fc.weight, self.fc.bias,
                                           self.in_channels, self.out_channels)
        return cw, cc

    def forward(self, image_feat, depth_feat):
        return guided_module_forward(image_feat, depth_feat, self.params(), self.k)
