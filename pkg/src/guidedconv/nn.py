"""Parameterised layers built on :mod:`guidedconv.ops`.

Modules are plain objects.  Parameters are :class:`Tensor` attributes with
``requires_grad=True``; buffers (batch-norm running statistics) are plain
numpy arrays.  Both are discovered by walking attributes in definition order,
which gives every parameter a stable dotted name for checkpoints.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


def uniform_fan_in(rng, shape, fan_in, dtype=None):
    """Fan-in-scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    dtype = dtype or default_dtype()
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Module:
    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if tuple(state[name].shape) != p.shape:
                raise ValueError(f"parameter {name!r}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in self.named_buffers():
            if name in state:
                buf[...] = state[name]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k=3, stride=1, padding=None, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        fan_in = c_in * k * k
        self.weight = uniform_fan_in(rng, (c_out, c_in, k, k), fan_in)
        self.bias = uniform_fan_in(rng, (c_out,), fan_in) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Deconv2d(Module):
    """Transposed convolution; defaults double the spatial size (K=3, stride 2)."""

    def __init__(self, c_in, c_out, k=3, stride=2, padding=None, output_padding=None, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.output_padding = (stride - 1) if output_padding is None else output_padding
        fan_in = c_in * k * k
        self.weight = uniform_fan_in(rng, (c_in, c_out, k, k), fan_in)
        self.bias = uniform_fan_in(rng, (c_out,), fan_in) if bias else None

    def forward(self, x):
        return ops.deconv2d(x, self.weight, self.bias, stride=self.stride,
                            padding=self.padding, output_padding=self.output_padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=ops.BN_EPS):
        dtype = default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, f_in, f_out, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = uniform_fan_in(rng, (f_out, f_in), f_in)
        self.bias = uniform_fan_in(rng, (f_out,), f_in) if bias else None

    def forward(self, x):
        return ops.fully_connected(x, self.weight, self.bias)


class ConvBNReLU(Module):
    def __init__(self, c_in, c_out, k=3, stride=1, rng=None):
        self.conv = Conv2d(c_in, c_out, k, stride=stride, bias=False, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class DeconvBNReLU(Module):
    def __init__(self, c_in, c_out, rng=None):
        self.deconv = Deconv2d(c_in, c_out, 3, stride=2, bias=False, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return ops.relu(self.bn(self.deconv(x)))


class ResBlock(Module):
    """Two 3x3 conv+BN layers with an additive skip.

    With ``stride=2`` (or a width change) the skip path is a strided 1x1
    projection, as in the standard residual downsampling block.
    """

    def __init__(self, c_in, c_out=None, stride=1, rng=None):
        c_out = c_in if c_out is None else c_out
        self.conv1 = Conv2d(c_in, c_out, 3, stride=stride, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, stride=stride, bias=False, rng=rng)
            self.proj_bn = BatchNorm2d(c_out)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x):
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return ops.relu(ops.add(y, skip))
