"""Parameterised building blocks on top of :mod:`doda.diffmath`."""

import numpy as np

from doda import diffmath as dm


class Linear(dm.Module):
    """Affine map over the last axis of a 2-D or 3-D tensor."""

    def __init__(self, d_in: int, d_out: int, rng, zero: bool = False, bias: bool = True):
        scale = 0.0 if zero else 1.0 / np.sqrt(d_in)
        self.weight = dm.Parameter(rng.standard_normal((d_in, d_out)) * scale)
        self.bias = dm.Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        y = dm.matmul(x, self.weight)
        return dm.add_bias(y, self.bias) if self.bias is not None else y


class Conv2d(dm.Module):
    """Square-kernel convolution with ``same`` padding for odd kernels at stride 1."""

    def __init__(self, c_in: int, c_out: int, rng, kernel: int = 3, stride: int = 1, zero: bool = False):
        fan_in = c_in * kernel * kernel
        scale = 0.0 if zero else np.sqrt(2.0 / fan_in)
        self.weight = dm.Parameter(rng.standard_normal((c_out, c_in, kernel, kernel)) * scale)
        self.bias = dm.Parameter(np.zeros(c_out))
        self.stride = stride
        self.pad = kernel // 2

    def forward(self, x):
        return dm.add_bias(dm.conv2d(x, self.weight, stride=self.stride, pad=self.pad), self.bias)


class GroupNorm(dm.Module):
    def __init__(self, channels: int, groups: int = 8):
        self.groups = min(groups, channels)
        while channels % self.groups:
            self.groups -= 1
        self.gamma = dm.Parameter(np.ones(channels))
        self.beta = dm.Parameter(np.zeros(channels))

    def forward(self, x):
        return dm.group_norm(x, self.gamma, self.beta, groups=self.groups)


class MLP(dm.Module):
    """Stack of SiLU-activated linear layers."""

    def __init__(self, d_in: int, width: int, depth: int, d_out: int, rng):
        dims = [d_in] + [width] * depth
        self.hidden = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(dims[-1], d_out, rng)

    def forward(self, x):
        for layer in self.hidden:
            x = dm.silu(layer(x))
        return self.out(x)
