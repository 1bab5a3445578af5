"""Parameterized building blocks over :mod:`hart.ops`.

Parameters use the channels-last layouts of the functional ops: linear weights
are ``(din, dout)`` and convolution kernels ``(K, Cin // groups, Cout)``.
Initialization is deferred to :func:`init_parameters`, which draws every tensor
from its own named random substream so that a seed fully determines the model.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import ops
from .rng import RngState, substream

INIT_STD = 0.02


class Linear(nn.Module):
    init_kinds = {"weight": "trunc_normal", "bias": "zeros"}

    def __init__(self, din: int, dout: int, bias: bool = True):
        super().__init__()
        self.din, self.dout = din, dout
        self.weight = nn.Parameter(torch.empty(din, dout))
        self.bias = nn.Parameter(torch.empty(dout)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def extra_repr(self):
        return f"{self.din} -> {self.dout}, bias={self.bias is not None}"


class Conv1d(nn.Module):
    def __init__(self, cin: int, cout: int, kernel_size: int, stride: int = 1, groups: int = 1,
                 padding: str = "valid", bias: bool = True, init: str = "trunc_normal"):
        super().__init__()
        self.init_kinds = {"kernel": init, "bias": "zeros"}
        if cin % groups or cout % groups:
            raise ops.ShapeError(f"Conv1d channels {cin}->{cout} not divisible by groups={groups}")
        self.cin, self.cout = cin, cout
        self.kernel_size, self.stride, self.groups, self.padding = kernel_size, stride, groups, padding
        self.kernel = nn.Parameter(torch.empty(kernel_size, cin // groups, cout))
        self.bias = nn.Parameter(torch.empty(cout)) if bias else None

    def forward(self, x):
        return ops.conv1d(x, self.kernel, self.bias, self.stride, self.groups, self.padding)

    def out_length(self, t: int) -> int:
        if self.padding == "same":
            return -(-t // self.stride)
        return (t - self.kernel_size) // self.stride + 1

    def extra_repr(self):
        return (f"{self.cin} -> {self.cout}, k={self.kernel_size}, stride={self.stride}, "
                f"groups={self.groups}, padding={self.padding}")


class LayerNorm(nn.Module):
    init_kinds = {"gamma": "ones", "beta": "zeros"}

    def __init__(self, dim: int, eps: float = ops.LAYER_NORM_EPS):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.gamma = nn.Parameter(torch.empty(dim))
        self.beta = nn.Parameter(torch.empty(dim))

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(nn.Module):
    init_kinds = {"gamma": "ones", "beta": "zeros"}

    def __init__(self, channels: int, momentum: float = ops.BATCH_NORM_MOMENTUM, eps: float = ops.BATCH_NORM_EPS):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = nn.Parameter(torch.empty(channels))
        self.beta = nn.Parameter(torch.empty(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        return ops.batch_norm(x, self.running_mean, self.running_var, self.gamma, self.beta,
                              self.training, self.momentum, self.eps)


class Activation(nn.Module):
    def __init__(self, kind: str = "swish"):
        super().__init__()
        if kind not in ops.ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x):
        return ops.activation(x, self.kind)

    def extra_repr(self):
        return self.kind


class _Stochastic(nn.Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"drop rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng: RngState | None = None
        self.rng_key = ""

    def _stream(self):
        if not (self.training and self.rate > 0):
            return None
        if self.rng is None:
            raise RuntimeError(f"{type(self).__name__} {self.rng_key!r} has no rng attached")
        return self.rng.next(self.rng_key)

    def extra_repr(self):
        return f"rate={self.rate}"


class Dropout(_Stochastic):
    def forward(self, x):
        return ops.dropout(x, self.rate, self.training, self._stream())


class DropPath(_Stochastic):
    def forward(self, x):
        return ops.drop_path(x, self.rate, self.training, self._stream())


def attach_rng(model: nn.Module, rng: RngState) -> None:
    for name, module in model.named_modules():
        if isinstance(module, _Stochastic):
            module.rng = rng
            module.rng_key = name


def _trunc_normal(gen: np.random.Generator, shape, std: float) -> np.ndarray:
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _glorot_uniform(gen: np.random.Generator, shape) -> np.ndarray:
    # (K, Cin/groups, Cout) kernels: fans include the receptive field
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in, fan_out = receptive * shape[-2], receptive * shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, shape)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministically (re)initialize every parameter of ``model`` from ``seed``."""
    with torch.no_grad():
        for mod_name, module in model.named_modules():
            kinds = getattr(module, "init_kinds", {})
            for pname, p in module.named_parameters(recurse=False):
                full = f"{mod_name}.{pname}" if mod_name else pname
                kind = kinds.get(pname, "trunc_normal")
                if kind == "zeros":
                    p.zero_()
                elif kind == "ones":
                    p.fill_(1.0)
                elif kind == "glorot_uniform":
                    values = _glorot_uniform(substream(seed, "init/" + full), tuple(p.shape))
                    p.copy_(torch.from_numpy(values).to(p.dtype))
                else:
                    values = _trunc_normal(substream(seed, "init/" + full), tuple(p.shape), INIT_STD)
                    p.copy_(torch.from_numpy(values).to(p.dtype))
