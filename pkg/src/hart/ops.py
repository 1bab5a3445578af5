"""Differentiable array operations used by every model in the package.

All operations take channels-last tensors shaped ``(..., T, C)`` and are thin,
shape-checked wrappers over torch primitives, so reverse mode comes from
autograd.  Tensors are float32 by default; passing float64 tensors gives the
double-precision shadow mode used by the gradient checks.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

LAYER_NORM_EPS = 1e-6
BATCH_NORM_EPS = 1e-3
BATCH_NORM_MOMENTUM = 0.99


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _same_padding(length: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-length // stride)
    total = max((out - 1) * stride + kernel - length, 0)
    return total // 2, total - total // 2


def conv1d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    groups: int = 1,
    padding: str = "valid",
) -> torch.Tensor:
    """1D convolution over the time axis.

    ``x`` is ``(..., T, Cin)`` and ``kernel`` is ``(K, Cin // groups, Cout)``.
    With ``padding="valid"`` the output length is ``(T - K) // stride + 1``;
    ``padding="same"`` pads so that the output length is ``ceil(T / stride)``.
    """
    if kernel.dim() != 3:
        raise ShapeError(f"conv1d kernel must be 3-D (K, Cin/groups, Cout), got {tuple(kernel.shape)}")
    k, cin_g, cout = kernel.shape
    _check(x.dim() >= 2, f"conv1d input must be (..., T, C), got {tuple(x.shape)}")
    t, cin = x.shape[-2], x.shape[-1]
    _check(groups >= 1 and cin % groups == 0 and cout % groups == 0,
           f"conv1d channels Cin={cin}, Cout={cout} not divisible by groups={groups}")
    _check(cin // groups == cin_g,
           f"conv1d kernel expects {cin_g * groups} input channels, input has {cin}")
    _check(stride >= 1, f"conv1d stride must be >= 1, got {stride}")
    if bias is not None:
        _check(tuple(bias.shape) == (cout,), f"conv1d bias shape {tuple(bias.shape)} != ({cout},)")
    if padding == "same":
        if stride == 1 and k % 2 and k > 2 * t - 1:
            # outer taps only ever meet zero padding
            trim = (k - (2 * t - 1)) // 2
            kernel = kernel[trim:k - trim]
            k = kernel.shape[0]
        left, right = _same_padding(t, k, stride)
        if left or right:
            x = F.pad(x, (0, 0, left, right))
            t = x.shape[-2]
    elif padding != "valid":
        raise ValueError(f"unknown padding mode {padding!r}")
    else:
        _check(t >= k, f"conv1d input length {t} shorter than kernel {k}")
    n_out = (t - k) // stride + 1
    # small-input fast paths; both are the same sum as the general case
    if groups == 1 and stride == k:
        frames = x[..., : n_out * k, :].reshape(*x.shape[:-2], n_out, k * cin)
        return F.linear(frames, kernel.reshape(k * cin, cout).t(), bias)
    if groups == cin == cout:
        taps = x.unfold(-2, k, stride)  # (..., n_out, C, k)
        y = (taps * kernel[:, 0, :].t()).sum(-1)
        return y + bias if bias is not None else y
    lead = x.shape[:-2]
    xb = x.reshape(-1, t, cin).transpose(1, 2)
    out = F.conv1d(xb, kernel.permute(2, 1, 0), bias, stride=stride, groups=groups)
    return out.transpose(1, 2).reshape(*lead, n_out, cout)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as ``(din, dout)``."""
    _check(weight.dim() == 2, f"linear weight must be 2-D, got {tuple(weight.shape)}")
    _check(x.shape[-1] == weight.shape[0],
           f"linear input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    if bias is not None:
        _check(tuple(bias.shape) == (weight.shape[1],),
               f"linear bias shape {tuple(bias.shape)} != ({weight.shape[1]},)")
    return F.linear(x, weight.t(), bias)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Softmax along ``axis``; torch subtracts the row maximum before exponentiating."""
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise ShapeError(f"softmax axis {axis} out of range for {x.dim()}-D tensor")
    return torch.softmax(x, dim=axis)


def layer_norm(
    x: torch.Tensor,
    gamma: torch.Tensor | None = None,
    beta: torch.Tensor | None = None,
    eps: float = LAYER_NORM_EPS,
) -> torch.Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    return F.layer_norm(x, x.shape[-1:], gamma, beta, eps)


def batch_norm(
    x: torch.Tensor,
    running_mean: torch.Tensor | None,
    running_var: torch.Tensor | None,
    gamma: torch.Tensor | None = None,
    beta: torch.Tensor | None = None,
    training: bool = False,
    momentum: float = BATCH_NORM_MOMENTUM,
    eps: float = BATCH_NORM_EPS,
) -> torch.Tensor:
    """Per-channel normalization of ``(..., T, C)`` input.

    In training mode the batch statistics (biased variance over every axis but
    the last) normalize the input and the running statistics are updated in
    place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    if eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    if training:
        mean = flat.mean(dim=0)
        var = (flat - mean).pow(2).mean(dim=0)
        if running_mean is not None and running_var is not None:
            with torch.no_grad():
                running_mean.mul_(momentum).add_(mean.detach(), alpha=1 - momentum)
                running_var.mul_(momentum).add_(var.detach(), alpha=1 - momentum)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm in eval mode needs recorded running statistics")
        return F.batch_norm(flat, running_mean, running_var, gamma, beta, False, 0.0, eps).reshape(x.shape)
    y = (x - mean) / torch.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def swish(x: torch.Tensor) -> torch.Tensor:
    """``x * sigmoid(x)``."""
    return F.silu(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact form ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    return F.gelu(x)


ACTIVATIONS = {"swish": swish, "gelu": gelu}


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop rate must be in [0, 1), got {rate}")


def dropout(x: torch.Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Inverted dropout; an identity (the same tensor object) unless training."""
    _check_rate(rate)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng substream")
    keep = rng.random(tuple(x.shape), dtype=np.float32) >= rate
    mask = torch.from_numpy(keep).to(dtype=x.dtype, device=x.device)
    return x * mask / (1.0 - rate)


def drop_path(x: torch.Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Stochastic depth on a residual branch of shape ``(B, ...)``.

    One keep/drop decision per sample; kept branches are scaled by
    ``1 / (1 - rate)``.
    """
    _check_rate(rate)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("drop_path in training mode needs an rng substream")
    keep = rng.random((x.shape[0],), dtype=np.float32) >= rate
    shape = (x.shape[0],) + (1,) * (x.dim() - 1)
    mask = torch.from_numpy(keep).to(dtype=x.dtype, device=x.device).reshape(shape)
    return x * mask / (1.0 - rate)


def global_average_pool(e: torch.Tensor) -> torch.Tensor:
    """Mean over the frame axis of ``(..., N, d)``."""
    _check(e.dim() >= 2 and e.shape[-2] >= 1, f"global_average_pool needs N >= 1, got shape {tuple(e.shape)}")
    return e.mean(dim=-2)


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into every parameter's ``.grad``."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()
