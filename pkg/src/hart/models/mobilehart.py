"""MobileHART: sensor-wise inverted residual stages feeding HART-style blocks, in 1D."""

from __future__ import annotations

import torch
from torch import nn

from .. import ops
from ..layers import Activation, BatchNorm, Conv1d, Dropout, LayerNorm, Linear
from .blocks import EncoderBlock
from .config import MobileHartConfig, lightconv_schedule


class ConvNormAct(nn.Module):
    def __init__(self, cin, cout, kernel_size=1, stride=1, groups=1, act=True):
        super().__init__()
        self.conv = Conv1d(cin, cout, kernel_size, stride, groups, padding="same", bias=False, init="glorot_uniform")
        self.norm = BatchNorm(cout)
        self.act = Activation("swish") if act else None

    def forward(self, x):
        y = self.norm(self.conv(x))
        return self.act(y) if self.act is not None else y

    def trace(self, tracer, shape, name):
        shape = tracer.call(self.conv, shape, f"{name}.conv")
        shape = tracer.call(self.norm, shape, f"{name}.norm")
        if self.act is not None:
            shape = tracer.call(self.act, shape, f"{name}.act")
        return shape


class MV2Block(nn.Module):
    """Inverted residual: pointwise expand -> depthwise (k=3) -> pointwise project.

    The residual is added only when ``stride == 1`` and the channel count is
    unchanged.
    """

    def __init__(self, cin: int, cout: int, stride: int = 1, expansion: int = 2):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"MV2 stride must be 1 or 2, got {stride}")
        hidden = cin * expansion
        self.expand = ConvNormAct(cin, hidden, 1)
        self.depthwise = ConvNormAct(hidden, hidden, 3, stride=stride, groups=hidden)
        self.project = ConvNormAct(hidden, cout, 1, act=False)
        self.use_residual = stride == 1 and cin == cout

    def forward(self, x):
        y = self.project(self.depthwise(self.expand(x)))
        return x + y if self.use_residual else y

    def trace(self, tracer, shape, name):
        out = shape
        for child in ("expand", "depthwise", "project"):
            out = tracer.call(getattr(self, child), out, f"{name}.{child}")
        if self.use_residual:
            tracer.add(name, "residual_add", out[0] * out[1])
        return out


class SensorWise(nn.Module):
    """Applies one module per sensor to equal channel chunks and concatenates the results."""

    def __init__(self, modules):
        super().__init__()
        self.parts = nn.ModuleList(modules)

    def forward(self, x):
        s = len(self.parts)
        if x.shape[-1] % s:
            raise ops.ShapeError(f"{x.shape[-1]} channels cannot be split across {s} sensors")
        w = x.shape[-1] // s
        return torch.cat([m(x[..., i * w:(i + 1) * w]) for i, m in enumerate(self.parts)], dim=-1)

    def trace(self, tracer, shape, name):
        t, c = shape
        w = c // len(self.parts)
        outs = [tracer.call(m, (t, w), f"{name}.parts.{i}") for i, m in enumerate(self.parts)]
        return (outs[0][0], sum(o[1] for o in outs))


class MobileHartBlock(nn.Module):
    """Local sensor-wise convolutions, global HART encoding over unfolded frames, and fusion.

    ``(B, T, C)`` -> grouped k=3 conv -> grouped pointwise to width ``d`` ->
    unfold into ``patch`` interleaved frame sequences of length ``T / patch``
    -> HART encoder blocks (no positional embedding) -> fold -> pointwise to
    ``C`` -> concat with the input -> k=3 fusion conv back to ``C``.
    """

    def __init__(self, channels: int, dim: int, depth: int, cfg: MobileHartConfig):
        super().__init__()
        if channels % 2:
            raise ops.ShapeError(f"MobileHART block needs an even channel count, got {channels}")
        s = cfg.sensors
        self.patch, self.channels, self.dim = cfg.patch, channels, dim
        self.local_conv = ConvNormAct(channels, channels, 3, groups=s)
        self.to_embed = Conv1d(channels, dim, 1, groups=s, padding="same", bias=False, init="glorot_uniform")
        self.blocks = nn.ModuleList(
            EncoderBlock(dim, cfg.heads, dim // (2 * s), "hart", s,
                         ff_hidden=cfg.ff_ratio * dim, activation="swish", dropout=cfg.dropout,
                         drop_path=cfg.drop_path * (i + 1) / depth, lightconv_kernel=k,
                         lightconv_heads=cfg.lightconv_heads)
            for i, k in enumerate(lightconv_schedule(depth, cfg.lightconv_kernel))
        )
        self.norm = LayerNorm(dim)
        self.from_embed = ConvNormAct(dim, channels, 1)
        self.fuse = ConvNormAct(2 * channels, channels, 3)

    def unfold(self, y):
        *lead, t, d = y.shape
        if t % self.patch:
            raise ops.ShapeError(f"length {t} not divisible by patch size {self.patch}")
        # frame-major: sequence index = t // patch, one sequence per in-patch offset
        y = y.reshape(*lead, t // self.patch, self.patch, d).transpose(-2, -3)
        return y.reshape(-1, t // self.patch, d), (lead, t, d)

    def fold(self, z, info):
        lead, t, d = info
        z = z.reshape(*lead, self.patch, t // self.patch, d).transpose(-2, -3)
        return z.reshape(*lead, t, d)

    def attention_path(self, x):
        z, info = self.unfold(self.to_embed(self.local_conv(x)))
        for block in self.blocks:
            z = block(z)
        return self.from_embed(self.fold(self.norm(z), info))

    def forward(self, x):
        if x.shape[-1] != self.channels:
            raise ops.ShapeError(f"MobileHART block expects {self.channels} channels, got {x.shape[-1]}")
        return self.fuse(torch.cat([self.attention_path(x), x], dim=-1))

    def trace(self, tracer, shape, name):
        t, c = shape
        shape = tracer.call(self.local_conv, shape, f"{name}.local_conv")
        t, d = tracer.call(self.to_embed, shape, f"{name}.to_embed")
        for _ in range(self.patch):
            seq = (t // self.patch, d)
            for i, block in enumerate(self.blocks):
                seq = tracer.call(block, seq, f"{name}.blocks.{i}")
            tracer.call(self.norm, seq, f"{name}.norm")
        shape = tracer.call(self.from_embed, (t, d), f"{name}.from_embed")
        return tracer.call(self.fuse, (t, 2 * c), f"{name}.fuse")


class MobileHart(nn.Module):
    def __init__(self, cfg: MobileHartConfig):
        super().__init__()
        self.config = cfg
        s, e = cfg.sensors, cfg.expansion
        c0, c1, c2, c3, c4, c5 = cfg.channels

        def sw(make):
            return SensorWise([make() for _ in range(s)])

        self.stem = sw(lambda: ConvNormAct(3, c0 // s, 3, stride=2))
        self.layer1 = sw(lambda: MV2Block(c0 // s, c1 // s, 1, e))
        self.layer2 = nn.Sequential(
            sw(lambda: MV2Block(c1 // s, c2 // s, 2, e)),
            sw(lambda: MV2Block(c2 // s, c2 // s, 1, e)),
            sw(lambda: MV2Block(c2 // s, c2 // s, 1, e)),
        )
        self.layer3 = nn.Sequential(
            sw(lambda: MV2Block(c2 // s, c3 // s, 2, e)),
            MobileHartBlock(c3, cfg.dims[0], cfg.depths[0], cfg),
        )
        self.layer4 = nn.Sequential(MV2Block(c3, c4, 2, e), MobileHartBlock(c4, cfg.dims[1], cfg.depths[1], cfg))
        self.layer5 = nn.Sequential(MV2Block(c4, c5, 2, e), MobileHartBlock(c5, cfg.dims[2], cfg.depths[2], cfg))
        self.expand = ConvNormAct(c5, cfg.last_expansion * c5, 1)
        self.drop = Dropout(cfg.dropout)
        self.classifier = Linear(cfg.last_expansion * c5, cfg.num_classes)

    STAGES = ("stem", "layer1", "layer2", "layer3", "layer4", "layer5", "expand")

    def encode(self, x):
        if x.shape[-1] != 3 * self.config.sensors:
            raise ops.ShapeError(f"expected {3 * self.config.sensors} input channels, got {x.shape[-1]}")
        for stage in self.STAGES:
            x = getattr(self, stage)(x)
        return x

    def features(self, x, layer: str = "gap_output"):
        e = self.encode(x)
        if layer == "gap_input":
            return e.flatten(start_dim=-2)
        if layer == "gap_output":
            return ops.global_average_pool(e)
        raise ValueError(f"unknown feature layer {layer!r}; expected gap_input or gap_output")

    def forward(self, x):
        return self.classifier(self.drop(ops.global_average_pool(self.encode(x))))

    def trace(self, tracer, shape, name=""):
        p = f"{name}." if name else ""
        for stage in self.STAGES:
            shape = tracer.call(getattr(self, stage), shape, f"{p}{stage}")
        t, c = shape
        tracer.add(f"{p}pool", "global_average_pool", t * c + c)
        shape = tracer.call(self.drop, (c,), f"{p}drop")
        return tracer.call(self.classifier, shape, f"{p}classifier")
