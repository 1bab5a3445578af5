"""HART, HART_OneMSA, their ablations, and the 1D ViT baseline."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .. import ops
from ..layers import Activation, Conv1d, Dropout, LayerNorm, Linear
from .blocks import EncoderBlock, SliceMap
from .config import HartConfig

LAYOUT_OF_VARIANT = {
    "vit": "full",
    "hart": "hart",
    "hart_one_msa": "hart_one_msa",
    "vit+liteconv": "liteconv",
    "vit+swmsa": "swmsa",
}


class ClassifierHead(nn.Module):
    """Pooled features -> FF -> class logits."""

    def __init__(self, dim: int, hidden: int, num_classes: int, activation: str, dropout: float):
        super().__init__()
        self.fc = Linear(dim, hidden)
        self.act = Activation(activation)
        self.drop = Dropout(dropout)
        self.classifier = Linear(hidden, num_classes)

    def forward(self, z):
        return self.classifier(self.drop(self.act(self.fc(z))))

    def trace(self, tracer, shape, name):
        for child in ("fc", "act", "drop", "classifier"):
            shape = tracer.call(getattr(self, child), shape, f"{name}.{child}")
        return shape


class SensorPatchEmbedding(nn.Module):
    """One strided convolution per sensor, concatenated, plus learnable positions.

    Each sensor's 3 channels go through ``d / S`` filters of length ``K`` with
    stride ``K``, giving ``N = W / K`` frames.
    """

    init_kinds = {"position": "trunc_normal"}

    def __init__(self, cfg: HartConfig):
        super().__init__()
        self.sensors, self.frame = cfg.sensors, cfg.frame
        width = cfg.dim // cfg.sensors
        self.convs = nn.ModuleList(Conv1d(3, width, cfg.frame, stride=cfg.frame) for _ in range(cfg.sensors))
        self.position = nn.Parameter(torch.empty(cfg.num_frames, cfg.dim))
        self._cache = None

    def _dense_kernel(self):
        # the S convolutions as one (K, 3S, d) kernel, zero across sensors;
        # reused without autograd until a parameter changes
        params = [p for conv in self.convs for p in (conv.kernel, conv.bias)]
        key = tuple((p.data_ptr(), p._version) for p in params) if not torch.is_grad_enabled() else None
        if key is not None and self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        c = 3 * self.sensors
        kernel = torch.cat([F.pad(conv.kernel, (0, 0, 3 * s, c - 3 * s - 3)) for s, conv in enumerate(self.convs)], -1)
        dense = (kernel, torch.cat([conv.bias for conv in self.convs]))
        self._cache = (key, dense) if key is not None else None
        return dense

    def forward(self, x):
        if x.shape[-1] != 3 * self.sensors:
            raise ops.ShapeError(f"expected {3 * self.sensors} input channels, got {x.shape[-1]}")
        kernel, bias = self._dense_kernel()
        e = ops.conv1d(x, kernel, bias, stride=self.frame)
        if e.shape[-2:] != self.position.shape:
            raise ops.ShapeError(f"frame embeddings {tuple(e.shape[-2:])} do not match positions {tuple(self.position.shape)}")
        return e + self.position

    def trace(self, tracer, shape, name):
        t, c = shape
        if c != 3 * self.sensors:
            raise ops.ShapeError(f"expected {3 * self.sensors} input channels, got {c}")
        n = None
        for s, conv in enumerate(self.convs):
            n, _ = tracer.call(conv, (t, 3), f"{name}.convs.{s}")
        out = (n, self.position.shape[1])
        tracer.add(name, "position_add", out[0] * out[1])
        return out


class VitPatchEmbedding(nn.Module):
    """Shared linear projection of flattened frames, class token at index 0, positions."""

    init_kinds = {"cls": "trunc_normal", "position": "trunc_normal"}

    def __init__(self, cfg: HartConfig):
        super().__init__()
        self.channels = cfg.channels
        self.proj = Conv1d(cfg.channels, cfg.dim, cfg.frame, stride=cfg.frame)
        self.cls = nn.Parameter(torch.empty(cfg.dim))
        self.position = nn.Parameter(torch.empty(cfg.num_frames + 1, cfg.dim))

    def forward(self, x):
        if x.shape[-1] != self.channels:
            raise ops.ShapeError(f"expected {self.channels} input channels, got {x.shape[-1]}")
        e = self.proj(x)
        cls = self.cls.expand(*e.shape[:-2], 1, e.shape[-1])
        e = torch.cat([cls, e], dim=-2)
        if e.shape[-2:] != self.position.shape:
            raise ops.ShapeError(f"sequence {tuple(e.shape[-2:])} does not match positions {tuple(self.position.shape)}")
        return e + self.position

    def trace(self, tracer, shape, name):
        if shape[1] != self.channels:
            raise ops.ShapeError(f"expected {self.channels} input channels, got {shape[1]}")
        n, d = tracer.call(self.proj, shape, f"{name}.proj")
        tracer.add(name, "position_add", (n + 1) * d)
        return (n + 1, d)


class HartModel(nn.Module):
    """Sensor-wise transformer classifier (HART family and the ViT baseline).

    Windows ``(B, W, 3*S)`` -> patch embedding -> ``L`` encoder blocks ->
    final LayerNorm -> pooling (global average over frames, or the class
    token for ``variant="vit"``) -> feed-forward -> class logits.
    """

    def __init__(self, cfg: HartConfig):
        super().__init__()
        self.config = cfg
        self.use_cls = cfg.variant == "vit"
        self.embed = VitPatchEmbedding(cfg) if self.use_cls else SensorPatchEmbedding(cfg)
        layout = LAYOUT_OF_VARIANT[cfg.variant]
        self.blocks = nn.ModuleList(
            EncoderBlock(
                cfg.dim, cfg.heads, cfg.msa_key_dim, layout, cfg.sensors,
                ff_hidden=cfg.ff_ratio * cfg.dim, activation=cfg.act, dropout=cfg.dropout,
                drop_path=cfg.drop_path_rate(i + 1), lightconv_kernel=k,
                lightconv_heads=cfg.lightconv_heads, lightconv_projection=cfg.lightconv_projection,
            )
            for i, k in enumerate(cfg.lightconv_kernels)
        )
        self.norm = LayerNorm(cfg.dim)
        self.head = ClassifierHead(cfg.dim, cfg.head_units, cfg.num_classes, cfg.act, cfg.dropout)

    @property
    def slice_map(self) -> SliceMap:
        return SliceMap(self.config.dim, self.config.sensors)

    def encode(self, x):
        """Final-norm frame embeddings ``(B, N, d)`` (``N + 1`` rows with the class token)."""
        e = self.embed(x)
        for block in self.blocks:
            e = block(e)
        return self.norm(e)

    def pool(self, e):
        return e[..., 0, :] if self.use_cls else ops.global_average_pool(e)

    def features(self, x, layer: str = "gap_output"):
        e = self.encode(x)
        if layer == "gap_input":
            return e.flatten(start_dim=-2)
        if layer == "gap_output":
            return self.pool(e)
        raise ValueError(f"unknown feature layer {layer!r}; expected gap_input or gap_output")

    def forward(self, x):
        return self.head(self.pool(self.encode(x)))

    def trace(self, tracer, shape, name=""):
        p = f"{name}." if name else ""
        shape = tracer.call(self.embed, shape, f"{p}embed")
        for i, block in enumerate(self.blocks):
            shape = tracer.call(block, shape, f"{p}blocks.{i}")
        shape = tracer.call(self.norm, shape, f"{p}norm")
        n, d = shape
        if not self.use_cls:
            tracer.add(f"{p}pool", "global_average_pool", n * d + d)
        return tracer.call(self.head, (d,), f"{p}head")
