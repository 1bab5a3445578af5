"""Attention, LightConv and the sensor-wise encoder block.

Composite modules expose ``trace(tracer, shape, name)`` for the symbolic FLOP
counter in :mod:`hart.cost`; ``shape`` excludes the batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .. import ops
from ..layers import Activation, DropPath, Dropout, LayerNorm, Linear


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention over ``(B, N, dim)``.

    ``key_dim`` is the per-head query/key/value width.  When omitted the
    heads split ``dim`` evenly (``dim`` must then be divisible by ``heads``).
    """

    def __init__(self, dim: int, heads: int, key_dim: int | None = None, dropout: float = 0.0):
        super().__init__()
        if key_dim is None:
            if dim % heads:
                raise ops.ShapeError(f"attention width {dim} not divisible by {heads} heads")
            key_dim = dim // heads
        self.dim, self.heads, self.key_dim = dim, heads, key_dim
        inner = heads * key_dim
        self.query = Linear(dim, inner)
        self.key = Linear(dim, inner)
        self.value = Linear(dim, inner)
        self.out = Linear(inner, dim)
        self.attn_drop = Dropout(dropout)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        q = self._heads(self.query(x))
        k = self._heads(self.key(x))
        return ops.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.key_dim), axis=-1)

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        return t.reshape(*t.shape[:-1], self.heads, self.key_dim).transpose(-2, -3)

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ops.ShapeError(f"attention expects width {self.dim}, got {x.shape[-1]}")
        if self.attn_drop.training and self.attn_drop.rate > 0:
            attn = self.attn_drop(self.attention_weights(x))
            ctx = attn @ self._heads(self.value(x))
        else:
            q, k, v = (self._heads(proj(x)) for proj in (self.query, self.key, self.value))
            ctx = F.scaled_dot_product_attention(q, k, v)
        ctx = ctx.transpose(-2, -3).reshape(*x.shape[:-1], self.heads * self.key_dim)
        return self.out(ctx)

    def trace(self, tracer, shape, name):
        n = shape[0]
        for proj in ("query", "key", "value"):
            tracer.call(getattr(self, proj), shape, f"{name}.{proj}")
        hk = self.heads * n * n
        tracer.add(name, "attention_scores", 2 * hk * self.key_dim, kind="attention")
        tracer.add(name, "attention_scale", hk)
        tracer.add(name, "attention_softmax", 5 * hk, kind="softmax")
        tracer.add(name, "attention_values", 2 * hk * self.key_dim, kind="attention")
        return tracer.call(self.out, (n, self.heads * self.key_dim), f"{name}.out")


class LightConv(nn.Module):
    """Depthwise convolution along frames with softmax-normalized taps.

    ``heads`` kernels of ``kernel_size`` taps are shared across contiguous
    channel groups of width ``dim // heads``; the kernel holds exactly
    ``heads * kernel_size`` parameters.  ``projection`` adds a ``dim -> dim``
    output projection.
    """

    init_kinds = {"logits": "trunc_normal"}

    def __init__(self, dim: int, kernel_size: int = 3, heads: int = 4, projection: bool = False):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"LightConv kernel size must be odd, got {kernel_size}")
        if dim % heads:
            raise ops.ShapeError(f"LightConv width {dim} not divisible by {heads} heads")
        self.dim, self.kernel_size, self.heads = dim, kernel_size, heads
        self.logits = nn.Parameter(torch.empty(heads, kernel_size))
        self.proj = Linear(dim, dim) if projection else None
        self._cache = None

    def kernel_weights(self) -> torch.Tensor:
        return ops.softmax(self.logits, axis=-1)

    def _depthwise_kernel(self) -> torch.Tensor:
        # (K, 1, dim) kernel; reused without autograd until the logits change
        key = (self.logits.data_ptr(), self.logits._version) if not torch.is_grad_enabled() else None
        if key is not None and self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        w = self.kernel_weights().repeat_interleave(self.dim // self.heads, dim=0).t().unsqueeze(1)
        self._cache = (key, w) if key is not None else None
        return w

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ops.ShapeError(f"LightConv expects width {self.dim}, got {x.shape[-1]}")
        y = ops.conv1d(x, self._depthwise_kernel(), None, stride=1, groups=self.dim, padding="same")
        return self.proj(y) if self.proj is not None else y

    def trace(self, tracer, shape, name):
        n = shape[0]
        tracer.add(name, "kernel_softmax", 5 * self.heads * self.kernel_size, kind="softmax")
        tracer.add(name, "depthwise_conv", 2 * n * self.kernel_size * self.dim, kind="conv")
        if self.proj is not None:
            return tracer.call(self.proj, shape, f"{name}.proj")
        return shape


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, activation: str = "swish", dropout: float = 0.0):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.act = Activation(activation)
        self.drop1 = Dropout(dropout)
        self.fc2 = Linear(hidden, dim)
        self.drop2 = Dropout(dropout)

    def forward(self, x):
        return self.drop2(self.fc2(self.drop1(self.act(self.fc1(x)))))

    def trace(self, tracer, shape, name):
        for child in ("fc1", "act", "drop1", "fc2", "drop2"):
            shape = tracer.call(getattr(self, child), shape, f"{name}.{child}")
        return shape


@dataclass(frozen=True)
class Branch:
    """Columns ``slices`` of the normalized embedding are concatenated and fed to module ``target``."""

    slices: tuple[tuple[int, int], ...]
    target: str  # "msa<i>" or "lite"

    @property
    def width(self) -> int:
        return sum(b - a for a, b in self.slices)


@dataclass(frozen=True)
class SliceMap:
    """Column ownership inside a sensor-wise encoder block.

    Sensor ``s`` owns columns ``[s*d/S, (s+1)*d/S)``; the first half of that
    range is its attention slice and the second half goes to LightConv.
    """

    dim: int
    sensors: int

    @property
    def sensor_width(self) -> int:
        return self.dim // self.sensors

    def sensor_block(self, s: int) -> tuple[int, int]:
        w = self.sensor_width
        return (s * w, (s + 1) * w)

    def msa_slice(self, s: int) -> tuple[int, int]:
        a, _ = self.sensor_block(s)
        return (a, a + self.sensor_width // 2)

    def lite_slice(self, s: int) -> tuple[int, int]:
        a, b = self.sensor_block(s)
        return (a + self.sensor_width // 2, b)

    @property
    def msa_slices(self) -> tuple[tuple[int, int], ...]:
        return tuple(self.msa_slice(s) for s in range(self.sensors))

    @property
    def lite_slices(self) -> tuple[tuple[int, int], ...]:
        return tuple(self.lite_slice(s) for s in range(self.sensors))


# layout name -> how columns are routed to attention / LightConv modules
LAYOUTS = ("full", "hart", "hart_one_msa", "liteconv", "swmsa")


def branch_layout(layout: str, dim: int, sensors: int) -> list[Branch]:
    sm = SliceMap(dim, sensors)
    if layout == "full":
        return [Branch(((0, dim),), "msa0")]
    if layout == "hart":
        return [Branch((sm.msa_slice(s),), f"msa{s}") for s in range(sensors)] + [Branch(sm.lite_slices, "lite")]
    if layout == "hart_one_msa":
        return [Branch((sm.msa_slice(s),), "msa0") for s in range(sensors)] + [Branch(sm.lite_slices, "lite")]
    if layout == "liteconv":
        return [Branch(sm.msa_slices, "msa0"), Branch(sm.lite_slices, "lite")]
    if layout == "swmsa":
        return [Branch((sm.sensor_block(s),), f"msa{s}") for s in range(sensors)]
    raise ValueError(f"unknown block layout {layout!r}; expected one of {LAYOUTS}")


class EncoderBlock(nn.Module):
    """Pre-norm transformer block whose mixing stage routes column slices to separate modules.

    ``layout="full"`` is the plain ViT block; ``"hart"`` gives each sensor its
    own attention on its slice and sends the remaining halves to LightConv.
    Branch outputs are written back to the columns they were read from.
    """

    def __init__(self, dim: int, heads: int, key_dim: int | None, layout: str = "hart", sensors: int = 2,
                 ff_hidden: int | None = None, activation: str = "swish", dropout: float = 0.0,
                 drop_path: float = 0.0, lightconv_kernel: int = 3, lightconv_heads: int = 4,
                 lightconv_projection: bool = False):
        super().__init__()
        self.dim, self.layout, self.sensors = dim, layout, sensors
        self.branches = branch_layout(layout, dim, sensors)
        targets = sorted({b.target for b in self.branches if b.target.startswith("msa")})
        widths = {b.target: b.width for b in self.branches}
        self.norm1 = LayerNorm(dim)
        self.msa = nn.ModuleList(MultiHeadSelfAttention(widths[t], heads, key_dim) for t in targets)
        self.lightconv = None
        if any(b.target == "lite" for b in self.branches):
            self.lightconv = LightConv(widths["lite"], lightconv_kernel, lightconv_heads, lightconv_projection)
        self.drop_path1 = DropPath(drop_path)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_hidden or 2 * dim, activation, dropout)
        self.drop_path2 = DropPath(drop_path)
        self._order = self._reassembly_order()
        self._fused_cache = None

    def _reassembly_order(self):
        pieces = []
        for bi, branch in enumerate(self.branches):
            offset = 0
            for a, b in branch.slices:
                pieces.append((a, bi, offset, b - a))
                offset += b - a
        pieces.sort()
        covered = [(a, a + w) for a, _, _, w in pieces]
        expect = 0
        for a, b in covered:
            if a != expect:
                raise ValueError(f"block layout does not tile [0, {self.dim}): gap or overlap at column {a}")
            expect = b
        if expect != self.dim:
            raise ValueError(f"block layout covers [0, {expect}) instead of [0, {self.dim})")
        return [(bi, offset, w) for _, bi, offset, w in pieces]

    def _module(self, target: str) -> nn.Module:
        return self.lightconv if target == "lite" else self.msa[int(target[3:])]

    def branch_outputs(self, h: torch.Tensor) -> list[torch.Tensor]:
        """Per-branch outputs of the mixing stage for a normalized input ``h``."""
        outs = []
        for branch in self.branches:
            parts = [h[..., a:b] for a, b in branch.slices]
            x = parts[0] if len(parts) == 1 else torch.cat(parts, dim=-1)
            outs.append(self._module(branch.target)(x))
        return outs

    def _fused_weights(self):
        """Block-diagonal width-``d`` weights equivalent to the per-sensor branches.

        Sensor ``s``'s query/key/value rows are nonzero only on its attention
        slice, its output columns only on that same slice, and the LightConv
        kernel only on the LightConv slices.  Every cross-sensor product is an
        exact zero, so a perturbation confined to one sensor's slice cannot
        change another sensor's outputs.
        """
        s, d = self.sensors, self.dim
        w = d // (2 * s)
        msas = list(self.msa) if len(self.msa) == s else [self.msa[0]] * s
        tensors = [p for m in self.msa for p in m.parameters()] + [self.lightconv.logits]
        # without autograd the dense copies are reused until a parameter changes
        key = tuple((p.data_ptr(), p._version) for p in tensors) if not torch.is_grad_enabled() else None
        if key is not None and self._fused_cache is not None and self._fused_cache[0] == key:
            return self._fused_cache[1]

        def rows(weight, i):  # (w, I) -> (d, I) placed on sensor i's attention slice
            return F.pad(weight, (0, 0, 2 * i * w, d - (2 * i + 1) * w))

        w_qkv = torch.stack([torch.stack([rows(getattr(m, name).weight, i) for i, m in enumerate(msas)], 1)
                             for name in ("query", "key", "value")], 1)  # (d, 3, S, I)
        b_qkv = torch.stack([torch.stack([getattr(m, name).bias for m in msas]) for name in ("query", "key", "value")])
        w_out = torch.cat([F.pad(m.out.weight, (2 * i * w, d - (2 * i + 1) * w)) for i, m in enumerate(msas)])
        b_out = torch.cat([F.pad(m.out.bias, (0, w)) for m in msas])
        lite = self.lightconv._depthwise_kernel()  # (K, 1, S*w)
        lite = lite.reshape(lite.shape[0], 1, s, 1, w)
        lite = torch.cat([torch.zeros_like(lite), lite], dim=3).reshape(lite.shape[0], 1, d)
        fused = (w_qkv.reshape(d, -1).t(), b_qkv.reshape(-1), w_out.t(), b_out, lite)
        self._fused_cache = (key, fused) if key is not None else None
        return fused

    def _sensorwise_attend(self, h: torch.Tensor) -> torch.Tensor:
        # Same function as the branch loop, computed at full width with
        # block-diagonal weights: one projection, one attention call over
        # sensors x heads, one output projection and one depthwise conv.
        m0 = self.msa[0]
        heads, kd = m0.heads, m0.key_dim
        w_qkv, b_qkv, w_out, b_out, lite = self._fused_weights()
        lead, n = h.shape[:-2], h.shape[-2]
        x = h.reshape(-1, n, self.dim)
        qkv = F.linear(x, w_qkv, b_qkv).reshape(x.shape[0], n, 3, self.sensors * heads, kd).permute(2, 0, 3, 1, 4)
        ctx = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])  # (B, S*H, N, kd)
        ctx = ctx.transpose(1, 2).reshape(x.shape[0], n, -1)
        out = F.linear(ctx, w_out, b_out) + ops.conv1d(x, lite, None, groups=self.dim, padding="same")
        return out.reshape(*lead, n, self.dim)

    def attend(self, h: torch.Tensor) -> torch.Tensor:
        """Mixing stage with every branch output written back in place."""
        if (self.layout in ("hart", "hart_one_msa") and not self._attention_dropout()
                and self.lightconv.proj is None):
            return self._sensorwise_attend(h)
        outs = self.branch_outputs(h)
        if len(self._order) == 1:
            return outs[0]
        return torch.cat([outs[bi][..., off:off + w] for bi, off, w in self._order], dim=-1)

    def _attention_dropout(self) -> bool:
        return any(m.attn_drop.training and m.attn_drop.rate > 0 for m in self.msa)

    def forward(self, e):
        e = e + self.drop_path1(self.attend(self.norm1(e)))
        return e + self.drop_path2(self.ff(self.norm2(e)))

    def trace(self, tracer, shape, name):
        n, d = shape
        tracer.call(self.norm1, shape, f"{name}.norm1")
        for branch in self.branches:
            sub = "lightconv" if branch.target == "lite" else f"msa.{branch.target[3:]}"
            tracer.call(self._module(branch.target), (n, branch.width), f"{name}.{sub}")
        tracer.add(name, "residual_add", n * d)
        tracer.call(self.norm2, shape, f"{name}.norm2")
        tracer.call(self.ff, shape, f"{name}.ff")
        tracer.add(name, "residual_add", n * d)
        return shape
