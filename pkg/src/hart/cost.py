"""Exact parameter and FLOP accounting.

FLOPs are counted symbolically from module shapes, without running the model.
The counting convention is fixed and written into every report:

* a multiply-accumulate is 2 FLOPs, a bias add 1 per output element;
* layer/batch normalization 5 per element, softmax 5 per element;
* swish 4 per element, gelu 8 per element;
* residual and positional additions 1 per element, dropout and drop-path 0
  (identities at inference).
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

from torch import nn

from .layers import Activation, BatchNorm, Conv1d, DropPath, Dropout, LayerNorm, Linear

CONVENTION = "mac2-bias1-norm5-softmax5-swish4-gelu8-add1"
PER_ELEMENT = {"norm": 5, "softmax": 5, "swish": 4, "gelu": 8}


class UnsupportedOpError(TypeError):
    """The FLOP tracer met a module it has no counting rule for."""


@dataclass
class FlopEntry:
    layer: str
    op: str
    flops: int
    kind: str


class FlopTracer:
    """Walks a model with symbolic shapes (batch axis excluded) and records FLOP entries."""

    def __init__(self):
        self.entries: list[FlopEntry] = []

    def add(self, layer: str, op: str, flops: int, kind: str | None = None) -> None:
        self.entries.append(FlopEntry(layer, op, int(flops), kind or op))

    def call(self, module: nn.Module, shape: tuple[int, ...], name: str) -> tuple[int, ...]:
        shape = tuple(int(s) for s in shape)
        numel = math.prod(shape)
        if isinstance(module, Linear):
            if shape[-1] != module.din:
                raise ValueError(f"{name}: linear expects width {module.din}, got {shape[-1]}")
            rows = numel // module.din
            flops = 2 * rows * module.din * module.dout + (rows * module.dout if module.bias is not None else 0)
            self.add(name, "linear", flops, kind="matmul")
            return shape[:-1] + (module.dout,)
        if isinstance(module, Conv1d):
            t, cin = shape
            if cin != module.cin:
                raise ValueError(f"{name}: conv expects {module.cin} channels, got {cin}")
            t_out = module.out_length(t)
            flops = 2 * t_out * module.kernel_size * (cin // module.groups) * module.cout
            if module.bias is not None:
                flops += t_out * module.cout
            self.add(name, "conv1d", flops, kind="conv")
            return (t_out, module.cout)
        if isinstance(module, (LayerNorm, BatchNorm)):
            self.add(name, type(module).__name__.lower(), PER_ELEMENT["norm"] * numel, kind="norm")
            return shape
        if isinstance(module, Activation):
            self.add(name, module.kind, PER_ELEMENT[module.kind] * numel, kind="activation")
            return shape
        if isinstance(module, (Dropout, DropPath)):
            return shape
        if isinstance(module, nn.Sequential):
            for i, child in enumerate(module):
                shape = self.call(child, shape, f"{name}.{i}")
            return shape
        trace = getattr(module, "trace", None)
        if trace is None:
            raise UnsupportedOpError(f"no FLOP rule for op {type(module).__name__} at {name or '<root>'}")
        return tuple(trace(self, shape, name))

    def by_layer(self) -> dict[str, int]:
        out: dict[str, int] = OrderedDict()
        for e in self.entries:
            out[e.layer] = out.get(e.layer, 0) + e.flops
        return out

    def total(self, kind: str | None = None) -> int:
        return sum(e.flops for e in self.entries if kind is None or e.kind == kind)


@dataclass
class CostReport:
    convention: str = CONVENTION
    input_shape: list[int] | None = None
    total_params: int = 0
    params: dict[str, int] = field(default_factory=dict)
    total_flops: int | None = None
    flops: dict[str, int] = field(default_factory=dict)
    flop_entries: list[dict] = field(default_factory=list)

    def check(self) -> None:
        if self.total_params != sum(self.params.values()):
            raise AssertionError("parameter total differs from the per-layer sum")
        if self.total_flops is not None and self.total_flops != sum(self.flops.values()):
            raise AssertionError("FLOP total differs from the per-layer sum")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def count_params(model: nn.Module) -> CostReport:
    """Per-module parameter counts (keyed by the owning module path) and their total."""
    per_layer: dict[str, int] = OrderedDict()
    for name, p in model.named_parameters():
        layer = name.rpartition(".")[0] or "<root>"
        per_layer[layer] = per_layer.get(layer, 0) + p.numel()
    report = CostReport(total_params=sum(per_layer.values()), params=dict(per_layer))
    report.check()
    return report


def trace_flops(module: nn.Module, shape: tuple[int, ...], name: str = "") -> FlopTracer:
    tracer = FlopTracer()
    tracer.call(module, shape, name)
    return tracer


def count_flops(model: nn.Module, input_shape: tuple[int, ...]) -> CostReport:
    """Parameters plus FLOPs of one forward pass on a single ``(W, channels)`` window."""
    tracer = trace_flops(model, tuple(input_shape))
    report = count_params(model)
    report.input_shape = list(input_shape)
    report.flops = dict(tracer.by_layer())
    report.total_flops = tracer.total()
    report.flop_entries = [asdict(e) for e in tracer.entries]
    report.check()
    return report


def attention_flops(block: nn.Module, n: int, d: int) -> int:
    """FLOPs of the query-key scores and attention-weighted values inside one block."""
    return trace_flops(block, (n, d), "block").total(kind="attention")


# Parameter and FLOP figures published for the reference implementation
REFERENCE = {
    ("vit", "tiny"): (3_783_238, 17_069_949),
    ("hart", "tiny"): (1_445_918, 15_212_636),
    ("hart_one_msa", "tiny"): (1_277_150, 15_176_924),
    ("vit+liteconv", "tiny"): (1_443_326, 15_179_228),
    ("vit+swmsa", "tiny"): (2_446_534, 15_091_292),
    ("mobilehart_xs", None): (2_542_942, 19_809_292),
    ("mobilehart_xxs", None): (1_275_702, 8_213_276),
    ("vit", "small"): (50_107_270, 130_933_679),
    ("hart", "small"): (12_886_422, 116_606_588),
    ("hart_one_msa", "small"): (10_210_326, 116_353_148),
    ("vit", "base"): (369_332_998, 518_646_935),
    ("hart", "base"): (71_857_062, 462_246_524),
    ("hart_one_msa", "base"): (50_538_150, 461_297_276),
}


def group_params(report: CostReport, depth: int = 2) -> dict[str, int]:
    """Collapse per-module counts to the first ``depth`` path components."""
    out: dict[str, int] = OrderedDict()
    for layer, n in report.params.items():
        key = ".".join(layer.split(".")[:depth])
        out[key] = out.get(key, 0) + n
    return dict(out)


def reference_deviation(variant: str, preset: str | None, report: CostReport) -> dict:
    """Relative deviation of a report from the published figures, with a per-group parameter table."""
    ref = REFERENCE.get((variant, None)) or REFERENCE.get((variant, preset))
    if ref is None:
        raise KeyError(f"no published reference for {variant}/{preset}")
    ref_params, ref_flops = ref
    out = {
        "variant": variant,
        "preset": preset,
        "params": report.total_params,
        "reference_params": ref_params,
        "params_rel_dev": (report.total_params - ref_params) / ref_params,
        "reference_flops": ref_flops,
        "per_group_params": group_params(report),
    }
    if report.total_flops is not None:
        out["flops"] = report.total_flops
        out["flops_rel_dev"] = (report.total_flops - ref_flops) / ref_flops
    return out
