import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score, precision_recall_fscore_support

from hart.bench import bench_inference, compare_latency
from hart.checkpoint import manifest_param_count, save_model
from hart.cost import (CONVENTION, REFERENCE, UnsupportedOpError, attention_flops, count_flops, count_params,
                       reference_deviation, trace_flops)
from hart.layers import Activation, LayerNorm, Linear, init_parameters
from hart.metrics import classification_report, confusion_matrix, macro_f1
from hart.models import VARIANTS, EncoderBlock, build_model


# metrics

def test_macro_f1_examples():
    assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert macro_f1([1, 0, 1], [0, 1, 0], 2) == 0.0
    report = classification_report([0, 0], [0, 1], 2)  # TP=1, FP=1 for class 0
    assert report.f1 == pytest.approx([2 / 3, 0.0])
    assert report.macro_f1 == pytest.approx(1 / 3)


def test_confusion_rows_are_support():
    labels = np.array([0, 0, 1, 2, 2, 2])
    cm = confusion_matrix([0, 1, 1, 2, 0, 2], labels, 3)
    assert cm.sum(1).tolist() == [2, 1, 3]
    with pytest.raises(ValueError, match="length"):
        confusion_matrix([0], [0, 1], 2)
    with pytest.raises(ValueError, match="lie in"):
        confusion_matrix([0, 3], [0, 1], 3)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60), st.permutations(range(5)))
def test_macro_f1_matches_sklearn_and_is_relabel_invariant(pairs, perm):
    pred, true = map(np.array, zip(*pairs))
    ours = classification_report(pred, true, 5)
    ref_p, ref_r, ref_f, ref_s = precision_recall_fscore_support(true, pred, labels=range(5), zero_division=0)
    np.testing.assert_allclose(ours.f1, ref_f, atol=1e-12)
    np.testing.assert_allclose(ours.precision, ref_p, atol=1e-12)
    np.testing.assert_allclose(ours.recall, ref_r, atol=1e-12)
    assert ours.macro_f1 == pytest.approx(f1_score(true, pred, labels=range(5), average="macro", zero_division=0))
    p = np.asarray(perm)
    assert macro_f1(p[pred], p[true], 5) == pytest.approx(ours.macro_f1)


# parameter and FLOP counting

def test_linear_counts():
    layer = Linear(2, 3)
    report = count_flops(layer, (1, 2))
    assert report.total_params == 9
    assert report.total_flops == 15
    assert report.convention == CONVENTION


class Toy(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.a, self.act, self.norm, self.b = Linear(4, 8), Activation("swish"), LayerNorm(8), Linear(8, 2)

    def trace(self, tracer, shape, name):
        for child in ("a", "act", "norm", "b"):
            shape = tracer.call(getattr(self, child), shape, f"{name}.{child}")
        return shape


def test_composed_flops_equal_sum_of_layers():
    report = count_flops(Toy(), (5, 4))
    parts = [count_flops(Linear(4, 8), (5, 4)).total_flops, 4 * 5 * 8, 5 * 5 * 8,
             count_flops(Linear(8, 2), (5, 8)).total_flops]
    assert report.total_flops == sum(parts) == sum(report.flops.values())
    assert list(report.flops.values()) == parts


def test_unsupported_op_named():
    with pytest.raises(UnsupportedOpError, match="ReLU"):
        count_flops(torch.nn.Sequential(Linear(2, 2), torch.nn.ReLU()), (1, 2))


@pytest.mark.parametrize("variant", VARIANTS)
def test_param_count_matches_manifest(tmp_path, variant):
    model = build_model(variant, "tiny")
    save_model(tmp_path / "m.ckpt", model)
    report = count_params(model)
    assert report.total_params == manifest_param_count(tmp_path / "m.ckpt") == sum(p.numel() for p in model.parameters())


def test_ff_flops_linear_in_frames():
    def ff_flops(window):
        model = build_model("hart", "tiny", window=window)
        entries = count_flops(model, (window, 6)).flop_entries
        return sum(e["flops"] for e in entries if ".ff." in e["layer"])

    assert ff_flops(256) == 2 * ff_flops(128)


def test_attention_ratio_hart_vs_vit():
    n, d = 8, 192
    full = EncoderBlock(d, 3, d, "full", 2)
    sensorwise = EncoderBlock(d, 3, d // 4, "hart", 2)
    assert attention_flops(sensorwise, n, d) * 2 == attention_flops(full, n, d)


def test_reference_deviation_report():
    report = count_flops(build_model("hart", "tiny"), (128, 6))
    dev = reference_deviation("hart", "tiny", report)
    assert dev["reference_params"] == 1_445_918
    assert sum(dev["per_group_params"].values()) == report.total_params
    json.dumps(dev)
    assert ("mobilehart_xxs", None) in REFERENCE


def test_count_is_symbolic():
    # tracing never runs a forward pass, so uninitialized weights are fine
    model = build_model("vit", "tiny")
    with torch.no_grad():
        for p in model.parameters():
            p.fill_(float("nan"))
    assert count_flops(model, (128, 6)).total_flops > 0


# bench

def test_bench_single_run_and_fields():
    model = build_model("hart", "tiny", dim=48, depth=1, heads=2)
    report = bench_inference(model, (128, 6), runs=1, warmup=0)
    assert report.std_us == 0.0 and report.mean_us > 0 and report.runs == 1
    report = bench_inference(model, (128, 6), runs=20, warmup=3, threads=1)
    assert report.warmup == 3 and report.threads == 1 and report.peak_rss_kib > 0
    assert set(json.loads(report.to_json())) >= {"mean_us", "std_us", "runs", "warmup", "threads", "peak_rss_kib"}
    with pytest.raises(ValueError):
        bench_inference(model, (128, 6), runs=0)


def test_compare_latency_shape():
    models = {"a": build_model("hart", "tiny", dim=48, depth=1, heads=2),
              "b": build_model("vit", "tiny", dim=48, depth=1, heads=2)}
    out = compare_latency(models, (128, 6), repetitions=2, runs=5, warmup=1)
    assert set(out) == {"a", "b"} and len(out["a"]["repetitions"]) == 2
