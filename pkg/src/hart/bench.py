"""Host-side inference latency and memory benchmark."""

from __future__ import annotations

import json
import resource
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .rng import substream


@dataclass
class BenchReport:
    mean_us: float
    std_us: float
    median_us: float
    runs: int
    warmup: int
    threads: int
    batch: int
    input_shape: list[int]
    peak_rss_kib: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _peak_rss_kib() -> int:
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)  # KiB on Linux


def bench_inference(model: nn.Module, input_shape: tuple[int, ...], runs: int = 1000, warmup: int = 50,
                    threads: int = 1, batch: int = 1, seed: int = 0) -> BenchReport:
    """Time ``runs`` eval-mode forwards on one fixed random input; ``warmup`` earlier runs are discarded."""
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    x = torch.from_numpy(substream(seed, "bench").standard_normal((batch, *input_shape)).astype(np.float32))
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(threads)
    was_training = model.training
    model.eval()
    times = []
    try:
        with torch.inference_mode():
            for _ in range(warmup):
                model(x)
            for _ in range(runs):
                t0 = time.perf_counter_ns()
                model(x)
                times.append((time.perf_counter_ns() - t0) / 1e3)
    finally:
        model.train(was_training)
        torch.set_num_threads(prev_threads)
    return BenchReport(
        mean_us=statistics.fmean(times),
        std_us=statistics.pstdev(times) if runs > 1 else 0.0,
        median_us=statistics.median(times),
        runs=runs,
        warmup=warmup,
        threads=threads,
        batch=batch,
        input_shape=list(input_shape),
        peak_rss_kib=_peak_rss_kib(),
    )


def compare_latency(models: dict[str, nn.Module], input_shape: tuple[int, ...], repetitions: int = 3,
                    **bench_kwargs) -> dict:
    """Interleaved repetitions per model; summary is the median over repetitions of each run's median latency."""
    reports: dict[str, list[BenchReport]] = {name: [] for name in models}
    for _ in range(repetitions):
        for name, model in models.items():
            reports[name].append(bench_inference(model, input_shape, **bench_kwargs))
    return {
        name: {
            "median_of_medians_us": statistics.median(r.median_us for r in reps),
            "median_of_means_us": statistics.median(r.mean_us for r in reps),
            "repetitions": [r.to_dict() for r in reps],
        }
        for name, reps in reports.items()
    }
