"""Synthetic IMU-like data with class-specific per-sensor signatures."""

from __future__ import annotations

import numpy as np

from .pipeline import Provenance, Recording, WindowSet
from .rng import substream


def class_signature(c: int, s: int, num_classes: int) -> tuple[float, float]:
    """(frequency in Hz, amplitude) of class ``c`` on sensor ``s``."""
    freq = 0.6 + 0.9 * ((c + 2 * s) % num_classes)
    amp = 0.5 + 0.5 * ((c * (s + 1)) % 3)
    return freq, amp


def _signal(gen: np.random.Generator, label: int, length: int, sensors: int, num_classes: int,
            rate: float, noise: float) -> np.ndarray:
    t = np.arange(length) / rate
    cols = []
    for s in range(sensors):
        freq, amp = class_signature(label, s, num_classes)
        freq *= gen.uniform(0.95, 1.05)
        amp *= gen.uniform(0.9, 1.1)
        phase = gen.uniform(0, 2 * np.pi)
        for axis in range(3):
            cols.append(amp * (1.0 - 0.25 * axis) * np.sin(2 * np.pi * freq * t + phase + axis * np.pi / 3))
    x = np.stack(cols, axis=1)
    return x + noise * gen.standard_normal(x.shape)


def synthetic_windows(n: int, num_classes: int = 6, sensors: int = 2, window: int = 128, rate: float = 50.0,
                      noise: float = 0.3, seed: int = 0, participant: str = "synthetic") -> WindowSet:
    """``n`` balanced, shuffled windows of shape ``(window, 3 * sensors)``."""
    gen = substream(seed, "synthetic/windows")
    labels = gen.permutation(np.arange(n) % num_classes)
    data = np.stack([_signal(gen, int(y), window, sensors, num_classes, rate, noise) for y in labels]) \
        if n else np.zeros((0, window, 3 * sensors))
    prov = [Provenance(participant, None, None, f"synthetic-{seed}", i * window) for i in range(n)]
    return WindowSet(data, labels, prov)


def synthetic_recording(participant: str, activities: list[int], segment: int = 512, sensors: int = 2,
                        num_classes: int = 6, rate: float = 50.0, noise: float = 0.3, seed: int = 0,
                        position: str | None = None, device: str | None = None, name: str = "") -> Recording:
    """One continuous recording made of consecutive activity segments of ``segment`` samples."""
    gen = substream(seed, f"synthetic/recording/{participant}/{name}")
    parts = [_signal(gen, a, segment, sensors, num_classes, rate, noise) for a in activities]
    labels = np.repeat(np.asarray(activities, dtype=np.int64), segment)
    x = np.concatenate(parts) if parts else np.zeros((0, 3 * sensors))
    return Recording(rate, x, labels, participant, position, device, name or participant)
