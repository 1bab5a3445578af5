"""Leave-one-group-out evaluation and embedding export."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .pipeline import WindowSet, apply_norm, fit_norm_stats, leave_one_group_out
from .training import TrainConfig, evaluate, fit


@dataclass
class LosoReport:
    group_key: str
    rows: list[dict] = field(default_factory=list)  # {group, macro_f1, train_windows, test_windows}

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = [f"{'held-out ' + self.group_key:<24} {'macro-F1':>9} {'train':>7} {'test':>7}"]
        for r in self.rows:
            lines.append(f"{r['group']:<24} {r['macro_f1']:>9.4f} {r['train_windows']:>7} {r['test_windows']:>7}")
        return "\n".join(lines)


def run_loso(windows: WindowSet, group_key: str, model_factory: Callable[[], nn.Module], tcfg: TrainConfig,
             num_classes: int, normalize: bool = True) -> LosoReport:
    """One fold per group value: a fresh model trained on the others, scored on the held-out group.

    With ``normalize`` the z-normalization statistics are refit on each
    training fold, so the held-out group never informs them.
    """
    report = LosoReport(group_key)
    for train, test, group in leave_one_group_out(windows, group_key):
        if normalize:
            stats = fit_norm_stats(train)
            train, test = apply_norm(train, stats), apply_norm(test, stats)
        model = model_factory()
        fit(model, train, None, tcfg, num_classes)
        score = evaluate(model, test, num_classes).macro_f1
        report.rows.append({"group": group, "macro_f1": score, "train_windows": len(train),
                            "test_windows": len(test)})
    return report


PROVENANCE_FIELDS = ("participant", "position", "device", "recording", "start")


@torch.no_grad()
def compute_embeddings(model: nn.Module, windows: WindowSet, layer: str = "gap_output",
                       batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        x = torch.from_numpy(windows.data)
        parts = [model.features(x[i:i + batch_size], layer) for i in range(0, len(x), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(parts).numpy().astype(np.float32) if parts else np.zeros((0, 0), np.float32)


def export_embeddings(model: nn.Module, windows: WindowSet, path: str | os.PathLike, layer: str = "gap_output",
                      fmt: str = "csv") -> int:
    """Write one row per window and return the row count.

    ``csv``: header ``label,participant,position,device,recording,start,e0..e{D-1}``;
    values use the shortest repr that round-trips the float32 value.
    ``bin``: ``path`` holds little-endian float32 ``(M, D)`` and
    ``path + ".json"`` the shape, labels and provenance.
    """
    emb = compute_embeddings(model, windows, layer)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        width = emb.shape[1] if emb.size else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", *PROVENANCE_FIELDS, *(f"e{j}" for j in range(width))])
            for row, label, prov in zip(emb, windows.labels, windows.provenance):
                meta = ["" if getattr(prov, f) is None else getattr(prov, f) for f in PROVENANCE_FIELDS]
                w.writerow([int(label), *meta, *(repr(float(np.float32(v))) for v in row)])
    elif fmt == "bin":
        emb.astype("<f4").tofile(path)
        index = {"shape": list(emb.shape), "layer": layer, "labels": windows.labels.tolist(),
                 "provenance": [asdict(p) for p in windows.provenance]}
        Path(str(path) + ".json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    else:
        raise ValueError(f"unknown embedding format {fmt!r}; expected csv or bin")
    return len(emb)
