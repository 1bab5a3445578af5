"""Binary checkpoint format.

Layout::

    b"HARTCKPT"            8 bytes magic
    version                uint32 little-endian
    header length          uint64 little-endian
    header                 UTF-8 JSON: {"meta": {...}, "tensors": [{name, shape, dtype, kind}, ...]}
    payloads               raw little-endian float32, one per manifest entry, in manifest order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"HARTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def model_tensors(model: torch.nn.Module) -> list[tuple[str, torch.Tensor, str]]:
    params = [(n, p.detach(), "param") for n, p in model.named_parameters()]
    buffers = [(n, b.detach(), "buffer") for n, b in model.named_buffers()]
    return params + buffers


def save_checkpoint(path: str | Path, tensors: list[tuple[str, torch.Tensor, str]], meta: dict | None = None) -> None:
    entries = []
    payloads = []
    for name, t, kind in tensors:
        arr = np.ascontiguousarray(t.cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "kind": kind})
        payloads.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(n).decode())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        tensors = {}
        for entry in header["tensors"]:
            if entry["dtype"] != "float32":
                raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']} for {entry['name']}")
            count = int(np.prod(entry["shape"], dtype=np.int64))
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last payload")
    return header, tensors


def save_model(path: str | Path, model: torch.nn.Module, meta: dict | None = None) -> None:
    save_checkpoint(path, model_tensors(model), meta)


def load_into(model: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    expected = {name: (t, kind) for name, t, kind in model_tensors(model)}
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing={missing} unexpected={extra}")
    with torch.no_grad():
        for name, (t, _) in expected.items():
            src = tensors[name]
            if tuple(src.shape) != tuple(t.shape):
                raise CheckpointError(f"shape mismatch for {name}: {src.shape} vs {tuple(t.shape)}")
            t.copy_(torch.from_numpy(src).to(t.dtype))


def manifest_param_count(path: str | Path) -> int:
    """Sum of element counts over the manifest's parameter entries (payloads are not read)."""
    header = read_header(path)
    return sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["tensors"] if e["kind"] == "param")
