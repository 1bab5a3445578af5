"""Recordings -> resampled, windowed, split and normalized training material.

Recordings are ``(T, 3*S)`` arrays ordered by a :class:`SensorLayout` with one
activity id per sample.  Window sets hold ``(M, W, 3*S)`` float32 arrays plus
per-window labels and provenance, and can be written to a window archive
(``windows.bin`` + ``index.json``).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

STOPBAND_DB = 80.0
CUTOFF_FRACTION = 0.9  # of the new Nyquist frequency
GROUP_KEYS = ("position", "device", "participant")


class DataError(ValueError):
    """Invalid or inconsistent input data."""


@dataclass(frozen=True)
class SensorLayout:
    names: tuple[str, ...] = ("accelerometer", "gyroscope")

    def __post_init__(self):
        if len(self.names) < 1:
            raise DataError("a sensor layout needs at least one sensor")
        if len(set(self.names)) != len(self.names):
            raise DataError(f"duplicate sensor names in {self.names}")

    @property
    def sensors(self) -> int:
        return len(self.names)

    @property
    def channels(self) -> int:
        return 3 * len(self.names)


@dataclass
class Recording:
    sample_rate: float
    channels: np.ndarray  # (T, 3*S)
    labels: np.ndarray  # (T,)
    participant: str
    position: str | None = None
    device: str | None = None
    name: str = ""

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.sample_rate > 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        if self.channels.ndim != 2 or self.channels.shape[1] % 3:
            raise DataError(f"recording {self.name!r}: channels must be (T, 3*S), got {self.channels.shape}")
        if self.labels.shape != (self.channels.shape[0],):
            raise DataError(f"recording {self.name!r}: {self.labels.size} labels for {self.channels.shape[0]} samples")

    def __len__(self):
        return self.channels.shape[0]


@dataclass(frozen=True)
class Provenance:
    participant: str
    position: str | None
    device: str | None
    recording: str
    start: int


@dataclass
class SensorWindow:
    data: np.ndarray  # (W, 3*S)
    label: int
    provenance: Provenance


@dataclass
class WindowSet:
    data: np.ndarray  # (M, W, 3*S) float32
    labels: np.ndarray  # (M,) int64
    provenance: list[Provenance] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 3:
            raise DataError(f"window data must be (M, W, C), got {self.data.shape}")
        if not (len(self.labels) == len(self.provenance) == self.data.shape[0]):
            raise DataError("window data, labels and provenance differ in length")

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, i: int) -> SensorWindow:
        return SensorWindow(self.data[i], int(self.labels[i]), self.provenance[i])

    @classmethod
    def empty(cls, window: int, channels: int) -> "WindowSet":
        return cls(np.zeros((0, window, channels), np.float32), np.zeros(0, np.int64), [])

    def subset(self, indices) -> "WindowSet":
        idx = np.asarray(indices, dtype=np.int64)
        return WindowSet(self.data[idx], self.labels[idx], [self.provenance[i] for i in idx])

    @staticmethod
    def concat(parts: list["WindowSet"], window: int, channels: int) -> "WindowSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return WindowSet.empty(window, channels)
        return WindowSet(
            np.concatenate([p.data for p in parts]),
            np.concatenate([p.labels for p in parts]),
            [prov for p in parts for prov in p.provenance],
        )


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    scope: str = "train"

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "scope": self.scope}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64), d.get("scope", "train"))


def anti_alias_filter(source_hz: float, target_hz: float) -> np.ndarray:
    """Kaiser-window low-pass FIR taps; the transition band is centred on the cutoff and ends at the new Nyquist."""
    nyq_new = target_hz / 2.0
    cutoff = CUTOFF_FRACTION * nyq_new
    width = 2.0 * (nyq_new - cutoff)
    numtaps, beta = signal.kaiserord(STOPBAND_DB, width / (source_hz / 2.0))
    numtaps |= 1  # odd length keeps the filter type I (zero phase after filtfilt)
    return signal.firwin(numtaps, cutoff, window=("kaiser", beta), fs=source_hz)


def resample(rec: Recording, target_hz: float) -> Recording:
    """Low-pass filter forward-backward, then decimate or interpolate to ``target_hz``."""
    if not target_hz > 0:
        raise DataError(f"target rate must be positive, got {target_hz}")
    src = float(rec.sample_rate)
    if target_hz > src:
        raise DataError(f"upsampling from {src} Hz to {target_hz} Hz is not supported")
    if target_hz == src:
        return rec
    x = rec.channels
    t = len(rec)
    if t > 1:
        taps = anti_alias_filter(src, target_hz)
        x = signal.filtfilt(taps, [1.0], x, axis=0, padlen=min(3 * len(taps), t - 1))
    n_out = int(math.floor((t - 1) * target_hz / src + 1e-9)) + 1 if t else 0
    pos = np.arange(n_out) * (src / target_hz)
    step = src / target_hz
    if abs(step - round(step)) < 1e-9:
        idx = np.arange(n_out) * int(round(step))
        y = x[idx]
    else:
        base = np.arange(t)
        y = np.stack([np.interp(pos, base, x[:, c]) for c in range(x.shape[1])], axis=1) if t else x[:0]
    nearest = np.clip(np.floor(pos + 0.5).astype(np.int64), 0, max(t - 1, 0))
    labels = rec.labels[nearest] if t else rec.labels[:0]
    return Recording(target_hz, y, labels, rec.participant, rec.position, rec.device, rec.name)


def window_stride(window: int, overlap: float) -> int:
    if not 0.0 <= overlap < 1.0:
        raise DataError(f"overlap must be in [0, 1), got {overlap}")
    stride = int(math.floor(window * (1.0 - overlap)))
    if stride < 1:
        raise DataError(f"window {window} with overlap {overlap} gives a stride below 1")
    return stride


def window_count(length: int, window: int, overlap: float) -> int:
    """Number of window positions before label filtering."""
    if length < window:
        return 0
    return (length - window) // window_stride(window, overlap) + 1


def majority_label(labels: np.ndarray) -> int | None:
    """The label held by at least half of the samples, or None if there is no single one."""
    values, counts = np.unique(labels, return_counts=True)
    order = np.argsort(-counts, kind="stable")
    top = counts[order[0]]
    if 2 * top < labels.size or (len(order) > 1 and counts[order[1]] == top):
        return None
    return int(values[order[0]])


def make_windows(rec: Recording, window: int = 128, overlap: float = 0.5) -> WindowSet:
    if window < 1:
        raise DataError(f"window length must be positive, got {window}")
    stride = window_stride(window, overlap)
    n = window_count(len(rec), window, overlap)
    data, labels, prov = [], [], []
    for i in range(n):
        start = i * stride
        label = majority_label(rec.labels[start:start + window])
        if label is None:
            continue
        data.append(rec.channels[start:start + window])
        labels.append(label)
        prov.append(Provenance(rec.participant, rec.position, rec.device, rec.name, start))
    if not data:
        return WindowSet.empty(window, rec.channels.shape[1])
    return WindowSet(np.stack(data), np.asarray(labels), prov)


def fit_norm_stats(windows: WindowSet | np.ndarray, scope: str = "train") -> NormStats:
    """Per-channel mean and population standard deviation over every sample of every window."""
    data = windows.data if isinstance(windows, WindowSet) else np.asarray(windows)
    flat = data.reshape(-1, data.shape[-1]).astype(np.float64)
    if flat.shape[0] < 2:
        raise DataError(f"need at least 2 samples per channel to fit normalization, got {flat.shape[0]}")
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    for c, s in enumerate(std):
        if not s > 0:
            raise DataError(f"channel {c} has zero variance")
    return NormStats(mean, std, scope)


def apply_norm(windows: WindowSet | np.ndarray, stats: NormStats):
    if stats.scope != "train":
        raise DataError(f"normalization statistics must be fit on the train split, these were fit on {stats.scope!r}")
    if isinstance(windows, WindowSet):
        return WindowSet(apply_norm(windows.data, stats), windows.labels, windows.provenance)
    data = np.asarray(windows)
    if data.shape[-1] != stats.mean.size:
        raise DataError(f"{data.shape[-1]} channels but statistics for {stats.mean.size}")
    return ((data - stats.mean) / stats.std).astype(np.float32)


def activity_runs(windows: WindowSet) -> list[list[int]]:
    """Window indices grouped into chronological runs of one activity within one recording."""
    order = sorted(range(len(windows)),
                   key=lambda i: (windows.provenance[i].participant, windows.provenance[i].recording,
                                  windows.provenance[i].start))
    runs: list[list[int]] = []
    prev = None
    for i in order:
        p = windows.provenance[i]
        key = (p.participant, p.recording, int(windows.labels[i]))
        if key != prev:
            runs.append([])
            prev = key
        runs[-1].append(i)
    return runs


def split_by_participant(windows: WindowSet, fractions=(0.7, 0.1, 0.2), seed: int = 0,
                         min_participants: int = 1) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Chronological train/dev/test split inside every participant's activity runs.

    Each run of ``n`` windows is cut at ``round(n * f1)`` and
    ``round(n * (f1 + f2))``.  The rule consumes no randomness, so ``seed``
    cannot change the partition; it is accepted so callers can treat every
    split routine alike.
    """
    del seed
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    participants = {p.participant for p in windows.provenance}
    if len(participants) < min_participants:
        raise DataError(f"need at least {min_participants} participants, got {len(participants)}")
    parts: list[list[int]] = [[], [], []]
    c1, c2 = fractions[0], fractions[0] + fractions[1]
    for run in activity_runs(windows):
        n = len(run)
        b1, b2 = int(round(n * c1)), int(round(n * c2))
        parts[0] += run[:b1]
        parts[1] += run[b1:b2]
        parts[2] += run[b2:]
    return tuple(windows.subset(sorted(p)) for p in parts)


def class_weights(labels, num_classes: int, names: list[str] | None = None) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    if counts.size > num_classes:
        raise DataError(f"label {counts.size - 1} outside the {num_classes}-class vocabulary")
    for c, n in enumerate(counts):
        if n == 0:
            raise DataError(f"class {names[c] if names else c} has no examples")
    return counts.sum() / (num_classes * counts.astype(np.float64))


def leave_one_group_out(windows: WindowSet, group_key: str = "position") -> list[tuple[WindowSet, WindowSet, str]]:
    if group_key not in GROUP_KEYS:
        raise DataError(f"unknown group key {group_key!r}; expected one of {GROUP_KEYS}")
    groups = [getattr(p, group_key) for p in windows.provenance]
    if any(g is None for g in groups):
        raise DataError(f"some windows have no {group_key} metadata")
    values = sorted(set(groups))
    if len(values) < 2:
        raise DataError(f"need at least 2 distinct {group_key} values, got {len(values)}")
    folds = []
    for held in values:
        test = [i for i, g in enumerate(groups) if g == held]
        train = [i for i, g in enumerate(groups) if g != held]
        folds.append((windows.subset(train), windows.subset(test), held))
    return folds


# manifest and file formats

@dataclass
class ManifestEntry:
    path: str
    participant: str
    rate: float
    position: str | None = None
    device: str | None = None


@dataclass
class DatasetManifest:
    files: list[ManifestEntry]
    labels: list[str]
    layout: SensorLayout
    rate: float  # target rate in Hz
    root: str = "."

    def to_dict(self) -> dict:
        return {
            "files": [{k: v for k, v in asdict(e).items() if v is not None} for e in self.files],
            "labels": list(self.labels),
            "sensors": list(self.layout.names),
            "rate": self.rate,
        }


def _parse_label(token: str, vocab: list[str], where: str) -> int:
    token = token.strip()
    try:
        idx = int(token)
    except ValueError:
        if token in vocab:
            return vocab.index(token)
        raise DataError(f"{where}: unknown label {token!r}") from None
    if not 0 <= idx < len(vocab):
        raise DataError(f"{where}: label id {idx} outside vocabulary of {len(vocab)}")
    return idx


def read_recording_csv(path: Path, channels: int, vocab: list[str]) -> tuple[np.ndarray, np.ndarray]:
    rows, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and not _is_number(row[0])):
                continue  # blank line or header
            if len(row) != channels + 1:
                raise DataError(f"{path}:{lineno}: expected {channels} channels + label, got {len(row)} fields")
            try:
                rows.append([float(v) for v in row[:channels]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            labels.append(_parse_label(row[channels], vocab, f"{path}:{lineno}"))
    return np.asarray(rows, np.float64).reshape(-1, channels), np.asarray(labels, np.int64)


def read_recording_f32(path: Path, channels: int, vocab: list[str]) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % (channels + 1):
        raise DataError(f"{path}: {raw.size} values is not a multiple of {channels} channels + label")
    table = raw.reshape(-1, channels + 1)
    labels = table[:, channels].astype(np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= len(vocab)) | (table[:, channels] != labels))
    if bad.size:
        raise DataError(f"{path}: row {bad[0] + 1}: invalid label {table[bad[0], channels]}")
    return table[:, :channels].astype(np.float64), labels


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_recording_csv(path: str | os.PathLike, rec: Recording) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row, label in zip(rec.channels, rec.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def write_recording_f32(path: str | os.PathLike, rec: Recording) -> None:
    table = np.concatenate([rec.channels, rec.labels[:, None].astype(np.float64)], axis=1)
    table.astype("<f4").tofile(path)


def load_manifest(path: str | os.PathLike) -> tuple[DatasetManifest, list[Recording]]:
    """Parse a JSON manifest and load every recording it lists.

    Manifest fields: ``files`` (list of ``{path, participant, rate?, position?,
    device?}``), ``labels`` (vocabulary), ``sensors`` (names in channel order),
    ``rate`` (target rate, Hz; also the default source rate).  Recording files
    are CSV (channels then label, optional header row) or little-endian
    float32 rows with the suffix ``.f32``; relative paths resolve against the
    manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: {exc.msg}") from None
    for key in ("labels", "sensors", "rate"):
        if key not in doc:
            raise DataError(f"{path}: manifest is missing {key!r}")
    layout = SensorLayout(tuple(doc["sensors"]))
    vocab = [str(v) for v in doc["labels"]]
    entries = []
    for i, f in enumerate(doc.get("files", [])):
        if "path" not in f or "participant" not in f:
            raise DataError(f"{path}: files[{i}] needs 'path' and 'participant'")
        entries.append(ManifestEntry(f["path"], str(f["participant"]), float(f.get("rate", doc["rate"])),
                                     f.get("position"), f.get("device")))
    manifest = DatasetManifest(entries, vocab, layout, float(doc["rate"]), str(path.parent))
    recordings = []
    for e in entries:
        fp = (path.parent / e.path) if not os.path.isabs(e.path) else Path(e.path)
        if not fp.exists():
            raise DataError(f"{fp}: recording file not found (listed in {path})")
        reader = read_recording_f32 if fp.suffix == ".f32" else read_recording_csv
        x, y = reader(fp, layout.channels, vocab)
        recordings.append(Recording(e.rate, x, y, e.participant, e.position, e.device, e.path))
    return manifest, recordings


def save_windows(directory: str | os.PathLike, windows: WindowSet, name: str = "windows") -> None:
    """Write ``<name>.bin`` (little-endian float32, ``(M, W, C)``) and ``<name>.json`` (shape, labels, provenance)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    windows.data.astype("<f4").tofile(d / f"{name}.bin")
    index = {
        "shape": list(windows.data.shape),
        "labels": windows.labels.tolist(),
        "provenance": [asdict(p) for p in windows.provenance],
    }
    (d / f"{name}.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def load_windows(directory: str | os.PathLike, name: str = "windows") -> WindowSet:
    d = Path(directory)
    index_path = d / f"{name}.json"
    if not index_path.exists():
        raise DataError(f"{index_path}: window index not found")
    index = json.loads(index_path.read_text())
    shape = tuple(index["shape"])
    data = np.fromfile(d / f"{name}.bin", dtype="<f4")
    if data.size != math.prod(shape):
        raise DataError(f"{d / (name + '.bin')}: {data.size} values, index expects shape {shape}")
    prov = [Provenance(**p) for p in index["provenance"]]
    return WindowSet(data.reshape(shape), np.asarray(index["labels"], np.int64), prov)


def prepare(manifest: DatasetManifest, recordings: list[Recording], window: int = 128, overlap: float = 0.5,
            fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Resample, window, split and normalize.  Returns ``({split: WindowSet}, NormStats | None)``."""
    c = manifest.layout.channels
    sets = [make_windows(resample(r, manifest.rate), window, overlap) for r in recordings]
    allw = WindowSet.concat(sets, window, c)
    if len(allw) == 0:
        empty = WindowSet.empty(window, c)
        return {"train": empty, "dev": empty, "test": empty}, None
    train, dev, test = split_by_participant(allw, fractions, seed)
    stats = fit_norm_stats(train)
    return {"train": apply_norm(train, stats), "dev": apply_norm(dev, stats), "test": apply_norm(test, stats)}, stats
