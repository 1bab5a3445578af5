"""Command-line entry point: ``hart {synth,prepare,train,eval,count,bench,loso,embed}``.

Settings come from an INI file (``--config``, sections ``[data]``,
``[model]``, ``[train]``, ``[run]``), then from flags.  ``--set
section.key=value`` overrides any single entry.  Every command writes the
fully resolved configuration to ``<out>/config.ini``.

Exit codes: 0 success, 1 usage/config error, 2 data or I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .bench import bench_inference
from .cost import REFERENCE, count_flops, reference_deviation
from .models import ConfigError, build_from_config, make_config, model_header
from .models.config import MOBILE_VARIANTS
from .pipeline import (DataError, NormStats, WindowSet, load_manifest, load_windows, prepare, save_windows,
                       write_recording_csv)
from .protocols import export_embeddings, run_loso
from .rng import substream
from .synth import synthetic_recording
from .training import DivergenceError, TrainConfig, evaluate, fit

DEFAULTS = {
    "data": {"manifest": "", "archive": "", "window": "128", "overlap": "0.5", "split": "test"},
    "model": {"variant": "hart", "preset": "tiny"},
    "train": {"epochs": "200", "batch_size": "32", "lr": "0.0005", "label_smoothing": "0.1"},
    "run": {"seed": "0", "out": "out", "threads": "1", "deterministic": "false"},
}
SPLITS = ("train", "dev", "test")


class UsageError(ValueError):
    pass


# configuration

def _coerce(value: str):
    v = value.strip()
    low = v.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in v:
        return tuple(_coerce(p) for p in v.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def bundled_presets() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("hart.presets").iterdir() if p.name.endswith(".ini"))


def load_config(args) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            if args.config in bundled_presets():
                path = resources.files("hart.presets") / f"{args.config}.ini"
            else:
                raise UsageError(f"config file {args.config} not found (bundled presets: {bundled_presets()})")
        try:
            cp.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise UsageError(f"{path}: {exc}") from None
    flags = {
        ("run", "seed"): args.seed, ("run", "out"): args.out, ("run", "threads"): args.threads,
        ("model", "variant"): args.variant, ("model", "preset"): args.preset,
        ("data", "manifest"): getattr(args, "manifest", None), ("data", "archive"): getattr(args, "archive", None),
        ("data", "split"): getattr(args, "split", None),
    }
    for (section, key), value in flags.items():
        if value is not None:
            cp.set(section, key, str(value))
    if args.deterministic:
        cp.set("run", "deterministic", "true")
    for item in args.set or []:
        name, sep, value = item.partition("=")
        section, dot, key = name.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, value)
    return cp


def write_config(cp: configparser.ConfigParser, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.ini", "w") as fh:
        cp.write(fh)


def train_config(cp) -> TrainConfig:
    t = cp["train"]
    try:
        return TrainConfig(epochs=t.getint("epochs"), batch_size=t.getint("batch_size"), lr=t.getfloat("lr"),
                           label_smoothing=t.getfloat("label_smoothing"), seed=cp["run"].getint("seed"))
    except ValueError as exc:
        raise UsageError(f"[train]: {exc}") from None


def model_config(cp, dataset: dict | None = None):
    m = dict(cp["model"])
    variant, preset = m.pop("variant"), m.pop("preset")
    overrides = {k: _coerce(v) for k, v in m.items()}
    if dataset is not None:
        overrides.setdefault("sensors", len(dataset["sensors"]))
        overrides.setdefault("num_classes", len(dataset["labels"]))
        overrides.setdefault("window", dataset["window"])
    return make_config(variant, preset, **overrides)


def setup_runtime(cp) -> None:
    if cp["run"].getboolean("deterministic"):
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(cp["run"].getint("threads"))


# archive helpers

def archive_dir(cp) -> Path:
    a = cp["data"]["archive"]
    if not a:
        raise UsageError("no prepared archive given (use --archive or [data] archive)")
    return Path(a)


def load_dataset(cp) -> tuple[dict, dict[str, WindowSet]]:
    d = archive_dir(cp)
    meta_path = d / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"{meta_path}: not a prepared archive")
    meta = json.loads(meta_path.read_text())
    return meta, {s: load_windows(d, s) for s in SPLITS}


def load_checkpoint_for(cp, args, cfg):
    path = Path(args.checkpoint)
    header, tensors = ckpt.load_checkpoint(path)
    saved = header.get("meta", {}).get("model", {})
    expected = {"variant": cfg.variant, **cfg.to_dict()}
    got = {"variant": saved.get("variant"), **saved.get("config", {})}
    mismatched = sorted(k for k in set(expected) | set(got) if json.dumps(expected.get(k)) != json.dumps(got.get(k)))
    if mismatched:
        detail = ", ".join(f"{k}: config={expected.get(k)!r} checkpoint={got.get(k)!r}" for k in mismatched)
        raise UsageError(f"checkpoint {path} is incompatible with the configuration ({detail})")
    model = build_from_config(cfg, saved.get("seed", 0))
    ckpt.load_into(model, tensors)
    model.eval()
    return model


def dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# commands

def cmd_synth(cp, args) -> int:
    """Write a synthetic multi-participant, multi-position dataset and its manifest."""
    out = Path(cp["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed = cp["run"].getint("seed")
    gen = substream(seed, "synthetic/activity-order")
    labels = [f"activity{c}" for c in range(6)]
    files = []
    for p in range(args.participants):
        for pos in args.positions:
            acts = [int(a) for a in gen.permutation(6)]
            name = f"p{p}_{pos}.csv"
            rec = synthetic_recording(f"p{p}", acts, segment=args.segment, rate=args.rate, seed=seed,
                                      position=pos, device=args.device, name=name)
            write_recording_csv(out / name, rec)
            files.append({"path": name, "participant": f"p{p}", "position": pos, "device": args.device,
                          "rate": args.rate})
    manifest = {"files": files, "labels": labels, "sensors": ["accelerometer", "gyroscope"], "rate": 50}
    dump_json(out / "manifest.json", manifest)
    print(f"wrote {len(files)} recordings and {out / 'manifest.json'}")
    return 0


def cmd_prepare(cp, args) -> int:
    d = cp["data"]
    if not d["manifest"]:
        raise UsageError("no manifest given (use --manifest or [data] manifest)")
    out = Path(cp["run"]["out"])
    write_config(cp, out)
    manifest, recordings = load_manifest(d["manifest"])
    window, overlap = d.getint("window"), d.getfloat("overlap")
    splits, stats = prepare(manifest, recordings, window, overlap, seed=cp["run"].getint("seed"))
    for name, ws in splits.items():
        save_windows(out, ws, name)
    dataset = {"labels": manifest.labels, "sensors": list(manifest.layout.names), "rate": manifest.rate,
               "window": window, "overlap": overlap}
    dump_json(out / "dataset.json", dataset)
    dump_json(out / "norm_stats.json", stats.to_dict() if stats else None)
    summary = {"windows": {s: len(ws) for s, ws in splits.items()},
               "per_class": {s: np.bincount(ws.labels, minlength=len(manifest.labels)).tolist()
                             for s, ws in splits.items()}}
    dump_json(out / "summary.json", summary)
    print(f"{'split':<6} {'windows':>8}  per-class")
    for s in SPLITS:
        print(f"{s:<6} {summary['windows'][s]:>8}  {summary['per_class'][s]}")
    return 0


def cmd_train(cp, args) -> int:
    setup_runtime(cp)
    out = Path(cp["run"]["out"])
    meta, splits = load_dataset(cp)
    cfg = model_config(cp, meta)
    tcfg = train_config(cp)
    write_config(cp, out)
    model = build_from_config(cfg, tcfg.seed)
    num_classes = len(meta["labels"])

    def log(r):
        f1 = "-" if r["dev_macro_f1"] is None else f"{r['dev_macro_f1']:.4f}"
        print(f"epoch {r['epoch']:>4}  train_loss {r['train_loss']:.5f}  dev_macro_f1 {f1}", flush=True)

    history, _ = fit(model, splits["train"], splits["dev"], tcfg, num_classes, log=log)
    with open(out / "history.jsonl", "w") as fh:
        for r in history.records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    with open(out / "timing.jsonl", "w") as fh:
        for r in history.timings:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    ckpt.save_model(out / "model.ckpt", model, {
        "model": model_header(model), "best_epoch": history.best_epoch,
        "best_dev_macro_f1": history.best_dev_macro_f1, "labels": meta["labels"],
    })
    print(f"best epoch {history.best_epoch}; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(cp, args) -> int:
    setup_runtime(cp)
    out = Path(cp["run"]["out"])
    meta, splits = load_dataset(cp)
    cfg = model_config(cp, meta)
    write_config(cp, out)
    model = load_checkpoint_for(cp, args, cfg)
    split = cp["data"]["split"]
    if split not in SPLITS:
        raise UsageError(f"unknown split {split!r}; expected one of {SPLITS}")
    report = evaluate(model, splits[split], len(meta["labels"]))
    dump_json(out / "eval.json", {"split": split, **report.to_dict(), "labels": meta["labels"]})
    print(f"{'class':<20} {'precision':>9} {'recall':>9} {'f1':>9} {'support':>8}")
    for name, p, r, f, n in zip(meta["labels"], report.precision, report.recall, report.f1, report.support):
        print(f"{name:<20} {p:>9.4f} {r:>9.4f} {f:>9.4f} {n:>8}")
    print(f"macro-F1 ({split}): {report.macro_f1:.4f}")
    return 0


def cmd_count(cp, args) -> int:
    out = Path(cp["run"]["out"])
    cfg = model_config(cp)
    write_config(cp, out)
    model = build_from_config(cfg, cp["run"].getint("seed"))
    report = count_flops(model, (cfg.window, 3 * cfg.sensors))
    doc = {"variant": cfg.variant, "config": cfg.to_dict(), **report.to_dict()}
    preset = None if cfg.variant in MOBILE_VARIANTS else cp["model"]["preset"]
    defaults = cfg.sensors == 2 and cfg.num_classes == 6 and cfg.window == 128
    if defaults and ((cfg.variant, preset) in REFERENCE or (cfg.variant, None) in REFERENCE):
        doc["reference"] = reference_deviation(cfg.variant, preset, report)
    dump_json(out / "cost.json", doc)
    print(f"{'layer':<40} {'params':>12} {'FLOPs':>14}")
    for layer in dict.fromkeys(list(report.params) + list(report.flops)):
        print(f"{layer:<40} {report.params.get(layer, 0):>12,} {report.flops.get(layer, 0):>14,}")
    print(f"{'total':<40} {report.total_params:>12,} {report.total_flops:>14,}")
    print(f"convention: {report.convention}")
    if "reference" in doc:
        ref = doc["reference"]
        print(f"published: {ref['reference_params']:,} params ({ref['params_rel_dev']:+.2%}), "
              f"{ref['reference_flops']:,} FLOPs (this count {ref['flops_rel_dev']:+.2%})")
    return 0


def cmd_bench(cp, args) -> int:
    out = Path(cp["run"]["out"])
    cfg = model_config(cp)
    write_config(cp, out)
    model = build_from_config(cfg, cp["run"].getint("seed"))
    threads = 1 if cp["run"].getboolean("deterministic") else cp["run"].getint("threads")
    report = bench_inference(model, (cfg.window, 3 * cfg.sensors), runs=args.runs, warmup=args.warmup,
                             threads=threads, batch=args.batch, seed=cp["run"].getint("seed"))
    dump_json(out / "bench.json", {"variant": cfg.variant, **report.to_dict()})
    print(f"{cfg.variant}: {report.mean_us:.1f} ± {report.std_us:.1f} µs (median {report.median_us:.1f}) "
          f"over {report.runs} runs, {report.warmup} warmup, {report.threads} thread(s), "
          f"peak RSS {report.peak_rss_kib} KiB")
    return 0


def cmd_loso(cp, args) -> int:
    setup_runtime(cp)
    out = Path(cp["run"]["out"])
    meta, splits = load_dataset(cp)
    cfg = model_config(cp, meta)
    tcfg = train_config(cp)
    write_config(cp, out)
    allw = WindowSet.concat([splits[s] for s in SPLITS], meta["window"], 3 * len(meta["sensors"]))
    stats_path = archive_dir(cp) / "norm_stats.json"
    if stats_path.exists() and json.loads(stats_path.read_text()):
        # undo the archive normalization; each fold refits on its own training groups
        stats = NormStats.from_dict(json.loads(stats_path.read_text()))
        allw = WindowSet((allw.data * stats.std + stats.mean).astype(np.float32), allw.labels, allw.provenance)
    report = run_loso(allw, args.group_key, lambda: build_from_config(cfg, tcfg.seed), tcfg, len(meta["labels"]))
    dump_json(out / "loso.json", report.to_dict())
    print(report.table())
    return 0


def cmd_embed(cp, args) -> int:
    setup_runtime(cp)
    out = Path(cp["run"]["out"])
    meta, splits = load_dataset(cp)
    cfg = model_config(cp, meta)
    write_config(cp, out)
    model = load_checkpoint_for(cp, args, cfg)
    split = cp["data"]["split"]
    if split not in SPLITS:
        raise UsageError(f"unknown split {split!r}; expected one of {SPLITS}")
    path = out / f"embeddings_{split}.{'csv' if args.format == 'csv' else 'bin'}"
    n = export_embeddings(model, splits[split], path, args.layer, args.format)
    print(f"wrote {n} rows to {path}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "count": cmd_count,
    "bench": cmd_bench, "loso": cmd_loso, "embed": cmd_embed,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file or bundled preset name")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant")
    common.add_argument("--preset", choices=("tiny", "small", "base"))
    common.add_argument("--threads", type=int)
    common.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config entry")

    parser = argparse.ArgumentParser(prog="hart", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset + manifest")
    p.add_argument("--participants", type=int, default=3)
    p.add_argument("--positions", nargs="+", default=["wrist", "waist"])
    p.add_argument("--device", default="synthetic")
    p.add_argument("--segment", type=int, default=1024, help="samples per activity segment")
    p.add_argument("--rate", type=float, default=100.0, help="recording rate in Hz")
    p = sub.add_parser("prepare", parents=[common], help="resample, window, split, normalize")
    p.add_argument("--manifest")
    for name in ("train", "loso"):
        p = sub.add_parser(name, parents=[common], help=f"{name} on a prepared archive")
        p.add_argument("--archive")
        if name == "loso":
            p.add_argument("--group-key", default="position", choices=("position", "device", "participant"))
    for name in ("eval", "embed"):
        p = sub.add_parser(name, parents=[common], help=f"{name} with a trained checkpoint")
        p.add_argument("--archive")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=SPLITS)
        if name == "embed":
            p.add_argument("--layer", default="gap_output", choices=("gap_output", "gap_input"))
            p.add_argument("--format", default="csv", choices=("csv", "bin"))
    sub.add_parser("count", parents=[common], help="parameter and FLOP report")
    p = sub.add_parser("bench", parents=[common], help="inference latency benchmark")
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--batch", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cp = load_config(args)
        return COMMANDS[args.command](cp, args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, ckpt.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, configparser.Error, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
