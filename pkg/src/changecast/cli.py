"""Command-line entry point: synth, derive, train-*, eval, plot.

Every command writes a `manifest.json` next to its outputs. Configuration
comes from an optional JSON file, then `--set key=value` overrides (dotted
keys reach nested fields), then dedicated flags, which win.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .dataset import FORECAST_RANGES, PairSet, SynthConfig, make_split, month_diff, synth_generate
from .dataset import store
from .dataset.pairs import ArchiveSet
from .evaluation import EvalReport, emit_plots, plot_reference, pr_curve
from .network import load_bundle
from .thresholding import ThresholdTracker
from .training import TrainConfig, TrainingDiverged, evaluate, run_manifest, train_stage1, train_stage2

log = logging.getLogger("changecast")

DATA_ENV = "CHANGECAST_DATA"


class CLIError(Exception):
    """User-facing error: printed without a traceback, exit code 2."""


# ---------------------------------------------------------------- config plumbing

def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise CLIError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(base: dict, overrides) -> dict:
    out = json.loads(json.dumps(base))
    for text in overrides or ():
        path, value = parse_override(text)
        node = out
        for k in path[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise CLIError(f"override {text!r}: {k} is not a nested section")
        node[path[-1]] = value
    return out


def load_config(path) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CLIError(f"cannot read config {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise CLIError(f"config {path} must hold a JSON object")
    return cfg


def _data_root(arg) -> Path:
    root = arg or os.environ.get(DATA_ENV)
    if not root:
        raise CLIError(f"no data root: pass --data or set {DATA_ENV}")
    return Path(root)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str)


def write_manifest(out_dir, command: str, args: argparse.Namespace, record: dict) -> Path:
    path = Path(out_dir) / "manifest.json"
    body = {"command": command, "version": __version__,
            "args": {k: v for k, v in vars(args).items() if k != "func"},
            **record, "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(body))
    return path


def _ranges(text) -> list[int]:
    if text is None:
        return list(FORECAST_RANGES)
    try:
        out = sorted({int(x) for x in str(text).split(",") if x.strip()})
    except ValueError as e:
        raise CLIError(f"bad --ranges {text!r}") from e
    if not out or out[0] < 1:
        raise CLIError("ranges must be positive month gaps")
    return out


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    raw = apply_overrides(load_config(args.config), args.set)
    known = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(raw) - known
    if unknown:
        raise CLIError(f"unknown synth config keys: {sorted(unknown)}")
    for k in ("building_size", "site_margin", "continents"):
        if k in raw:
            raw[k] = tuple(raw[k])
    try:
        cfg = SynthConfig(**raw).validate()
    except (TypeError, ValueError) as e:
        raise CLIError(str(e)) from e
    out = Path(args.out)
    world = synth_generate(cfg, seed=args.seed)
    for s in world:
        store.write_location(s, out)
    (out / "synth_config.json").write_text(_dump(cfg.to_json()))
    write_manifest(out, "synth", args, {"config": cfg.to_json(), "seed": args.seed,
                                        "locations": [s.location_id for s in world]})
    log.info("wrote %d synthetic locations to %s", len(world), out)
    return 0


# ---------------------------------------------------------------- derive

STATS_HEADER = ("range", "n_pairs", "n_patches", "n_changed_pixels", "change_percent", "n_train", "n_val", "n_test")


def cmd_derive(args) -> int:
    root = _data_root(args.root)
    out = Path(args.out)
    ranges = _ranges(args.ranges)
    loc_dirs = store.list_locations(root)
    if not loc_dirs:
        raise CLIError(f"no locations (*/index.json) under {root}")

    errors, indexed = {}, []
    for d in loc_dirs:
        try:
            idx = store.read_index(d)
            indexed.append((d, idx["location_id"], idx.get("continent", "unknown")))
        except store.IndexFileError as e:
            errors[d.name] = str(e)
    if len(indexed) < 5:
        raise CLIError(f"only {len(indexed)} readable locations; a split needs at least 5 ({errors})")
    split = make_split([(loc, cont) for _, loc, cont in indexed], seed=args.seed)
    split.save(out / "split_manifest.json")

    stats = {r: {"pairs": 0, "n": 0, "changed": 0, "pixels": 0, "train": 0, "val": 0, "test": 0} for r in ranges}
    for d, loc, _ in indexed:
        try:
            series = store.read_location(d)
        except store.IndexFileError as e:
            errors[d.name] = str(e)
            continue
        part = split.assignment[loc]
        buckets = PairSet([series], ranges, args.patch_size)
        for i0, i1 in {(ref.i0, ref.i1) for ref in buckets.refs}:
            stats[month_diff(series.timestamps[i0], series.timestamps[i1])]["pairs"] += 1
        for i in range(len(buckets)):
            s = buckets[i]
            store.write_patch(s, out / "pairs" / f"r{s.delta_months}" / part)
            st = stats[s.delta_months]
            st["n"] += 1
            st[part] += 1
            st["changed"] += s.n_change
            st["pixels"] += s.change_mask.size
        if args.all_pairs:
            every = PairSet([series], None, args.patch_size)
            for i in range(len(every)):
                store.write_patch(every[i], out / "all" / part)
        log.info("derived %s (%s)", loc, part)

    # both the date-pair count and the patch count per bucket are reported
    rows = [(r, st["pairs"], st["n"], st["changed"], 100.0 * st["changed"] / st["pixels"] if st["pixels"] else 0.0,
             st["train"], st["val"], st["test"]) for r, st in sorted(stats.items())]
    with (out / "bucket_stats.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(STATS_HEADER)
        w.writerows(rows)
    write_manifest(out, "derive", args, {"seed": args.seed, "ranges": ranges, "split": split.counts(),
                                         "bucket_stats": [dict(zip(STATS_HEADER, r)) for r in rows],
                                         "errors": errors})
    if errors:
        for name, msg in sorted(errors.items()):
            print(f"error: {name}: {msg}", file=sys.stderr)
        print(f"derive finished with {len(errors)} failed location(s)", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- training

def _bucket_dir(data: Path, r: int, part: str) -> Path:
    d = data / "pairs" / f"r{r}" / part
    if not d.is_dir() or not any(d.glob("*.npz")):
        raise CLIError(f"no derived data for range {r} ({part} split): {d} is missing or empty; "
                       f"run derive with --ranges including {r}")
    return d


def _optional_set(*dirs) -> ArchiveSet | None:
    found = [d for d in dirs if d.is_dir() and any(d.glob("*.npz"))]
    return ArchiveSet.from_dirs(*found) if found else None


def _train_config(args, stage: int, task: str) -> TrainConfig:
    raw = apply_overrides(load_config(args.config), args.set)
    raw.update(stage=stage, task=task)
    flags = {"seed": args.seed, "max_steps": args.max_steps, "batch_size": args.batch_size,
             "base_lr": args.lr, "freeze_steps": getattr(args, "freeze_steps", None)}
    raw.update({k: v for k, v in flags.items() if v is not None})
    if args.deterministic:
        raw["deterministic"] = True
    if getattr(args, "init", None):
        raw.update(init="stage1", init_path=str(args.init))
    elif getattr(args, "init_external", None):
        raw.update(init="external", init_path=str(args.init_external))
    try:
        return TrainConfig.from_json(raw)
    except (TypeError, ValueError) as e:
        raise CLIError(str(e)) from e


def _run_training(args, cfg: TrainConfig, train_set, val_set, hashes) -> int:
    if args.deterministic:
        torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if cfg.stage == 1:
            res = train_stage1(train_set, cfg, val_set, out)
        else:
            init = None
            if cfg.init == "stage1":
                init, meta = load_bundle(cfg.init_path)
                if init.task.kind != "detect":
                    log.warning("init checkpoint %s holds a %s model; reusing its backbone", cfg.init_path, init.task)
            res = train_stage2(train_set, cfg, init, val_set, out)
    except TrainingDiverged as e:
        run_manifest(cfg, {"status": "diverged", "step": e.step, "last_good": e.last_good}, out / "manifest.json",
                     hashes)
        print(f"error: {e}", file=sys.stderr)
        return 1
    results = {"status": "ok", "provenance": res.bundle.provenance, "task": str(res.bundle.task),
               "steps": cfg.effective_max_steps, "batch_size": cfg.effective_batch_size,
               "tracked_threshold": res.tracker.current, "best_val": res.best_val,
               "final_loss": next((h["loss"] for h in reversed(res.history) if "loss" in h), None),
               "checkpoints": res.checkpoints}
    run_manifest(cfg, results, out / "manifest.json", hashes)
    print(_dump({k: results[k] for k in ("task", "provenance", "tracked_threshold", "final_loss")}))
    return 0


def cmd_train_detect(args) -> int:
    data = _data_root(args.data)
    cfg = _train_config(args, 1, "detect")
    train_set = _optional_set(data / "all" / "train")
    if train_set is None:
        train_set = _optional_set(*sorted((data / "pairs").glob("r*/train")))
    if train_set is None:
        raise CLIError(f"no training pairs under {data}/all/train or {data}/pairs/r*/train")
    val_set = _optional_set(data / "all" / "val") or _optional_set(*sorted((data / "pairs").glob("r*/val")))
    hashes = {"train": train_set.content_hash(), "val": val_set.content_hash() if val_set else None}
    return _run_training(args, cfg, train_set, val_set, hashes)


def cmd_train_forecast(args) -> int:
    data = _data_root(args.data)
    cfg = _train_config(args, 2, f"forecast({args.range})")
    train_set = ArchiveSet.from_dirs(_bucket_dir(data, args.range, "train"))
    val_set = _optional_set(data / "pairs" / f"r{args.range}" / "val")
    hashes = {"train": train_set.content_hash(), "val": val_set.content_hash() if val_set else None,
              "range": args.range}
    return _run_training(args, cfg, train_set, val_set, hashes)


def cmd_train_timerange(args) -> int:
    data = _data_root(args.data)
    cfg = _train_config(args, 2, "timerange")
    horizon = cfg.parsed_task.horizon
    train_set = ArchiveSet.from_dirs(_bucket_dir(data, horizon, "train"))
    val_set = _optional_set(data / "pairs" / f"r{horizon}" / "val")
    hashes = {"train": train_set.content_hash(), "val": val_set.content_hash() if val_set else None,
              "range": horizon}
    return _run_training(args, cfg, train_set, val_set, hashes)


# ---------------------------------------------------------------- evaluation

def cmd_eval(args) -> int:
    data = _data_root(args.data)
    try:
        bundle, meta = load_bundle(args.checkpoint)
    except (OSError, KeyError, ValueError, RuntimeError) as e:
        raise CLIError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    task = bundle.task
    if task.kind == "detect":
        ranges = _ranges(args.ranges) if args.ranges else sorted(
            int(p.parent.name[1:]) for p in (data / "pairs").glob(f"r*/{args.split}") if any(p.glob("*.npz")))
    else:
        ranges = _ranges(args.ranges) if args.ranges else [task.horizon]
        if ranges != [task.horizon]:
            raise CLIError(f"{task} checkpoint can only be evaluated on range {task.horizon}, not {ranges}")
    if not ranges:
        raise CLIError(f"no derived buckets for split {args.split!r} under {data}")

    if args.threshold is not None:
        threshold = args.threshold
    elif meta.get("tracker"):
        threshold = ThresholdTracker.from_json(meta["tracker"]).current
    else:
        threshold = 0.33 if task.kind == "timerange" else 0.5

    ckpt = Path(args.checkpoint).resolve()
    report = EvalReport(str(task), label=args.label or ckpt.parent.name or ckpt.stem)
    pooled_s, pooled_y, hashes = [], [], {}
    for r in ranges:
        ds = ArchiveSet.from_dirs(_bucket_dir(data, r, args.split))
        if task.kind == "detect" and ds[0].image_t1 is None:
            raise CLIError(f"range {r} archives have no second image; a detect checkpoint needs pairs")
        m = evaluate(bundle, ds, threshold, batch_size=args.batch_size, keep_scores=True)
        s, y = m.pop("scores"), m.pop("labels")
        if not args.oracle_threshold:
            m.pop("oracle_threshold", None)
            m.pop("oracle_f1", None)
        tr = m.pop("timerange", None)
        if tr is not None:
            report.timerange = tr
        m["n_patches"] = len(ds)
        report.ranges[r] = m
        hashes[f"r{r}"] = ds.content_hash()
        pooled_s.append(s)
        pooled_y.append(y)
    s, y = np.concatenate(pooled_s), np.concatenate(pooled_y)
    if y.any():
        report.pr_curve = pr_curve(s, y)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "eval_report.json")
    plots = emit_plots([report], out)
    write_manifest(out, "eval", args, {"checkpoint": str(args.checkpoint), "checkpoint_meta": meta,
                                       "threshold": threshold, "data_hashes": hashes,
                                       "plots": {k: str(v) for k, v in plots.items()}})
    print(_dump({str(r): {k: m[k] for k in ("f1", "precision", "recall") if k in m}
                 for r, m in report.ranges.items()}))
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out)
    reports = []
    for p in args.reports or ():
        try:
            reports.append(EvalReport.from_json(json.loads(Path(p).read_text())))
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise CLIError(f"cannot read report {p}: {e}") from e
    if not reports and not args.reference:
        raise CLIError("nothing to plot: pass --reports and/or --reference")
    written = {k: str(v) for k, v in emit_plots(reports, out).items()} if reports else {}
    for name in args.reference or ():
        written[name] = str(plot_reference(out, name))
    write_manifest(out, "plot", args, {"written": written})
    return 0


# ---------------------------------------------------------------- parser

def _add_train_args(p, with_range=False, with_init=False):
    if with_range:
        p.add_argument("--range", type=int, required=True, choices=FORECAST_RANGES, help="forecast range in months")
    p.add_argument("--data", help=f"derived data directory (default: ${DATA_ENV})")
    p.add_argument("--out", required=True, help="run directory for checkpoints, log and manifest")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. augment.mirror=false")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-stable replay mode")
    if with_init:
        p.add_argument("--freeze-steps", type=int)
        g = p.add_mutually_exclusive_group()
        g.add_argument("--init", help="stage-1 checkpoint whose backbone initialises the model")
        g.add_argument("--init-external", help="external encoder weights (state dict)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="changecast", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic location archive")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("derive", help="derive split, fixed-range patch pairs and bucket statistics")
    p.add_argument("--root", help=f"location archive root (default: ${DATA_ENV})")
    p.add_argument("--out", required=True)
    p.add_argument("--ranges", help="comma-separated month gaps (default: all nine forecast ranges)")
    p.add_argument("--patch-size", type=int, default=224)
    p.add_argument("--all-pairs", action="store_true", help="also write every date pair for stage-1 training")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("train-detect", help="stage 1: Siamese change detection")
    _add_train_args(p)
    p.set_defaults(func=cmd_train_detect)

    p = sub.add_parser("train-forecast", help="stage 2: change forecasting for one range")
    _add_train_args(p, with_range=True, with_init=True)
    p.set_defaults(func=cmd_train_forecast)

    p = sub.add_parser("train-timerange", help="stage 2: early/late time-range forecasting")
    _add_train_args(p, with_init=True)
    p.set_defaults(func=cmd_train_timerange)

    p = sub.add_parser("eval", help="evaluate a checkpoint on derived buckets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--ranges")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, help="override the checkpoint's tracked threshold")
    p.add_argument("--oracle-threshold", action="store_true", help="also report the test-set F1-optimal threshold")
    p.add_argument("--label")
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render plots from eval reports or bundled reference curves")
    p.add_argument("--reports", nargs="*")
    p.add_argument("--reference", nargs="*", help="bundled reference CSV names, e.g. fig4_f1_reference.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
