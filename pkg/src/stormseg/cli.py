"""Command-line front end: synth, rasterize, split, train, eval, infer, bench.

Heavy imports happen inside the subcommand handlers so that --deterministic
and STORMSEG_THREADS can pin BLAS thread environment variables before numpy
initializes.  Exit codes: 0 success, 1 runtime failure, 2 usage or config
error; failures print a one-line diagnostic on stderr.

Config files are plain ``key = value`` lines with ``#`` comments.  Unknown
keys are rejected; values feed the same dataclass validation as the API.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timedelta, timezone
from pathlib import Path

from .errors import StormsegError

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")

CONFIG_KEYS = {
    "preset": str,
    "depth": int,
    "base_channels": int,
    "in_channels": int,
    "dropout_rate": float,
    "noise_stddev": float,
    "bn_momentum": float,
    "loss": str,
    "alpha": float,
    "beta": float,
    "gamma": float,
    "smooth_eps": float,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "learning_rate": float,
    "decay": float,
    "epsilon": float,
    "threshold": float,
}


class UsageError(StormsegError):
    """Malformed flags or configuration; maps to exit code 2."""


def parse_config_file(path) -> dict:
    """key = value lines, # comments; unknown keys and bad values rejected."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value)
        except ValueError as e:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return values


def build_train_config(conf: dict):
    """Turn a parsed config mapping (plus optional preset) into a TrainConfig."""
    from dataclasses import replace

    from .losses import LossSpec
    from .model import ModelConfig
    from .train import TrainConfig

    conf = dict(conf)
    preset = conf.pop("preset", None)
    try:
        if preset is not None:
            cfg = TrainConfig.from_preset(preset)
        else:
            cfg = TrainConfig(model=ModelConfig(loss=LossSpec()))
        loss = cfg.model.loss
        if "loss" in conf:
            loss = replace(loss, kind=conf.pop("loss"))
        loss_args = {k: conf.pop(k) for k in ("alpha", "beta", "gamma", "smooth_eps")
                     if k in conf}
        if loss_args:
            loss = replace(loss, **loss_args)
        model_args = {k: conf.pop(k) for k in
                      ("depth", "base_channels", "in_channels", "dropout_rate",
                       "noise_stddev", "bn_momentum") if k in conf}
        model = replace(cfg.model, loss=loss, **model_args)
        return replace(cfg, model=model, **conf)
    except StormsegError as e:
        raise UsageError(f"bad configuration: {e}") from e


def _ts_name(ts) -> str:
    from .data import format_timestamp
    return format_timestamp(ts).replace("-", "").replace(":", "")


def _load_frames(directory):
    from .data import read_grid
    paths = sorted(Path(directory).glob("*.f32grid"))
    if not paths:
        raise StormsegError(f"no .f32grid files in {directory}")
    return sorted((read_grid(p) for p in paths), key=lambda f: f.timestamp)


def _load_masks(directory):
    from .data import read_mask
    out = {}
    for p in sorted(Path(directory).glob("*.u8mask")):
        _, ts, mask = read_mask(p)
        out[ts] = mask
    return out


def _load_samples(frames_dir, masks_dir, times):
    """Stack (t, t-1, t-2) and pair the time-t mask (zeros when no storms)."""
    import numpy as np

    from .data import CADENCE_3H, Sample

    frames = {f.timestamp: f for f in _load_frames(frames_dir)}
    masks = _load_masks(masks_dir) if masks_dir else {}
    spec = next(iter(frames.values())).spec
    samples = []
    for t in times:
        triple = [t, t - CADENCE_3H, t - 2 * CADENCE_3H]
        missing = [m for m in triple if m not in frames]
        if missing:
            raise StormsegError(f"frames missing for sample at {_ts_name(t)}: "
                                f"{', '.join(_ts_name(m) for m in missing)}")
        stacked = np.stack([frames[m].values for m in triple])
        mask = masks.get(t)
        if mask is None:
            mask = np.zeros((spec.height, spec.width), np.uint8)
        samples.append(Sample(stacked, mask, t))
    return samples, spec


def _read_split(path) -> dict:
    from .data import parse_timestamp
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise StormsegError(f"cannot read split {path}: {e}") from e
    out = {}
    try:
        for subset in ("train", "validation", "test"):
            out[subset] = [parse_timestamp(t, f"{path}:{subset}") for t in doc[subset]]
            out[f"{subset}_years"] = frozenset(doc[f"{subset}_years"])
    except KeyError as e:
        raise StormsegError(f"split {path} is missing key {e}") from e
    return out


def _years(text: str) -> frozenset[int]:
    try:
        got = frozenset(int(y) for y in text.split(",") if y.strip())
    except ValueError as e:
        raise UsageError(f"bad year list {text!r}: {e}") from e
    if not got:
        raise UsageError(f"empty year list {text!r}")
    return got


# -- subcommands -----------------------------------------------------------


def cmd_synth(args) -> int:
    from .data import GridSpec, SynthParams, synth_scene, write_grid, write_labels
    from .tensor import Rng

    years = sorted(_years(args.years))
    spec = GridSpec(args.width, args.height, lat0=40.0, lon0=180.0,
                    dlat=-0.5, dlon=0.5)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(args.seed)
    records = []
    n_frames = 0
    for k in range(args.scenes):
        year = years[k % len(years)]
        day = k // len(years)
        t0 = datetime(year, 1, 1, 12, tzinfo=timezone.utc) + timedelta(days=day)
        srng = rng.spawn(k)
        n_cy = srng.integers(args.cyclones_min, args.cyclones_max + 1)
        frames, recs = synth_scene(srng, spec, n_cy, SynthParams(t0=t0))
        for f in frames:
            write_grid(f, out / f"frame_{_ts_name(f.timestamp)}.f32grid")
            n_frames += 1
        records.extend(recs)
    records.sort(key=lambda r: (r.timestamp, r.lat, r.lon))
    write_labels(records, out / "labels.csv")
    print(f"wrote {args.scenes} scenes ({n_frames} frames, "
          f"{len(records)} label records) to {out}")
    return 0


def cmd_rasterize(args) -> int:
    from .data import (GRID_GFS, SYNTH_GRID, read_grid, read_labels,
                       rasterize_labels, write_mask)

    if args.like:
        spec = read_grid(args.like).spec
    else:
        spec = {"gfs": GRID_GFS, "synth": SYNTH_GRID}[args.grid]
    records = read_labels(args.labels)
    by_time = {}
    for r in records:
        by_time.setdefault(r.timestamp, []).append(r)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    skipped = 0
    written = 0
    for ts in sorted(by_time):
        mask, sk = rasterize_labels(by_time[ts], spec, args.box, args.wind_min)
        skipped += sk
        write_mask(spec, ts, mask, out / f"mask_{_ts_name(ts)}.u8mask")
        written += 1
    print(f"rasterized {len(records)} records into {written} masks "
          f"({skipped} centers off-grid) in {out}")
    return 0


def cmd_split(args) -> int:
    from .data import format_timestamp, stack_temporal
    from .errors import ContractError

    sets = {"train": _years(args.train_years),
            "validation": _years(args.val_years),
            "test": _years(args.test_years)}
    if sets["train"] & sets["validation"] or sets["train"] & sets["test"] \
            or sets["validation"] & sets["test"]:
        raise UsageError("year sets must be pairwise disjoint")
    frames = _load_frames(args.frames)
    times = [t for t, _ in stack_temporal(frames)]
    doc = {f"{k}_years": sorted(v) for k, v in sets.items()}
    for subset in sets:
        doc[subset] = []
    for t in times:
        for subset, years in sets.items():
            if t.year in years:
                doc[subset].append(format_timestamp(t))
                break
        else:
            raise ContractError(f"year {t.year} is not assigned to any split")
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    counts = ", ".join(f"{k}={len(doc[k])}" for k in sets)
    print(f"split {len(times)} samples ({counts}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    from .data import DatasetSplit
    from .model import save_checkpoint
    from .tensor import Rng
    from .train import log_history, train

    conf = parse_config_file(args.config) if args.config else {}
    if args.preset:
        conf["preset"] = args.preset
    cfg = build_train_config(conf)
    split_doc = _read_split(args.split)
    train_samples, _ = _load_samples(args.frames, args.masks, split_doc["train"])
    val_samples, _ = _load_samples(args.frames, args.masks, split_doc["validation"])
    split = DatasetSplit(train_samples, val_samples, [],
                         split_doc["train_years"], split_doc["validation_years"],
                         split_doc["test_years"])
    ckpt, history = train(cfg, split, Rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    log_history(history, out / "history.csv")
    best = ckpt.history_summary
    print(f"trained {len(history.entries)} epochs; best val loss "
          f"{best['best_val_loss']:.6f} at epoch {best['best_epoch']}; "
          f"wrote {out / 'checkpoint.ckpt'} and {out / 'history.csv'}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .data import normalize
    from .losses import evaluate
    from .model import Model, load_checkpoint
    from .tensor import Tensor

    ckpt = load_checkpoint(args.checkpoint)
    split_doc = _read_split(args.split)
    times = split_doc[args.subset]
    if not times:
        raise StormsegError(f"subset {args.subset!r} is empty in {args.split}")
    samples, _ = _load_samples(args.frames, args.masks, times)
    x = np.stack([s.input for s in samples])
    y = np.stack([s.mask for s in samples]).astype(np.float32)[:, None]
    x, _ = normalize(x, ckpt.norm_stats)
    model = Model.from_checkpoint(ckpt)
    batches = [(x[i:i + args.batch], y[i:i + args.batch])
               for i in range(0, len(x), args.batch)]
    report = evaluate(lambda xb: model.forward(Tensor(xb), mode="eval"),
                      batches, ckpt.config.loss, threshold=args.threshold,
                      binarized=args.binarized)
    doc = {"samples": len(samples), "loss_kind": ckpt.config.loss.kind,
           "threshold": args.threshold, "accuracy": report.accuracy,
           "dice_coefficient": report.dice_coefficient,
           "tversky_coefficient": report.tversky_coefficient,
           "loss_value": report.loss_value}
    if args.binarized:
        doc["dice_binary"] = report.dice_binary
        doc["tversky_binary"] = report.tversky_binary
    print(f"samples              = {len(samples)}")
    print(f"accuracy             = {report.accuracy:.6f}")
    print(f"dice_coefficient     = {report.dice_coefficient:.6f}")
    print(f"tversky_coefficient  = {report.tversky_coefficient:.6f}")
    print(f"loss ({ckpt.config.loss.kind:>7})       = {report.loss_value:.6f}")
    if args.binarized:
        print(f"dice_binary          = {report.dice_binary:.6f}")
        print(f"tversky_binary       = {report.tversky_binary:.6f}")
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    from .data import GridFrame, parse_timestamp, read_grid, write_grid
    from .inference import (Predictor, extract_rois, render_overlay,
                            threshold_mask, write_rois)
    from .model import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    frames = [read_grid(p) for p in args.frames]
    at = parse_timestamp(args.at, "--at") if args.at else None
    prob = Predictor(ckpt).probability_map(frames, at)
    mask = threshold_mask(prob, args.threshold)
    rois = extract_rois(mask, prob.spec, args.min_area, prob.values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rois([(prob.timestamp, r) for r in rois], out / "rois.csv")
    write_grid(prob, out / "probability.f32grid")
    base = next(f for f in frames if f.timestamp == prob.timestamp)
    if args.overlay in ("roi", "both"):
        render_overlay(base, out / "overlay_rois.ppm", rois=rois)
    if args.overlay in ("prob", "both"):
        render_overlay(base, out / "overlay_prob.ppm", probabilities=prob)
    top = max((r.confidence for r in rois), default=float("nan"))
    print(f"{len(rois)} ROI(s) at {_ts_name(prob.timestamp)} "
          f"(tau={args.threshold}, min_area={args.min_area}, top={top:.3f}); "
          f"wrote {out / 'rois.csv'}")
    return 0


def cmd_bench(args) -> int:
    from .inference import FRAMES_PER_MONTH, benchmark
    from .model import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    extents = None
    if args.extents:
        try:
            w, h = (int(v) for v in args.extents.lower().split("x"))
        except ValueError as e:
            raise UsageError(f"bad --extents {args.extents!r}: {e}") from e
        extents = (w, h)
    report = benchmark(ckpt, args.runs, extents)
    ratio = report.seconds_per_month / (FRAMES_PER_MONTH * report.seconds_per_frame)
    print(f"seconds_per_frame = {report.seconds_per_frame:.6f}")
    print(f"seconds_per_month = {report.seconds_per_month:.6f}  "
          f"({FRAMES_PER_MONTH} frames)")
    print(f"consistency month/(frame x {FRAMES_PER_MONTH}) = {ratio:.3f} "
          f"({'within' if abs(ratio - 1) <= 0.1 else 'OUTSIDE'} 10%)")
    return 0


# -- wiring ----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stormseg",
        description="Storm-region segmentation: synthesize, train, detect.")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded numeric libraries")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic scenes and labels")
    s.add_argument("--scenes", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--years", default="2013,2014,2015",
                   help="comma-separated years scenes cycle through")
    s.add_argument("--cyclones-min", type=int, default=1)
    s.add_argument("--cyclones-max", type=int, default=3)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("rasterize", help="burn label boxes into mask rasters")
    s.add_argument("--labels", required=True)
    s.add_argument("--like", help="take the grid from this .f32grid file")
    s.add_argument("--grid", choices=("gfs", "synth"), default="synth")
    s.add_argument("--box", type=int, default=25)
    s.add_argument("--wind-min", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rasterize)

    s = sub.add_parser("split", help="assign samples to train/val/test by year")
    s.add_argument("--frames", required=True)
    s.add_argument("--train-years", required=True)
    s.add_argument("--val-years", required=True)
    s.add_argument("--test-years", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="fit a model and write checkpoint + history")
    s.add_argument("--frames", required=True)
    s.add_argument("--masks", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--config", help="key = value settings file")
    s.add_argument("--preset", help="published-experiment settings to start from")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="report metrics for a checkpoint on a subset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--masks", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--subset", choices=("train", "validation", "test"),
                   default="test")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--binarized", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="probability map, ROI boxes, overlays")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frames", nargs="+", required=True,
                   help=".f32grid files covering t, t-1, t-2")
    s.add_argument("--at", help="target timestamp (default: latest frame)")
    s.add_argument("--threshold", type=float, default=0.7)
    s.add_argument("--min-area", type=int, default=4)
    s.add_argument("--overlay", choices=("roi", "prob", "both", "none"),
                   default="both")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", help="time warm inference per frame and month")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--extents", help="WxH input size, e.g. 64x64")
    s.set_defaults(func=cmd_bench)
    return p


def _apply_thread_env(args) -> None:
    cap = None
    if args.deterministic:
        cap = 1
    elif "STORMSEG_THREADS" in os.environ:
        raw = os.environ["STORMSEG_THREADS"]
        try:
            cap = int(raw)
        except ValueError as e:
            raise UsageError(f"STORMSEG_THREADS={raw!r} is not an integer") from e
        if cap < 1:
            raise UsageError(f"STORMSEG_THREADS must be >= 1, got {cap}")
    if cap is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(cap)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _apply_thread_env(args)
        return args.func(args)
    except UsageError as e:
        print(f"stormseg: {e}", file=sys.stderr)
        return 2
    except StormsegError as e:
        print(f"stormseg: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"stormseg: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
