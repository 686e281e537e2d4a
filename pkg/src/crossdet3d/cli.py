"""Command-line entry point: ``crossdet3d <command> ...``.

Machine-readable output is JSON on stdout (or ``--output``); human-oriented
tables go to stderr.  Exit codes: 0 success, 1 I/O or format error, 2 frame
misalignment between ground truth and detections.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import __version__
from .adaptation import (CAR_SIZE_PRESETS, SizeDelta, SizeStats, assign_gt_sizes, car_point_counts,
                         compute_size_stats, output_transform, preset_stats, scene_point_count,
                         size_delta, size_histograms, statistical_normalize_frame)
from .conversion import CATEGORY_PRESETS, CategoryMap, ConvertOptions, convert_frame
from .evaluation import (DifficultyMode, DifficultySpec, EvalSettings, FrameAlignmentError,
                         TruncationMode, default_sweep_thresholds, evaluate, iou_threshold_sweep)
from .kitti_io import (KittiFormatError, list_frame_ids, read_kitti_frame,
                       read_label_dir, read_raw_frames, write_kitti_frame, write_label_dir)
from .synth import (BiasedDetectorConfig, generate_scene, load_profile, run_adaptation_experiment,
                    simulate_detector)

log = logging.getLogger("crossdet3d")

EXIT_OK, EXIT_IO, EXIT_ALIGN = 0, 1, 2
WORKERS_ENV = "CROSSDET3D_WORKERS"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _pmap(fn: Callable, items: Sequence, workers: int) -> list:
    """Order-preserving map, optionally over a process pool."""
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
    return [fn(x) for x in items]


def _dump(obj, path: Path | None) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _existing_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"not a directory: {p}")
    return p


def _fresh_output(out: str, *inputs: Path) -> Path:
    o = Path(out).resolve()
    for src in inputs:
        s = Path(src).resolve()
        if o == s or s in o.parents:
            raise CliError(f"output {o} must not be inside input {s}")
    o.mkdir(parents=True, exist_ok=True)
    return o


def _parse_triple(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected h,w,l numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return vals


def _add_delta_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--delta", type=_parse_triple, metavar="DH,DW,DL",
                   help="explicit size difference in meters")
    g.add_argument("--presets", nargs=2, metavar=("SOURCE", "TARGET"),
                   choices=sorted(CAR_SIZE_PRESETS), help="dataset / car-sales presets")
    g.add_argument("--stats", nargs=2, metavar=("SOURCE_JSON", "TARGET_JSON"),
                   help="size statistics files written by 'stats'")


def _resolve_delta(args) -> SizeDelta:
    if args.delta is not None:
        return SizeDelta(*args.delta)
    if args.presets is not None:
        src, tgt = args.presets
        return size_delta(preset_stats(tgt, args.category), preset_stats(src, args.category))
    src, tgt = (SizeStats.from_dict(json.loads(Path(p).read_text())) for p in args.stats)
    return size_delta(tgt, src)


# convert ---------------------------------------------------------------------

def _convert_job(args):
    raw, cmap, options, out = args
    converted = convert_frame(raw, cmap, options)
    write_kitti_frame(out, converted.bundle)
    return converted.counts


def cmd_convert(args) -> int:
    raw_dir = _existing_dir(args.raw_dir)
    out = _fresh_output(args.out_dir, raw_dir)
    if args.category_map:
        cmap = CategoryMap.from_dict(json.loads(Path(args.category_map).read_text()))
    else:
        cmap = CATEGORY_PRESETS[args.dataset]
    options = ConvertOptions(max_depth=args.max_depth)
    summary = {"frames": 0, "kept": 0, "dropped_frustum": 0, "dropped_depth": 0,
               "dropped_category": 0, "errors": []}
    frames, seen = [], set()
    for path in sorted(raw_dir.glob("*.jsonl")):
        for lineno, item in read_raw_frames(path):
            where = f"{path.name}:{lineno}"
            if isinstance(item, Exception):
                summary["errors"].append({"frame": where, "error": str(item)})
            elif item.frame_id in seen:
                summary["errors"].append({"frame": where,
                                          "error": f"duplicate frame id {item.frame_id!r}"})
            else:
                seen.add(item.frame_id)
                frames.append(item)
    frames.sort(key=lambda f: f.frame_id)
    for sub in ("label_2", "calib", "velodyne"):
        (out / sub).mkdir(exist_ok=True)
    for counts in _pmap(_convert_job, [(f, cmap, options, out) for f in frames], args.workers):
        summary["frames"] += 1
        for k, v in counts.items():
            summary[k] += v
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _dump(summary, None)
    return EXIT_IO if summary["errors"] else EXIT_OK


# eval ------------------------------------------------------------------------

def _difficulty_spec(args) -> DifficultySpec:
    return DifficultySpec(mode=DifficultyMode(args.difficulty),
                          truncation_mode=TruncationMode(args.truncation))


def cmd_eval(args) -> int:
    gts = read_label_dir(_existing_dir(args.gt))
    dets = read_label_dir(_existing_dir(args.det))
    settings = EvalSettings(category=args.category, iou_threshold=args.iou,
                            interpolation=args.interpolation, strict=args.strict,
                            ignore_categories=("DontCare", *args.ignore), workers=args.workers)
    spec = _difficulty_spec(args)
    if args.sweep:
        report = iou_threshold_sweep(gts, dets, default_sweep_thresholds(args.sweep_step), spec,
                                     settings)
    else:
        report = evaluate(gts, dets, spec, settings)
    _dump(report.to_dict(), args.output)
    if not args.sweep:
        for setting, row in report.table().items():
            print(f"{setting:>10}  " + "  ".join(f"AP_{t.upper()} {100 * v:5.1f}"
                                                for t, v in row.items()), file=sys.stderr)
    return EXIT_OK


# stats -----------------------------------------------------------------------

def _points_job(args):
    root, fid, image_size, category = args
    frame = read_kitti_frame(root, fid, image_size)
    return car_point_counts(frame, category), scene_point_count(frame)


def cmd_stats(args) -> int:
    root = _existing_dir(args.input)
    labels = [lab for labs in read_label_dir(root).values() for lab in labs]
    result = compute_size_stats(labels, args.category).to_dict()
    if args.hist_bin:
        result["histogram"] = size_histograms(labels, args.hist_bin, args.category).to_dict()
    if args.points:
        ids = list_frame_ids(root / "label_2")
        per_frame = _pmap(_points_job, [(root, f, tuple(args.image_size), args.category)
                                        for f in ids], args.workers)
        cars = [c for counts, _ in per_frame for c in counts]
        scenes = [n for _, n in per_frame]
        result["points"] = {"per_car": math.fsum(cars) / len(cars) if cars else 0.0,
                            "per_scene": math.fsum(scenes) / len(scenes) if scenes else 0.0,
                            "num_cars": len(cars), "num_scenes": len(scenes)}
    _dump(result, args.output)
    return EXIT_OK


# sn / ot / gt-size -----------------------------------------------------------

def _sn_job(args):
    src, out, fid, delta, category, image_size = args
    frame = read_kitti_frame(src, fid, image_size)
    write_kitti_frame(out, statistical_normalize_frame(frame, delta, category))
    return fid


def cmd_sn(args) -> int:
    src = _existing_dir(args.input)
    out = _fresh_output(args.output, src)
    delta = _resolve_delta(args)
    ids = list_frame_ids(src / "label_2")
    _pmap(_sn_job, [(src, out, f, delta, args.category, tuple(args.image_size)) for f in ids],
          args.workers)
    if (src / "image_2").is_dir():
        shutil.copytree(src / "image_2", out / "image_2", dirs_exist_ok=True)
    _dump({"frames": len(ids), "delta": list(delta.as_tuple()), "category": args.category}, None)
    return EXIT_OK


def _ot_job(args):
    dets, delta, scale, category = args
    return output_transform(dets, delta, scale, category)


def _gt_size_job(args):
    gts, dets, min_iou, category = args
    return assign_gt_sizes(gts, dets, min_iou, category)


def cmd_ot(args) -> int:
    src = _existing_dir(args.input)
    out = _fresh_output(args.output, src)
    delta = _resolve_delta(args)
    dets = read_label_dir(src)
    ids = sorted(dets)
    moved = _pmap(_ot_job, [(dets[f], delta, args.scale, args.category) for f in ids],
                  args.workers)
    write_label_dir(out, dict(zip(ids, moved)))
    _dump({"frames": len(dets), "delta": list(delta.as_tuple()), "scale": args.scale}, None)
    return EXIT_OK


def cmd_gt_size(args) -> int:
    gt_root, det_root = _existing_dir(args.gt), _existing_dir(args.det)
    out = _fresh_output(args.output, gt_root, det_root)
    gts, dets = read_label_dir(gt_root), read_label_dir(det_root)
    missing = sorted(set(dets) - set(gts))
    if missing:
        raise FrameAlignmentError([], missing)
    ids = sorted(dets)
    sized = _pmap(_gt_size_job, [(gts[f], dets[f], args.min_iou, args.category) for f in ids],
                  args.workers)
    write_label_dir(out, dict(zip(ids, sized)))
    _dump({"frames": len(dets), "min_iou": args.min_iou}, None)
    return EXIT_OK


# synthetic -------------------------------------------------------------------

def cmd_synth_experiment(args) -> int:
    report = run_adaptation_experiment(load_profile(args.source), load_profile(args.target),
                                       args.scenes, args.seed, iou_threshold=args.iou,
                                       workers=args.workers, ot_scale=args.ot_scale)
    _dump(report.to_dict(), args.output)
    if args.sweep_csv:
        Path(args.sweep_csv).write_text(report.sweep_csv())
    print(f"direct {report.ap_direct:.3f}  OT {report.ap_ot:.3f}  GT-size {report.ap_gt_size:.3f}"
          f"  matched {report.ap_matched:.3f}", file=sys.stderr)
    return EXIT_OK


def _scene_job(args):
    profile, seed, index, out, det_profile = args
    fid = f"{index:06d}"
    frame = generate_scene(profile, (seed, index), fid)
    write_kitti_frame(out, frame)
    if det_profile is not None:
        dets = simulate_detector(frame, BiasedDetectorConfig(det_profile), (seed, index))
        write_label_dir(out / "detections", {fid: dets})
    return fid


def cmd_synth_scenes(args) -> int:
    out = _fresh_output(args.output)
    profile = load_profile(args.profile)
    det_profile = load_profile(args.detector) if args.detector else None
    ids = _pmap(_scene_job, [(profile, args.seed, i, out, det_profile) for i in range(args.scenes)],
                args.workers)
    _dump({"frames": len(ids), "profile": profile.name, "seed": args.seed}, None)
    return EXIT_OK


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossdet3d", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, category=True, workers=True):
        if category:
            p.add_argument("--category", default="Car")
        if workers:
            p.add_argument("--workers", type=int, default=_default_workers(),
                           help=f"process count (default: ${WORKERS_ENV} or 1)")

    p = sub.add_parser("convert", help="intermediate .jsonl frames -> KITTI layout")
    p.add_argument("raw_dir")
    p.add_argument("out_dir")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--dataset", choices=sorted(CATEGORY_PRESETS), default="kitti")
    g.add_argument("--category-map", help="JSON {car: [...], truck: [...], passthrough: {...}}")
    p.add_argument("--max-depth", type=float, default=70.0)
    common(p, category=False)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="AP_BEV / AP_3D per difficulty and depth range")
    p.add_argument("--gt", required=True, help="KITTI root or label directory")
    p.add_argument("--det", required=True, help="directory of detection label files")
    p.add_argument("--iou", type=float, default=0.7)
    p.add_argument("--difficulty", choices=[m.value for m in DifficultyMode], default="new")
    p.add_argument("--truncation", choices=[m.value for m in TruncationMode], default="continuous")
    p.add_argument("--interpolation", type=int, choices=(40, 11), default=40)
    p.add_argument("--strict", action="store_true",
                   help="out-of-scope cars count against detections; no detection gating")
    p.add_argument("--ignore", action="append", default=[], metavar="CATEGORY",
                   help="extra GT category whose overlaps are ignored (DontCare always is)")
    p.add_argument("--sweep", action="store_true", help="evaluate IoU thresholds 0..1")
    p.add_argument("--sweep-step", type=float, default=0.05)
    p.add_argument("--output", type=Path)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="mean/std box size, optional histograms and point counts")
    p.add_argument("input", help="KITTI root or label directory")
    p.add_argument("--hist-bin", type=float)
    p.add_argument("--points", action="store_true", help="average in-view points per car/scene")
    p.add_argument("--image-size", type=int, nargs=2, default=(1242, 375), metavar=("W", "H"))
    p.add_argument("--output", type=Path)
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sn", help="statistical normalisation of a KITTI dataset (copy)")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--image-size", type=int, nargs=2, default=(1242, 375), metavar=("W", "H"))
    _add_delta_args(p)
    common(p)
    p.set_defaults(func=cmd_sn)

    p = sub.add_parser("ot", help="add a size delta to detections")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--scale", type=float, default=1.0, help="multiplier on the delta")
    _add_delta_args(p)
    common(p)
    p.set_defaults(func=cmd_ot)

    p = sub.add_parser("gt-size", help="give detections the size of the GT car they overlap")
    p.add_argument("--gt", required=True)
    p.add_argument("--det", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--min-iou", type=float, default=0.2)
    common(p)
    p.set_defaults(func=cmd_gt_size)

    p = sub.add_parser("synth-experiment", aliases=["synth"],
                       help="direct / OT / GT-size / matched AP on synthetic scenes")
    p.add_argument("--source", required=True, help="profile preset or JSON file")
    p.add_argument("--target", required=True, help="profile preset or JSON file")
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--iou", type=float, default=0.7)
    p.add_argument("--ot-scale", type=float, default=1.0)
    p.add_argument("--output", type=Path)
    p.add_argument("--sweep-csv", type=Path)
    common(p, category=False)
    p.set_defaults(func=cmd_synth_experiment)

    p = sub.add_parser("synth-scenes", help="write synthetic scenes as a KITTI dataset")
    p.add_argument("--profile", required=True)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--detector", help="also write simulated detections from this profile")
    p.add_argument("--output", required=True)
    common(p, category=False)
    p.set_defaults(func=cmd_synth_scenes)
    return parser


def main(argv: Iterable[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(None if argv is None else list(argv))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FrameAlignmentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALIGN
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, KittiFormatError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
