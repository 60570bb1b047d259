"""Command-line pipeline: generate, gtmaps, train, infer, track, evaluate.

Every stage reads and writes plain files so runs can be resumed, diffed
and scripted.  A run_manifest.json lands next to each stage's outputs;
results.json itself stays free of timestamps so identical runs produce
identical bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .groundtruth import (
    heads_by_frame, load_annotations, load_meta, multiscale_targets,
    trajectories,
)
from .metrics import (
    CountRecord, SequenceEval, aggregate_results, write_pr_curves_csv,
    write_results_json,
)
from .postprocess import (
    Detection, Tracklet, load_detections, load_tracklets, localize,
    save_detections, save_tracklets, track,
)
from .simulator import (
    SceneConfig, attribute_suite, generate_sequence, load_sequence,
    write_sequence,
)
from .stanet import (
    LossWeights, ModelConfig, TrainingDiverged, TrainSettings,
    config_from_dict, infer, train,
)
from .tensorcore import load_checkpoint
from .tensorcore.optim import LrSchedule
from .tensorcore.tensor import Tensor

THREADS_VAR = "CROWDFLOW_THREADS"


class CliError(Exception):
    """User-facing failure; rendered as one machine-parsable line."""


def _worker_count(n_jobs: int) -> int:
    cap = os.environ.get(THREADS_VAR)
    if cap is not None:
        try:
            cap = int(cap)
        except ValueError as exc:
            raise CliError(f"{THREADS_VAR} must be an integer") from exc
        if cap < 1:
            raise CliError(f"{THREADS_VAR} must be at least 1")
        return min(cap, n_jobs)
    return min(4, n_jobs)


def _run_parallel(fn, items):
    """Map fn over items on a small thread pool; results in input order."""
    items = list(items)
    if not items:
        return []
    workers = _worker_count(len(items))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write_manifest(out_dir: Path, stage: str, args: dict):
    """One manifest per stage; stage-qualified so stages sharing a
    directory (infer + track, in-place gtmaps) never clobber each other."""
    doc = {
        "stage": stage,
        "package_version": __version__,
        "arguments": {k: v for k, v in args.items()
                      if v is not None and k != "fn"},
        "completed_unix_time": time.time(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"run_manifest_{stage}.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _sequence_dirs(root: Path) -> list[Path]:
    dirs = sorted(p for p in root.iterdir()
                  if p.is_dir() and (p / "meta.json").exists())
    if not dirs:
        raise CliError(f"no sequences found under {root}")
    return dirs


def _load_json_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from exc


def _model_config(args, doc: dict | None = None) -> ModelConfig:
    doc = dict(doc or {})
    if getattr(args, "no_ms", False):
        doc["use_multiscale"] = False
    if getattr(args, "no_loc", False):
        doc["use_localization_head"] = False
    if getattr(args, "no_ass", False):
        doc["use_association_head"] = False
    if getattr(args, "tau", None) is not None:
        doc["tau"] = args.tau
    try:
        return config_from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad model config: {exc}") from exc


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    out = Path(args.out)
    if args.config:
        doc = _load_json_config(args.config)
        entries = doc.get("sequences")
        if not isinstance(entries, list) or not entries:
            raise CliError("config must hold a non-empty 'sequences' list")
        suite = []
        for i, entry in enumerate(entries):
            entry = dict(entry)
            name = entry.pop("name", f"seq{i}")
            try:
                suite.append((name, SceneConfig(**entry)))
            except (TypeError, ValueError) as exc:
                raise CliError(f"sequence {i}: {exc}") from exc
    else:
        suite = attribute_suite(frame_count=args.frames)

    def build(item):
        index, (name, cfg) = item
        data = generate_sequence(cfg, seed=args.seed + index, name=name)
        write_sequence(out / name, data)
        return name

    names = _run_parallel(build, enumerate(suite))
    _write_manifest(out, "generate", vars(args))
    print(f"generated {len(names)} sequences under {out}")
    return 0


# ---------------------------------------------------------------------------
# gtmaps


def cmd_gtmaps(args) -> int:
    root = Path(args.data)
    if not root.is_dir():
        raise CliError(f"data directory not found: {root}")

    def build(seq_dir: Path):
        meta = load_meta(seq_dir / "meta.json")
        annotations = load_annotations(seq_dir / "annotations.csv")
        w, h, t = meta["width"], meta["height"], meta["frame_count"]
        per_frame = heads_by_frame(annotations, frame_count=t)
        arrays = {}
        for f, heads in enumerate(per_frame):
            pts = [(x, y) for x, y, _ in heads]
            dens, locs = multiscale_targets(pts, w, h, n_scales=4,
                                            sigma_loc=args.sigma_loc)
            arrays[f"den_{f:06d}"] = dens[-1]
            arrays[f"loc_{f:06d}"] = locs[-1]
        out_dir = seq_dir if args.out is None else Path(args.out) / seq_dir.name
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(out_dir / "maps.npz", **arrays)
        dets = [Detection(f, x, y, 1.0)
                for f, heads in enumerate(per_frame) for x, y, _ in heads]
        save_detections(out_dir / "detections.csv", dets)
        tracks = []
        for new_id, (ident, traj) in enumerate(
                sorted(trajectories(annotations).items())):
            frames = sorted(traj)
            runs: list[list[int]] = [[frames[0]]]
            for f in frames[1:]:
                if f == runs[-1][-1] + 1:
                    runs[-1].append(f)
                else:
                    runs.append([f])
            for run in runs:
                tracks.append(Tracklet(len(tracks), [
                    Detection(f, traj[f][0], traj[f][1], 1.0) for f in run]))
        save_tracklets(out_dir / "tracklets.csv", tracks)
        return seq_dir.name

    names = _run_parallel(build, _sequence_dirs(root))
    manifest_dir = root if args.out is None else Path(args.out)
    _write_manifest(manifest_dir, "gtmaps", vars(args))
    print(f"wrote ground-truth maps for {len(names)} sequences")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    root = Path(args.data)
    if not root.is_dir():
        raise CliError(f"data directory not found: {root}")
    sequences = [load_sequence(d) for d in _sequence_dirs(root)]
    doc = _load_json_config(args.config) if args.config else {}
    config = _model_config(args, doc.get("model"))
    try:
        weights = LossWeights(**doc.get("weights", {}))
        schedule = LrSchedule(**doc.get("schedule", {}))
        settings_doc = dict(doc.get("train", {}))
        if args.epochs is not None:
            schedule = LrSchedule(epochs=args.epochs,
                                  early_epochs=schedule.early_epochs,
                                  lr_early=schedule.lr_early,
                                  lr_late=schedule.lr_late)
        if "crop" in settings_doc and settings_doc["crop"] is not None:
            settings_doc["crop"] = tuple(settings_doc["crop"])
        settings = TrainSettings(**settings_doc)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad training config: {exc}") from exc
    out = Path(args.out)
    try:
        _, history = train(sequences, config, weights, schedule,
                           seed=args.seed, out_dir=out, settings=settings)
    except TrainingDiverged as exc:
        raise CliError(f"training diverged: {exc}") from exc
    _write_manifest(out, "train", vars(args))
    print(f"trained {len(history)} epochs; final loss "
          f"{history[-1]['loss_total']:.6g}")
    return 0


def _load_model(checkpoint_path) -> tuple[dict, ModelConfig]:
    try:
        arrays, meta = load_checkpoint(checkpoint_path)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {checkpoint_path}") from exc
    if not meta or "model" not in meta:
        raise CliError(f"checkpoint {checkpoint_path} has no model config")
    config = config_from_dict(meta["model"])
    params = {k: Tensor(v, requires_grad=False) for k, v in arrays.items()}
    return params, config


# ---------------------------------------------------------------------------
# infer


def cmd_infer(args) -> int:
    params, config = _load_model(args.checkpoint)
    if args.tau is not None:
        if args.tau < 1:
            raise CliError("--tau must be at least 1")
    root = Path(args.data)
    if not root.is_dir():
        raise CliError(f"data directory not found: {root}")
    out = Path(args.out)

    def run(seq_dir: Path):
        data = load_sequence(seq_dir)
        result = infer(params, config, data.frames, tau=args.tau)
        seq_out = out / seq_dir.name
        seq_out.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for t in range(result.densities.shape[0]):
            arrays[f"den_{t:06d}"] = result.densities[t]
            if result.localizations is not None:
                arrays[f"loc_{t:06d}"] = result.localizations[t]
        np.savez_compressed(seq_out / "maps.npz", **arrays)
        dets = []
        if result.localizations is not None:
            for t, loc_map in enumerate(result.localizations):
                dets.extend(localize(loc_map, theta=args.theta,
                                     radius=args.radius, frame=t))
        save_detections(seq_out / "detections.csv", dets)
        return seq_dir.name

    names = _run_parallel(run, _sequence_dirs(root))
    _write_manifest(out, "infer", vars(args))
    print(f"ran inference on {len(names)} sequences")
    return 0


# ---------------------------------------------------------------------------
# track


def cmd_track(args) -> int:
    root = Path(args.pred)
    if not root.is_dir():
        raise CliError(f"prediction directory not found: {root}")
    seq_dirs = sorted(p for p in root.iterdir()
                      if p.is_dir() and (p / "detections.csv").exists())
    if not seq_dirs:
        raise CliError(f"no detections.csv found under {root}")

    def run(seq_dir: Path):
        dets = load_detections(seq_dir / "detections.csv")
        by_frame: dict[int, list[Detection]] = {}
        for d in dets:
            by_frame.setdefault(d.frame, []).append(d)
        tracklets = track(by_frame, gate=args.gate,
                          use_confidence=not args.no_confidence)
        save_tracklets(seq_dir / "tracklets.csv", tracklets)
        return len(tracklets)

    counts = _run_parallel(run, seq_dirs)
    _write_manifest(root, "track", vars(args))
    print(f"tracked {len(counts)} sequences, {sum(counts)} tracklets total")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _evaluate_sequence(item) -> SequenceEval:
    gt_dir, pred_dir = item
    meta = load_meta(gt_dir / "meta.json")
    annotations = load_annotations(gt_dir / "annotations.csv")
    t = meta["frame_count"]
    per_frame = heads_by_frame(annotations, frame_count=t)
    gt_points = [(f, x, y)
                 for f, heads in enumerate(per_frame) for x, y, _ in heads]

    maps_path = pred_dir / "maps.npz"
    if not maps_path.exists():
        raise CliError(f"missing predictions: {maps_path}")
    counts = []
    with np.load(maps_path) as maps:
        for f in range(t):
            key = f"den_{f:06d}"
            if key not in maps:
                raise CliError(f"{maps_path} lacks {key}")
            counts.append(CountRecord(meta.get("name", gt_dir.name), f,
                                      float(len(per_frame[f])),
                                      float(maps[key].sum())))

    det_path = pred_dir / "detections.csv"
    preds = load_detections(det_path) if det_path.exists() else []
    trk_path = pred_dir / "tracklets.csv"
    tracklets = load_tracklets(trk_path) if trk_path.exists() else []
    return SequenceEval(
        name=meta.get("name", gt_dir.name),
        attributes=meta.get("attributes", {}),
        count_records=counts,
        pred_detections=preds,
        gt_points=gt_points,
        tracklets=tracklets,
        gt_trajectories=[traj for _, traj in
                         sorted(trajectories(annotations).items())],
    )


def cmd_evaluate(args) -> int:
    gt_root, pred_root = Path(args.data), Path(args.pred)
    if not gt_root.is_dir():
        raise CliError(f"data directory not found: {gt_root}")
    if not pred_root.is_dir():
        raise CliError(f"prediction directory not found: {pred_root}")
    pairs = []
    for gt_dir in _sequence_dirs(gt_root):
        pred_dir = pred_root / gt_dir.name
        if not pred_dir.is_dir():
            raise CliError(f"no predictions for sequence {gt_dir.name}")
        pairs.append((gt_dir, pred_dir))
    seqs = _run_parallel(_evaluate_sequence, pairs)
    results = aggregate_results(seqs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results_json(out / "results.json", results)
    all_preds = []
    all_gts = []
    for si, s in enumerate(seqs):
        off = (si + 1) * 10 ** 7
        all_preds.extend(Detection(d.frame + off, d.x, d.y, d.conf)
                         for d in s.pred_detections)
        all_gts.extend((f + off, x, y) for f, x, y in s.gt_points)
    write_pr_curves_csv(out / "pr_curves.csv", all_preds, all_gts)
    _write_manifest(out, "evaluate", vars(args))
    overall = results["overall"]
    print(f"mae {overall['mae']:.4f}  mse {overall['mse']:.4f}  "
          f"l-map {overall['l_map']:.4f}  t-map {overall['t_map']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdflow",
        description="synthetic crowd video pipeline: data, training, "
                    "inference, tracking and evaluation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render synthetic sequences")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON scene list; default attribute suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8,
                   help="frames per sequence for the default suite")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("gtmaps", help="build ground-truth maps and tracks")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="write beside the data when omitted")
    p.add_argument("--sigma-loc", type=float, default=3.0)
    p.set_defaults(fn=cmd_gtmaps)

    p = sub.add_parser("train", help="fit the network on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON with model/weights/schedule/train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, help="override the schedule length")
    p.add_argument("--tau", type=int, help="temporal gap between frame pairs")
    p.add_argument("--no-ms", action="store_true", dest="no_ms",
                   help="single-scale variant")
    p.add_argument("--no-loc", action="store_true", dest="no_loc",
                   help="drop the localization head")
    p.add_argument("--no-ass", action="store_true", dest="no_ass",
                   help="drop the association head")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over sequences")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="prediction directory")
    p.add_argument("--tau", type=int)
    p.add_argument("--theta", type=float, default=0.25,
                   help="peak confidence threshold in (0, 1)")
    p.add_argument("--radius", type=int, default=3,
                   help="non-maximum suppression window radius")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("track", help="link detections into tracklets")
    p.add_argument("--pred", required=True, help="prediction directory")
    p.add_argument("--gate", type=float, default=25.0,
                   help="max pixel distance between linked detections")
    p.add_argument("--no-confidence", action="store_true",
                   dest="no_confidence",
                   help="cost by distance only, ignore confidences")
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("evaluate", help="score predictions against truth")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
