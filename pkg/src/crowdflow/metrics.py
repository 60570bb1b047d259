"""Counting, localization and tracking evaluation protocols.

Counting error pools every frame of every video.  Localization AP matches
predictions to ground truth greedily in confidence order and averages the
per-threshold APs over pixel distances 1..25.  Tracking AP scores whole
tracklets by their frame-overlap ratio against ground-truth trajectories
at ratio thresholds 0.10 / 0.15 / 0.20.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .postprocess import Detection, Tracklet

__all__ = [
    "CountRecord", "mae_mse", "localization_ap", "localization_pr_points",
    "l_map", "tracklet_match_ratio", "tracking_ap", "t_map",
    "L_MAP_DISTANCES", "T_MAP_RATIOS", "TRACK_MATCH_DISTANCE",
    "RESULT_KEYS", "aggregate_results", "write_results_json",
    "write_pr_curves_csv",
]

L_MAP_DISTANCES = tuple(range(1, 26))
T_MAP_RATIOS = (0.10, 0.15, 0.20)
TRACK_MATCH_DISTANCE = 25.0

RESULT_KEYS = ("mae", "mse", "l_map", "l_ap10", "l_ap15", "l_ap20",
               "t_map", "t_ap10", "t_ap15", "t_ap20")


@dataclass(frozen=True)
class CountRecord:
    """True and predicted count for one frame of one video."""

    video: int
    frame: int
    true_count: float
    pred_count: float


def mae_mse(records) -> tuple[float, float]:
    """Mean absolute error and root mean squared error over all frames."""
    records = list(records)
    if not records:
        raise ValueError("no count records to evaluate")
    err = np.array([r.true_count - r.pred_count for r in records])
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


def _greedy_tp_flags(preds, gts, dist):
    """TP flag per prediction in descending-confidence order.

    Each prediction grabs the nearest still-unmatched ground truth in its
    frame within ``dist``; distance ties go to the lower ground-truth index.
    Returns the flags plus the matched count.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].conf)
    gt_by_frame: dict = {}
    for gi, (frame, x, y) in enumerate(gts):
        gt_by_frame.setdefault(frame, []).append((gi, x, y))
    taken = [False] * len(gts)
    flags = []
    for pi in order:
        p = preds[pi]
        best = None
        for gi, x, y in gt_by_frame.get(p.frame, ()):
            if taken[gi]:
                continue
            d = float(np.hypot(p.x - x, p.y - y))
            if d > dist:
                continue
            if best is None or d < best[0] - 1e-12:
                best = (d, gi)
        if best is None:
            flags.append(False)
        else:
            taken[best[1]] = True
            flags.append(True)
    return flags


def _ap_from_flags(flags, n_gt) -> float:
    """Step-integrated AP: sum of precisions at true-positive ranks over n_gt."""
    if n_gt == 0:
        return 1.0 if not flags else 0.0
    tp = 0
    precision_sum = 0.0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            tp += 1
            precision_sum += tp / rank
    return precision_sum / n_gt


def localization_ap(preds, gts, dist) -> float:
    """AP of point detections at one matching distance.

    ``preds`` are Detections; ``gts`` are (frame, x, y) triples.  Matching
    happens within a frame only.
    """
    return _ap_from_flags(_greedy_tp_flags(list(preds), list(gts), dist),
                          len(list(gts)))


def localization_pr_points(preds, gts, dist):
    """(recall, precision) after each prediction, confidence-descending."""
    preds, gts = list(preds), list(gts)
    flags = _greedy_tp_flags(preds, gts, dist)
    n_gt = len(gts)
    pts = []
    tp = 0
    for rank, flag in enumerate(flags, start=1):
        tp += int(flag)
        recall = tp / n_gt if n_gt else 0.0
        pts.append((recall, tp / rank))
    return pts


def l_map(preds, gts, distances=L_MAP_DISTANCES) -> dict:
    """Mean AP over the pixel-distance sweep, plus selected thresholds."""
    preds, gts = list(preds), list(gts)
    per = {d: localization_ap(preds, gts, d) for d in distances}
    return {
        "l_map": sum(per.values()) / len(per),
        "l_ap10": per.get(10, float("nan")),
        "l_ap15": per.get(15, float("nan")),
        "l_ap20": per.get(20, float("nan")),
        "per_distance": per,
    }


def tracklet_match_ratio(pred: Tracklet, gt_traj: dict, dist=TRACK_MATCH_DISTANCE) -> float:
    """Matched-frame fraction against the longer of the two tracks."""
    matched = 0
    for d in pred.detections:
        gt = gt_traj.get(d.frame)
        if gt is not None and np.hypot(d.x - gt[0], d.y - gt[1]) <= dist:
            matched += 1
    denom = max(len(pred.detections), len(gt_traj))
    return matched / denom if denom else 0.0


def tracking_ap(tracklets, gt_trajs, ratio_threshold,
                dist=TRACK_MATCH_DISTANCE) -> float:
    """AP over tracklets sorted by average confidence.

    A tracklet is a true positive when its best still-unmatched trajectory
    overlaps strictly more than ``ratio_threshold``; that trajectory is then
    consumed.  Ratio ties prefer the lower trajectory index.
    """
    tracklets = list(tracklets)
    gt_trajs = list(gt_trajs)
    order = sorted(range(len(tracklets)), key=lambda i: -tracklets[i].avg_conf)
    taken = [False] * len(gt_trajs)
    flags = []
    for ti in order:
        t = tracklets[ti]
        best = None
        for gi, traj in enumerate(gt_trajs):
            if taken[gi]:
                continue
            r = tracklet_match_ratio(t, traj, dist)
            if best is None or r > best[0] + 1e-12:
                best = (r, gi)
        if best is not None and best[0] > ratio_threshold:
            taken[best[1]] = True
            flags.append(True)
        else:
            flags.append(False)
    return _ap_from_flags(flags, len(gt_trajs))


def t_map(tracklets, gt_trajs, ratios=T_MAP_RATIOS,
          dist=TRACK_MATCH_DISTANCE) -> dict:
    per = {rho: tracking_ap(tracklets, gt_trajs, rho, dist) for rho in ratios}
    return {
        "t_map": sum(per.values()) / len(per),
        "t_ap10": per[0.10],
        "t_ap15": per[0.15],
        "t_ap20": per[0.20],
        "per_ratio": per,
    }


# ---------------------------------------------------------------------------
# dataset-level aggregation


@dataclass
class SequenceEval:
    """Everything evaluation needs from one sequence."""

    name: str
    attributes: dict
    count_records: list
    pred_detections: list
    gt_points: list          # (frame, x, y)
    tracklets: list
    gt_trajectories: list    # dict frame -> (x, y)


def _pool_metrics(seqs: list[SequenceEval]) -> dict:
    """The ten headline numbers over a pool of sequences.

    Frames from different sequences never match each other: detection frame
    keys are offset per sequence before pooling, and tracking is averaged
    per sequence (weighted by trajectory count) since tracklets cannot
    cross sequences.
    """
    records = [r for s in seqs for r in s.count_records]
    mae, mse = mae_mse(records) if records else (float("nan"),) * 2

    preds, gts = [], []
    for si, s in enumerate(seqs):
        off = (si + 1) * 10 ** 7
        preds.extend(Detection(d.frame + off, d.x, d.y, d.conf)
                     for d in s.pred_detections)
        gts.extend((f + off, x, y) for f, x, y in s.gt_points)
    loc = l_map(preds, gts)

    tap = {rho: [] for rho in T_MAP_RATIOS}
    weights = []
    for s in seqs:
        res = t_map(s.tracklets, s.gt_trajectories)
        weights.append(max(len(s.gt_trajectories), 1))
        for rho in T_MAP_RATIOS:
            tap[rho].append(res["per_ratio"][rho])
    wsum = sum(weights)
    per_ratio = {rho: sum(w * v for w, v in zip(weights, tap[rho])) / wsum
                 for rho in T_MAP_RATIOS}
    return {
        "mae": mae,
        "mse": mse,
        "l_map": loc["l_map"],
        "l_ap10": loc["l_ap10"],
        "l_ap15": loc["l_ap15"],
        "l_ap20": loc["l_ap20"],
        "t_map": sum(per_ratio.values()) / len(per_ratio),
        "t_ap10": per_ratio[0.10],
        "t_ap15": per_ratio[0.15],
        "t_ap20": per_ratio[0.20],
    }


def aggregate_results(seqs: list[SequenceEval]) -> dict:
    """Overall metrics plus one breakdown per attribute axis."""
    if not seqs:
        raise ValueError("no sequences to evaluate")
    results: dict = {"overall": _pool_metrics(seqs)}
    axes: dict[str, dict[str, list[SequenceEval]]] = {}
    for s in seqs:
        for axis, value in (s.attributes or {}).items():
            axes.setdefault(axis, {}).setdefault(str(value), []).append(s)
    for axis, groups in sorted(axes.items()):
        results[f"by_{axis}"] = {
            value: _pool_metrics(members)
            for value, members in sorted(groups.items())
        }
    return results


def write_results_json(path, results: dict):
    """Stable serialization: sorted keys, fixed float formatting."""
    Path(path).write_text(
        json.dumps(results, indent=2, sort_keys=True, allow_nan=True) + "\n")


def write_pr_curves_csv(path, preds, gts, distances=(10, 15, 20)):
    """PR points per matching distance, for external plotting."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distance", "rank", "recall", "precision"])
        for d in distances:
            for rank, (recall, precision) in enumerate(
                    localization_pr_points(preds, gts, d), start=1):
                writer.writerow([d, rank, repr(recall), repr(precision)])
