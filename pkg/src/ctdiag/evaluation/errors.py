"""Five-curve error breakdown for category-agnostic detection.

C75 / C50 / Loc are ordinary PR curves at IoU 0.75 / 0.5 / 0.1. BG repeats
Loc with every unmatched detection removed. FN additionally credits each
missed ground-truth box with a unit-score pseudo-detection, so it reaches
recall 1 at precision 1.
"""
from __future__ import annotations

import numpy as np

from ..data import DatasetIndex
from .detection import average, build_scenes, greedy_match, interpolate, iou_matrix, pr_points

CURVES = ("C75", "C50", "Loc", "BG", "FN")
_THRESHOLDS = {"C75": 0.75, "C50": 0.5, "Loc": 0.1}


def _matched(scenes, threshold):
    scores, tps, missed = [], [], 0
    for s in scenes:
        tp, used = greedy_match(iou_matrix(s.dets, s.gts), threshold)
        scores.append(s.scores)
        tps.append(tp)
        missed += int((~used).sum())
    return np.concatenate(scores) if scores else np.zeros(0), np.concatenate(tps) if tps else np.zeros(0, bool), missed


def error_curves(scenes) -> dict[str, np.ndarray]:
    n_gt = sum(len(s.gts) for s in scenes)
    if n_gt == 0:
        return {k: np.zeros(101) for k in CURVES}
    out = {}
    for name, t in _THRESHOLDS.items():
        scores, tp, _ = _matched(scenes, t)
        out[name] = interpolate(*pr_points(scores, tp, n_gt))
    scores, tp, missed = _matched(scenes, _THRESHOLDS["Loc"])
    out["BG"] = interpolate(*pr_points(scores[tp], tp[tp], n_gt))
    fn_scores = np.concatenate([np.ones(missed), scores[tp]])
    fn_tp = np.ones(len(fn_scores), dtype=bool)
    out["FN"] = interpolate(*pr_points(fn_scores, fn_tp, n_gt))
    return out


def error_analysis(predictions, index: DatasetIndex, mode: str = "only_tb") -> dict[str, np.ndarray]:
    """Curves keyed by name, each 101 precision values over recall 0..1."""
    return error_curves(build_scenes(predictions, index, "category_agnostic", mode))


def curve_areas(curves) -> dict[str, float]:
    return {k: average(v) for k, v in curves.items()}
