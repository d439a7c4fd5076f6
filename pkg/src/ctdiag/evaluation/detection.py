"""COCO-style box AP with 101-point interpolation.

Detections tied on score are scored as a group: precision/recall are only
read after the whole group is counted, so results do not depend on the
order in which images are visited.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..data import TB_IMAGE_CLASSES, DatasetIndex

IOU_THRESHOLDS = tuple((50 + 5 * i) / 100 for i in range(10))
RECALL_POINTS = np.arange(101) / 100
CATEGORY_VIEWS = ("category_agnostic", "active_tb", "latent_tb")
MODES = ("all", "only_tb")
MAX_DETS = 100


def iou(a, b) -> float:
    """IoU of two ``[x, y, w, h]`` boxes."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError(f"degenerate box in iou({list(a)}, {list(b)})")
    iw = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    ih = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xywh arrays (D x 4, G x 4)."""
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    d = dets[:, None, :]
    g = gts[None, :, :]
    iw = np.minimum(d[..., 0] + d[..., 2], g[..., 0] + g[..., 2]) - np.maximum(d[..., 0], g[..., 0])
    ih = np.minimum(d[..., 1] + d[..., 3], g[..., 1] + g[..., 3]) - np.maximum(d[..., 1], g[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = d[..., 2] * d[..., 3] + g[..., 2] * g[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


@dataclass
class ImageScene:
    """Detections (score-sorted) and ground truth of one image for one category view."""

    scores: np.ndarray
    dets: np.ndarray
    gts: np.ndarray

    @classmethod
    def build(cls, dets, scores, gts):
        dets = np.asarray(dets, dtype=float).reshape(-1, 4)
        scores = np.asarray(scores, dtype=float).reshape(-1)
        order = np.argsort(-scores, kind="mergesort")[:MAX_DETS]
        return cls(scores[order], dets[order], np.asarray(gts, dtype=float).reshape(-1, 4))


def greedy_match(ious: np.ndarray, threshold: float):
    """Score-ordered matching; returns (det is TP, gt is matched)."""
    n_det, n_gt = ious.shape
    det_tp = np.zeros(n_det, dtype=bool)
    gt_used = np.zeros(n_gt, dtype=bool)
    for d in range(n_det):
        best, m = threshold, -1
        for g in range(n_gt):
            if gt_used[g] or ious[d, g] < best:
                continue
            best, m = ious[d, g], g
        if m >= 0:
            det_tp[d] = True
            gt_used[m] = True
    return det_tp, gt_used


def pr_points(scores: np.ndarray, tp: np.ndarray, n_gt: int):
    """(recall, precision) after each distinct score level, highest first."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    t = tp[order].astype(np.int64)
    ctp = np.cumsum(t)
    cfp = np.cumsum(1 - t)
    if len(s):
        ends = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    else:
        ends = np.zeros(0, dtype=int)
    tps, fps = ctp[ends], cfp[ends]
    recall = tps / n_gt if n_gt else np.zeros(len(ends))
    precision = tps / np.maximum(tps + fps, 1)
    return recall, precision


def interpolate(recall: np.ndarray, precision: np.ndarray) -> np.ndarray:
    """Precision envelope sampled at the 101 recall points (0 beyond max recall)."""
    env = precision.astype(float).copy()
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    out = np.zeros(len(RECALL_POINTS))
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    ok = idx < len(env)
    out[ok] = env[idx[ok]]
    return out


def average(values) -> float:
    """Mean via an exact sum; clamped to the value range, which the final division can overshoot by an ulp."""
    values = [float(v) for v in values]
    return min(max(math.fsum(values) / len(values), min(values)), max(values))


def curve_at(scenes, threshold: float):
    """Interpolated precision at 101 recall points for ``scenes`` at one IoU threshold."""
    n_gt = sum(len(s.gts) for s in scenes)
    if n_gt == 0:
        return None
    scores, tps = [], []
    for s in scenes:
        tp, _ = greedy_match(iou_matrix(s.dets, s.gts), threshold)
        scores.append(s.scores)
        tps.append(tp)
    recall, precision = pr_points(np.concatenate(scores) if scores else np.zeros(0),
                                  np.concatenate(tps) if tps else np.zeros(0, dtype=bool), n_gt)
    return interpolate(recall, precision)


def scenes_ap(scenes, thresholds=IOU_THRESHOLDS):
    """(AP averaged over ``thresholds``, AP at the first threshold) as fractions; NaN without gts."""
    per_t = []
    for t in thresholds:
        c = curve_at(scenes, t)
        if c is None:
            return float("nan"), float("nan")
        per_t.append(average(c))
    return average(per_t), per_t[0]


def eval_records(index: DatasetIndex, mode: str):
    if mode not in MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "only_tb":
        return [r for r in index.records if r.image_class in TB_IMAGE_CLASSES]
    return list(index.records)


def build_scenes(predictions, index: DatasetIndex, category_view: str, mode: str):
    if category_view not in CATEGORY_VIEWS:
        raise ValueError(f"unknown category view {category_view!r}; expected one of {CATEGORY_VIEWS}")
    by_id = {p.image_id: p for p in predictions}
    scenes = []
    for rec in eval_records(index, mode):
        pred = by_id.get(rec.image_id)
        boxes = pred.boxes if pred is not None else []
        if category_view == "category_agnostic":
            gts = [b.as_list() for b in rec.boxes]
            dets = [(b.bbox, b.score) for b in boxes]
        else:
            if rec.image_class == "tb_uncertain":
                continue
            gts = [b.as_list() for b in rec.boxes if b.tb_class == category_view]
            dets = [(b.bbox, b.score) for b in boxes if b.tb_class == category_view]
        scenes.append(ImageScene.build([d for d, _ in dets], [s for _, s in dets], gts))
    return scenes


def detection_ap(predictions, index: DatasetIndex, category_view: str = "category_agnostic",
                 mode: str = "all"):
    """(AP, AP50) in percent for one category view and evaluation mode."""
    ap, ap50 = scenes_ap(build_scenes(predictions, index, category_view, mode))
    return 100.0 * ap, 100.0 * ap50


__all__ = ["iou", "iou_matrix", "greedy_match", "pr_points", "interpolate", "detection_ap",
           "build_scenes", "scenes_ap", "curve_at", "IOU_THRESHOLDS", "RECALL_POINTS",
           "CATEGORY_VIEWS", "MODES"]
