from __future__ import annotations

import torch

from ..network.boxes import box_iou
from .losses import IGNORE, NEGATIVE


def assign_anchors(anchors: torch.Tensor, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
                   pos_iou: float = 0.5, neg_iou: float = 0.4):
    """IoU-based anchor labels.

    Returns ``(labels, matched)``: ``labels`` holds the gt class for
    positives, ``NEGATIVE`` or ``IGNORE``; ``matched`` is the index of the
    assigned gt (meaningful for positives only). Each gt also claims the
    anchors at its own best IoU, provided that IoU is positive.
    """
    n = anchors.shape[0]
    labels = torch.full((n,), NEGATIVE, dtype=torch.long)
    matched = torch.zeros(n, dtype=torch.long)
    if gt_boxes.numel() == 0:
        return labels, matched
    iou = box_iou(anchors, gt_boxes)                 # N x G
    best_iou, best_gt = iou.max(dim=1)
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = IGNORE
    pos = best_iou >= pos_iou
    matched[:] = best_gt
    gt_best = iou.max(dim=0).values                   # G
    for g in range(gt_boxes.shape[0]):
        if gt_best[g] <= 0:
            continue
        claim = iou[:, g] == gt_best[g]
        pos |= claim
        matched[claim & (best_iou < pos_iou)] = g
    labels[pos] = gt_labels[matched[pos]]
    return labels, matched
