from __future__ import annotations

import torch
import torch.nn.functional as F

# per-anchor target codes besides class indices
NEGATIVE = -1
IGNORE = -2


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0,
               normalizer: float | None = None) -> torch.Tensor:
    """Sigmoid focal loss summed over non-ignored anchors.

    ``logits`` is N x K, ``labels`` holds a class index for positives,
    ``NEGATIVE`` or ``IGNORE``. The sum is divided by ``normalizer`` (defaults
    to the number of positives, at least 1).
    """
    keep = labels != IGNORE
    logits = logits[keep]
    labels = labels[keep]
    targets = torch.zeros_like(logits)
    pos = labels >= 0
    targets[pos, labels[pos]] = 1.0
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    loss = alpha_t * (1 - p_t) ** gamma * ce
    if normalizer is None:
        normalizer = max(int(pos.sum()), 1)
    return loss.sum() / normalizer


def smooth_l1(diff: torch.Tensor, beta: float = 1.0 / 9) -> torch.Tensor:
    a = diff.abs()
    return torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def box_regression_loss(deltas: torch.Tensor, targets: torch.Tensor, beta: float = 1.0 / 9,
                        normalizer: float | None = None) -> torch.Tensor:
    """Smooth-L1 over positive anchors (rows of ``deltas``), summed over coordinates."""
    if normalizer is None:
        normalizer = max(deltas.shape[0], 1)
    return smooth_l1(deltas - targets, beta).sum() / normalizer


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)
