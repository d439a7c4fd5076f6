from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def hflip(image: torch.Tensor, boxes: np.ndarray):
    """Mirror a C x H x W image and its xywh boxes left-right."""
    width = image.shape[-1]
    out = boxes.copy()
    if len(out):
        out[:, 0] = np.maximum(width - boxes[:, 0] - boxes[:, 2], 0)
    return torch.flip(image, dims=[-1]), out


def resize(image: torch.Tensor, boxes: np.ndarray, size: int):
    h, w = image.shape[-2:]
    if (h, w) == (size, size):
        return image, boxes
    image = F.interpolate(image[None], size=(size, size), mode="bilinear", align_corners=False)[0]
    scale = np.array([size / w, size / h, size / w, size / h], dtype=boxes.dtype)
    return image, boxes * scale if len(boxes) else boxes


def augment(image: torch.Tensor, boxes: np.ndarray, rng: np.random.Generator, size: int,
            flip_prob: float = 0.5, force_flip: bool | None = None):
    """Random horizontal flip followed by resizing to ``size`` x ``size``.

    One draw from ``rng`` is consumed per call, whichever way it falls.
    """
    draw = rng.random()
    flip = draw < flip_prob if force_flip is None else force_flip
    if flip:
        image, boxes = hflip(image, boxes)
    return resize(image, boxes, size)
