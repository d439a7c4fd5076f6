"""Anchors, box coding and post-processing.

Internally boxes are ``x1, y1, x2, y2`` tensors; the public prediction format
is ``x, y, w, h``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torchvision.ops import batched_nms

STRIDES = (4, 8, 16, 32)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
DEFAULT_SCALES = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
# exp() argument cap for width/height deltas
MAX_LOG_RATIO = math.log(1000.0 / 16)


def base_anchors(base: float, ratios=DEFAULT_RATIOS, scales=DEFAULT_SCALES, dtype=torch.float32):
    """A x 4 anchors centred at the origin; ratio is height / width."""
    out = []
    for r in ratios:
        for s in scales:
            w = base * s / math.sqrt(r)
            h = base * s * math.sqrt(r)
            out.append([-w / 2, -h / 2, w / 2, h / 2])
    return torch.tensor(out, dtype=dtype)


def generate_anchors(level: int, image_size, ratios=DEFAULT_RATIOS, scales=DEFAULT_SCALES,
                     bases=None, dtype=torch.float32) -> torch.Tensor:
    """Anchors for pyramid level 1..4 of an image of ``(height, width)``.

    Returned as (H' * W' * A) x 4 in (row, column, anchor) order, centred on
    cell centres ``stride * (index + 0.5)``.
    """
    if level not in (1, 2, 3, 4):
        raise ValueError(f"level must be in 1..4, got {level}")
    stride = STRIDES[level - 1]
    base = (bases or tuple(4 * s for s in STRIDES))[level - 1]
    h, w = (image_size, image_size) if isinstance(image_size, int) else image_size
    fh, fw = h // stride, w // stride
    cy = (torch.arange(fh, dtype=dtype) + 0.5) * stride
    cx = (torch.arange(fw, dtype=dtype) + 0.5) * stride
    yy, xx = torch.meshgrid(cy, cx, indexing="ij")
    shifts = torch.stack([xx, yy, xx, yy], dim=-1).reshape(-1, 1, 4)
    return (shifts + base_anchors(base, ratios, scales, dtype)[None]).reshape(-1, 4)


def xywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    return torch.cat([b[..., :2], b[..., :2] + b[..., 2:]], dim=-1)


def xyxy_to_xywh(b: torch.Tensor) -> torch.Tensor:
    return torch.cat([b[..., :2], b[..., 2:] - b[..., :2]], dim=-1)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU of xyxy boxes, len(a) x len(b)."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def encode_boxes(anchors: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return torch.stack([(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)], dim=1)


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor, image_size=None) -> torch.Tensor:
    """Apply (tx, ty, tw, th) deltas to xyxy anchors; clip to ``(height, width)`` if given."""
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    tx, ty, tw, th = deltas.unbind(-1)
    cx = ax + tx * aw
    cy = ay + ty * ah
    w = aw * torch.exp(tw.clamp(max=MAX_LOG_RATIO))
    h = ah * torch.exp(th.clamp(max=MAX_LOG_RATIO))
    boxes = torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)
    if image_size is not None:
        ih, iw = (image_size, image_size) if isinstance(image_size, int) else image_size
        boxes = torch.stack([boxes[..., 0].clamp(0, iw), boxes[..., 1].clamp(0, ih),
                             boxes[..., 2].clamp(0, iw), boxes[..., 3].clamp(0, ih)], dim=-1)
    return boxes


@dataclass
class RawOutputs:
    """Network outputs for a batch, per pyramid level."""

    cls_logits: list            # each B x N_l x 2
    box_deltas: list            # each B x N_l x 4
    image_logits: torch.Tensor  # B x 3
    anchors: list = field(default_factory=list)  # each N_l x 4 (xyxy)
    image_size: tuple = (0, 0)


@dataclass
class PredictedBox:
    bbox: tuple
    tb_class: str
    score: float


@dataclass
class ImagePrediction:
    image_id: str
    class_probs: tuple
    boxes: list

    @property
    def predicted_class(self) -> int:
        return max(range(3), key=lambda i: self.class_probs[i])

    def to_json(self) -> dict:
        return {"image_id": self.image_id,
                "class_probs": [float(p) for p in self.class_probs],
                "boxes": [{"bbox": [float(v) for v in b.bbox], "tb_class": b.tb_class, "score": float(b.score)}
                          for b in self.boxes]}


BOX_CLASS_NAMES = ("active_tb", "latent_tb")
TB_INDEX = 2


def postprocess(raw: RawOutputs, config, mode: str = "filtered", image_ids=None) -> list[ImagePrediction]:
    """Scores, thresholding, per-class NMS and top-k; optional non-TB filtering.

    ``filtered`` drops every box of an image whose most likely class is not TB.
    """
    if mode not in ("filtered", "unfiltered"):
        raise ValueError(f"unknown mode {mode!r}")
    batch = raw.image_logits.shape[0]
    probs = torch.softmax(raw.image_logits.detach().double(), dim=1)
    preds = []
    for i in range(batch):
        all_boxes, all_scores, all_labels = [], [], []
        for logits, deltas, anchors in zip(raw.cls_logits, raw.box_deltas, raw.anchors):
            scores = torch.sigmoid(logits[i].detach()).flatten()
            keep = scores >= config.score_threshold
            idx = torch.nonzero(keep).squeeze(1)
            if idx.numel() > config.pre_nms_top:
                top = scores[idx].topk(config.pre_nms_top).indices
                idx = idx[top]
            anchor_idx = idx // logits.shape[-1]
            labels = idx % logits.shape[-1]
            boxes = decode_boxes(anchors[anchor_idx], deltas[i].detach()[anchor_idx], raw.image_size)
            all_boxes.append(boxes)
            all_scores.append(scores[idx])
            all_labels.append(labels)
        boxes = torch.cat(all_boxes)
        scores = torch.cat(all_scores)
        labels = torch.cat(all_labels)
        valid = ((boxes[:, 2] - boxes[:, 0]) > 0) & ((boxes[:, 3] - boxes[:, 1]) > 0)
        boxes, scores, labels = boxes[valid], scores[valid], labels[valid]
        keep = batched_nms(boxes.float(), scores.float(), labels, config.nms_iou)[: config.max_detections]
        p = probs[i]
        out = []
        if mode == "unfiltered" or int(p.argmax()) == TB_INDEX:
            xywh = xyxy_to_xywh(boxes[keep])
            for b, s, l in zip(xywh.tolist(), scores[keep].tolist(), labels[keep].tolist()):
                out.append(PredictedBox(tuple(b), BOX_CLASS_NAMES[l], s))
        image_id = image_ids[i] if image_ids is not None else str(i)
        preds.append(ImagePrediction(image_id, tuple(float(v) for v in p), out))
    return preds
