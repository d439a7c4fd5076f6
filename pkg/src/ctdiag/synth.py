"""Deterministic synthetic chest X-ray surrogate.

Each image starts from a mirror-symmetric chest template (two lung fields
plus smoothed texture, built on the right half and flipped onto the left).
Non-TB disease adds blob pairs at mirrored positions; TB adds blobs in one
lung only, and those are the annotated boxes. A whole-image shift/rotation
makes the symmetry approximate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import IMAGE_CLASSES, CxrRecord, DatasetIndex, TbBox, save_dataset


def _default_counts():
    return {
        "train": {"healthy": 200, "sick_non_tb": 200, "tb_active": 120, "tb_latent": 50,
                  "tb_active_latent": 30, "tb_uncertain": 0},
        "val": {"healthy": 60, "sick_non_tb": 60, "tb_active": 36, "tb_latent": 15,
                "tb_active_latent": 9, "tb_uncertain": 0},
        "test": {"healthy": 60, "sick_non_tb": 60, "tb_active": 36, "tb_latent": 15,
                 "tb_active_latent": 9, "tb_uncertain": 5},
    }


@dataclass
class SynthConfig:
    counts: dict = field(default_factory=_default_counts)
    image_size: int = 64
    lesion_count: tuple = (1, 3)
    lesion_size: tuple = (12.0, 24.0)
    texture_amplitude: float = 0.08
    jitter_px: float = 2.0
    jitter_deg: float = 3.0
    # chance that a TB image also carries a symmetric (non-TB) blob pair
    distractor_prob: float = 0.5
    seed: int = 0

    def validate(self):
        for split, per_class in self.counts.items():
            for cls, n in per_class.items():
                if cls not in IMAGE_CLASSES:
                    raise ValueError(f"unknown image class {cls!r} in split {split!r}")
                if int(n) < 0:
                    raise ValueError(f"negative count for {split}/{cls}")
        lo, hi = self.lesion_count
        if not 1 <= lo <= hi:
            raise ValueError("lesion_count must satisfy 1 <= min <= max")
        smin, smax = self.lesion_size
        if not 0 < smin <= smax < self.image_size / 2:
            raise ValueError("lesion sizes must be positive and below half the image size")
        if self.image_size < 16 or self.image_size % 2:
            raise ValueError("image_size must be even and at least 16")


_PREFIX = {"healthy": "h", "sick_non_tb": "s", "tb_active": "tba", "tb_latent": "tbl",
           "tb_active_latent": "tbal", "tb_uncertain": "tbu"}


def _template(rng, size, amplitude):
    """Mirror-symmetric chest: right half built directly, left half is its flip."""
    half = size // 2
    v = (np.arange(size) + 0.5)[:, None]
    u = (np.arange(half) + 0.5)[None, :]  # distance of right-half pixel centres from the centre line
    body = ((u / (0.48 * size)) ** 2 + ((v - size / 2) / (0.50 * size)) ** 2) <= 1.0
    lung = (((u - 0.22 * size) / (0.15 * size)) ** 2 + ((v - 0.50 * size) / (0.30 * size)) ** 2) <= 1.0
    right = np.where(body, 0.55, 0.12) - 0.30 * lung
    right = ndimage.gaussian_filter(right, 1.0)
    texture = ndimage.gaussian_filter(rng.standard_normal((size, half)), 1.5)
    texture /= max(np.abs(texture).max(), 1e-12)
    right = right + amplitude * texture
    return np.concatenate([right[:, ::-1], right], axis=1)


def _blob(size, cx, cy, box_w, box_h, amplitude, sharp):
    v = (np.arange(size) + 0.5)[:, None]
    u = (np.arange(size) + 0.5)[None, :]
    r2 = ((u - cx) / (box_w / 4)) ** 2 + ((v - cy) / (box_h / 4)) ** 2
    if sharp:
        # flat-topped compact profile; still ~0 by the box edge (r = 2)
        return amplitude * np.exp(-0.5 * (r2 / 2.0) ** 2)
    return amplitude * np.exp(-0.5 * r2)


def _lung_centre(rng, size, side, w, h):
    """Random centre inside one lung; ``side`` is +1 (right half) or -1 (left)."""
    cu = rng.uniform(0.12 * size, 0.36 * size)
    cx = size / 2 + side * cu
    cy = rng.uniform(0.22 * size, 0.78 * size)
    cx = float(np.clip(cx, w / 2 + 1, size - w / 2 - 1))
    cy = float(np.clip(cy, h / 2 + 1, size - h / 2 - 1))
    return cx, cy


def _overlaps(box, others, limit=0.1):
    """True when ``box`` covers more than ``limit`` of its own or another box's area."""
    x, y, w, h = box
    for ox, oy, ow, oh in others:
        iw = min(x + w, ox + ow) - max(x, ox)
        ih = min(y + h, oy + oh) - max(y, oy)
        if iw > 0 and ih > 0 and iw * ih > limit * min(w * h, ow * oh):
            return True
    return False


def _jitter(image, boxes, rng, cfg):
    size = image.shape[0]
    theta = math.radians(rng.uniform(-cfg.jitter_deg, cfg.jitter_deg)) if cfg.jitter_deg > 0 else 0.0
    dx, dy = (rng.uniform(-cfg.jitter_px, cfg.jitter_px, size=2) if cfg.jitter_px > 0 else (0.0, 0.0))
    if theta == 0.0 and dx == 0.0 and dy == 0.0:
        return image, boxes
    c, s = math.cos(theta), math.sin(theta)
    # forward map on (row, col) about the image centre: out = R @ (in - ctr) + ctr + t
    rot = np.array([[c, -s], [s, c]])
    ctr = np.array([(size - 1) / 2, (size - 1) / 2])
    shift = np.array([dy, dx])
    inv = rot.T
    offset = ctr - inv @ (ctr + shift)
    out = ndimage.affine_transform(image, inv, offset=offset, order=1, mode="nearest")
    moved = []
    for b in boxes:
        bc = np.array([b.y + b.h / 2 - 0.5, b.x + b.w / 2 - 0.5])
        ny, nx = rot @ (bc - ctr) + ctr + shift + 0.5
        x0 = max(0.0, nx - b.w / 2)
        y0 = max(0.0, ny - b.h / 2)
        x1 = min(float(size), nx + b.w / 2)
        y1 = min(float(size), ny + b.h / 2)
        moved.append(TbBox(round(float(x0), 3), round(float(y0), 3), round(float(x1 - x0), 3),
                           round(float(y1 - y0), 3), b.tb_class))
    return out, moved


def render_sample(image_class: str, rng: np.random.Generator, cfg: SynthConfig):
    """Return (float image in [0, 1], list of TbBox) for one synthetic record."""
    size = cfg.image_size
    image = _template(rng, size, cfg.texture_amplitude)
    smin, smax = cfg.lesion_size
    mid = (smin + smax) / 2
    boxes: list[TbBox] = []
    taken: list[tuple] = []

    def add_pair():
        for _ in range(20):
            w = rng.uniform(mid, smax)
            h = w * rng.uniform(0.8, 1.25)
            h = min(h, smax)
            cx, cy = _lung_centre(rng, size, 1, w, h)
            amp = rng.uniform(0.25, 0.45)
            a = (cx - w / 2, cy - h / 2, w, h)
            b = (size - cx - w / 2, cy - h / 2, w, h)
            if _overlaps(a, taken) or _overlaps(b, taken):
                continue
            taken.extend([a, b])
            return _blob(size, cx, cy, w, h, amp, False) + _blob(size, size - cx, cy, w, h, amp, False)
        return 0.0

    if image_class == "sick_non_tb":
        for _ in range(int(rng.integers(1, 3))):
            image = image + add_pair()
    elif image_class != "healthy":
        n = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
        if image_class == "tb_active":
            kinds = ["active_tb"] * n
        elif image_class == "tb_latent":
            kinds = ["latent_tb"] * n
        elif image_class == "tb_active_latent":
            n = max(n, 2)
            kinds = ["active_tb", "latent_tb"] + list(rng.choice(["active_tb", "latent_tb"], size=n - 2))
        else:
            kinds = list(rng.choice(["active_tb", "latent_tb"], size=n))
        side = 1 if rng.random() < 0.5 else -1
        placed = []
        for kind in kinds:
            for _ in range(200):
                if kind == "active_tb":
                    w = rng.uniform(mid, smax)
                    amp = rng.uniform(0.25, 0.45)
                else:
                    w = rng.uniform(smin, mid)
                    amp = rng.uniform(0.35, 0.55)
                h = min(w * rng.uniform(0.8, 1.25), smax)
                cx, cy = _lung_centre(rng, size, side, w, h)
                box = (cx - w / 2, cy - h / 2, w, h)
                mirror = (size - cx - w / 2, cy - h / 2, w, h)
                if _overlaps(box, taken) or _overlaps(mirror, taken):
                    continue
                taken.extend([box, mirror])  # keep the mirrored area of a lesion blob-free
                placed.append((cx, cy, w, h, amp, kind))
                break
        for cx, cy, w, h, amp, kind in placed:
            image = image + _blob(size, cx, cy, w, h, amp, kind == "latent_tb")
            tb_class = None if image_class == "tb_uncertain" else str(kind)
            boxes.append(TbBox(float(cx - w / 2), float(cy - h / 2), float(w), float(h), tb_class))
        if rng.random() < cfg.distractor_prob:
            image = image + add_pair()
    image, boxes = _jitter(image, boxes, rng, cfg)
    return np.clip(image, 0.0, 1.0), boxes


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_synthetic(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    """Write ``images/*.png`` and ``annotations/<split>.json`` under ``out_dir``.

    Every record gets its own generator seeded from (seed, split, class, index),
    so output does not depend on iteration order and is reproducible bit for bit.
    """
    cfg.validate()
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for si, split in enumerate(sorted(cfg.counts)):
        records = []
        for ci, cls in enumerate(IMAGE_CLASSES):
            for i in range(int(cfg.counts[split].get(cls, 0))):
                rng = np.random.default_rng([cfg.seed, si, ci, i])
                image, boxes = render_sample(cls, rng, cfg)
                image_id = f"{split}_{_PREFIX[cls]}{i:04d}"
                file_name = f"images/{image_id}.png"
                Image.fromarray(to_uint8(image), mode="L").save(out / file_name)
                records.append(CxrRecord(
                    image_id=image_id, file_name=file_name,
                    width=cfg.image_size, height=cfg.image_size, image_class=cls,
                    gender=("male", "female")[int(rng.integers(0, 2))],
                    age=int(rng.integers(18, 80)), boxes=boxes,
                ))
        index = DatasetIndex(split, records, out)
        index.validate()
        written[split] = save_dataset(index, out / "annotations" / f"{split}.json")
    return written
