"""Two-stage training and batched inference.

Stage 1 fits backbone, FPN, SAS block and detection head on typed TB images.
Stage 2 loads that checkpoint, freezes everything but the classification
head, and trains the head on every image with labels collapsed to
healthy / sick_non_tb / tb.
"""
from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..data import BOX_CLASSES, DIAGNOSIS_CLASSES, TYPED_TB_CLASSES, DatasetIndex
from ..network.boxes import encode_boxes, postprocess, xywh_to_xyxy
from ..network.model import ModelConfig, TBDiagnosisNet, load_checkpoint, parameter_checksum, save_checkpoint
from .assign import assign_anchors
from .augment import augment, resize
from .config import TrainConfig, lr_at
from .losses import box_regression_loss, classification_loss, focal_loss

log = logging.getLogger(__name__)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
LOG_COLUMNS = ("iteration", "stage", "total", "focal", "box", "cls")


class TrainingError(RuntimeError):
    pass


def read_image(path) -> torch.Tensor:
    """1 x H x W normalized float tensor from an 8- or 16-bit grayscale PNG."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1)
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max() > 255 else 255.0
    x = torch.from_numpy(arr.astype(np.float32) / scale)
    return ((x - PIXEL_MEAN) / PIXEL_STD)[None]


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("CTD_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def load_images(index: DatasetIndex) -> list[torch.Tensor]:
    paths = [index.image_path(r) for r in index.records]
    workers = num_workers()
    if workers == 1:
        return [read_image(p) for p in paths]
    with ThreadPoolExecutor(workers) as pool:  # map() keeps record order
        return list(pool.map(read_image, paths))


@dataclass
class Sample:
    image: torch.Tensor
    boxes: np.ndarray   # n x 4 xywh
    labels: np.ndarray  # n box-class indices
    target: int         # diagnosis index


def build_samples(index: DatasetIndex) -> list[Sample]:
    images = load_images(index)
    out = []
    for rec, img in zip(index.records, images):
        boxes = np.array([b.as_list() for b in rec.boxes], dtype=np.float32).reshape(-1, 4)
        labels = np.array([BOX_CLASSES.index(b.tb_class) if b.tb_class in BOX_CLASSES else -1
                           for b in rec.boxes], dtype=np.int64)
        out.append(Sample(img, boxes, labels, DIAGNOSIS_CLASSES.index(rec.diagnosis)))
    return out


def _batch_order(n: int, batch: int, rng: np.random.Generator):
    """Endless stream of (epoch, index batch); drops the ragged tail of each epoch."""
    batch = min(batch, n)
    epoch = 0
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            yield epoch, perm[start:start + batch]
        epoch += 1


def _schedule(cfg: TrainConfig, n_samples: int):
    per_epoch = max(n_samples // min(cfg.batch_size, n_samples), 1)
    total = cfg.max_iters if cfg.max_iters is not None else per_epoch * cfg.epochs
    iters_per_epoch = total / cfg.epochs

    def lr(it: int) -> float:
        epoch = min(int(it / iters_per_epoch), cfg.epochs - 1)
        base = lr_at(epoch, cfg)
        if it < cfg.warmup_iters:
            k = it / cfg.warmup_iters
            base *= cfg.warmup_ratio + (1 - cfg.warmup_ratio) * k
        return base

    return total, lr


def _make_batch(samples, idx, rng, cfg: TrainConfig):
    images, boxes, labels, targets = [], [], [], []
    for i in idx:
        s = samples[i]
        img, bx = augment(s.image, s.boxes, rng, cfg.input_size, cfg.flip_prob)
        images.append(img)
        boxes.append(bx)
        labels.append(s.labels)
        targets.append(s.target)
    return torch.stack(images), boxes, labels, torch.tensor(targets)


def detection_losses(raw, boxes, labels, cfg: TrainConfig):
    anchors = torch.cat(raw.anchors)
    cls = torch.cat(raw.cls_logits, dim=1)
    deltas = torch.cat(raw.box_deltas, dim=1)
    all_labels, pos_deltas, pos_targets = [], [], []
    for i in range(cls.shape[0]):
        gt = xywh_to_xyxy(torch.as_tensor(boxes[i], dtype=anchors.dtype).reshape(-1, 4))
        lab, matched = assign_anchors(anchors, gt, torch.as_tensor(labels[i]).reshape(-1))
        all_labels.append(lab)
        pos = lab >= 0
        if pos.any():
            pos_deltas.append(deltas[i][pos])
            pos_targets.append(encode_boxes(anchors[pos], gt[matched[pos]]))
    lab = torch.cat(all_labels)
    n_pos = max(int((lab >= 0).sum()), 1)
    focal = focal_loss(cls.reshape(-1, cls.shape[-1]), lab, cfg.focal_alpha, cfg.focal_gamma, normalizer=n_pos)
    if pos_deltas:
        box = box_regression_loss(torch.cat(pos_deltas), torch.cat(pos_targets), cfg.smooth_l1_beta, normalizer=n_pos)
    else:
        box = deltas.sum() * 0.0
    return focal, box


def _fmt(v) -> str:
    return "" if v is None else f"{v:.8g}"


def write_loss_log(rows, path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["iteration"], r["stage"]] + [_fmt(r.get(k)) for k in LOG_COLUMNS[2:]])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def _optimizer(params, cfg: TrainConfig):
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def train_stage1(index: DatasetIndex, cfg: TrainConfig, model_cfg: ModelConfig, out_dir=None,
                 samples: list[Sample] | None = None):
    """Return ``(model, loss_rows)``; writes checkpoint and CSV log into ``out_dir`` if given."""
    tb = index.subset(TYPED_TB_CLASSES)
    if len(tb) == 0:
        raise TrainingError("stage 1 needs TB images with typed boxes; none found")
    if samples is None:
        samples = build_samples(tb)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = TBDiagnosisNet(model_cfg)
    model.train()
    params = model.detection_parameters()
    opt = _optimizer(params, cfg)
    total, lr = _schedule(cfg, len(samples))
    rows = []
    batches = _batch_order(len(samples), cfg.batch_size, rng)
    for it in range(total):
        _, idx = next(batches)
        images, boxes, labels, _ = _make_batch(samples, idx, rng, cfg)
        for g in opt.param_groups:
            g["lr"] = lr(it)
        raw = model(images, with_classification=False)
        focal, box = detection_losses(raw, boxes, labels, cfg)
        loss = focal + box
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        rows.append({"iteration": it, "stage": 1, "total": loss.item(), "focal": focal.item(),
                     "box": box.item(), "cls": None})
        if it % 50 == 0:
            log.info("stage1 it %d lr %.2e loss %.4f (focal %.4f box %.4f)", it, lr(it), loss.item(),
                     focal.item(), box.item())
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(model, out / "stage1.pt", {"stage": 1, "train_config": cfg.to_dict()})
        write_loss_log(rows, out / "stage1_loss.csv")
    return model, rows


def frozen_state(model: TBDiagnosisNet):
    return [p for n, p in model.named_parameters() if not n.startswith("cls_head.")]


def train_stage2(index: DatasetIndex, cfg: TrainConfig, checkpoint, out_dir=None,
                 samples: list[Sample] | None = None):
    """Train the classification head only; returns ``(model, loss_rows)``.

    ``checkpoint`` is a path or an already-trained stage-1 model (which is
    copied, not modified).
    """
    if isinstance(checkpoint, TBDiagnosisNet):
        model = TBDiagnosisNet(checkpoint.config)
        model.load_state_dict(checkpoint.state_dict())
    else:
        if checkpoint is None or not Path(checkpoint).exists():
            raise TrainingError(f"stage 2 needs a stage-1 checkpoint, got {checkpoint!r}")
        model, _ = load_checkpoint(checkpoint)
    if len(index) == 0:
        raise TrainingError("stage 2 needs a non-empty dataset")
    if samples is None:
        samples = build_samples(index)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    frozen = frozen_state(model)
    before = parameter_checksum(frozen)
    for p in frozen:
        p.requires_grad_(False)
    model.eval()
    model.cls_head.train()
    params = list(model.cls_head.parameters())
    opt = _optimizer(params, cfg)
    total, lr = _schedule(cfg, len(samples))
    rows = []
    batches = _batch_order(len(samples), cfg.batch_size, rng)
    for it in range(total):
        _, idx = next(batches)
        images, _, _, targets = _make_batch(samples, idx, rng, cfg)
        for g in opt.param_groups:
            g["lr"] = lr(it)
        with torch.no_grad():
            top = model.enhance(model.pyramid(images))[-1]
        loss = classification_loss(model.cls_head(top), targets)
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        rows.append({"iteration": it, "stage": 2, "total": loss.item(), "focal": None, "box": None,
                     "cls": loss.item()})
        if it % 50 == 0:
            log.info("stage2 it %d lr %.2e loss %.4f", it, lr(it), loss.item())
    for p in frozen:
        p.requires_grad_(True)
    if parameter_checksum(frozen) != before:
        raise TrainingError("frozen parameters changed during stage 2")
    model.eval()
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(model, out / "stage2.pt", {"stage": 2, "train_config": cfg.to_dict()})
        write_loss_log(rows, out / "stage2_loss.csv")
    return model, rows


@torch.no_grad()
def predict(model: TBDiagnosisNet, index: DatasetIndex, mode: str = "filtered", batch_size: int = 16,
            images: list[torch.Tensor] | None = None):
    """Run inference on every record; boxes come back in original image coordinates."""
    model.eval()
    size = model.config.input_size
    if images is None:
        images = load_images(index)
    preds = []
    for start in range(0, len(index.records), batch_size):
        recs = index.records[start:start + batch_size]
        batch, scales = [], []
        for rec, img in zip(recs, images[start:start + batch_size]):
            h, w = img.shape[-2:]
            batch.append(resize(img, np.zeros((0, 4), np.float32), size)[0])
            scales.append((w / size, h / size))
        raw = model(torch.stack(batch))
        out = postprocess(raw, model.config, mode, [r.image_id for r in recs])
        for p, (sx, sy) in zip(out, scales):
            for b in p.boxes:
                x, y, bw, bh = b.bbox
                b.bbox = (x * sx, y * sy, bw * sx, bh * sy)
        preds.extend(out)
    return preds


def mean_first_last(rows, key="total", n=10):
    vals = [r[key] for r in rows]
    return float(np.mean(vals[:n])), float(np.mean(vals[-n:]))



__all__ = ["train_stage1", "train_stage2", "predict", "build_samples", "read_image", "write_loss_log",
           "TrainingError", "detection_losses", "mean_first_last"]
