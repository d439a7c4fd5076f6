"""The 13-model attention / positional-encoding ablation grid."""
from __future__ import annotations

import logging
from dataclasses import replace

from .data import TB_IMAGE_CLASSES, TYPED_TB_CLASSES, DatasetIndex
from .encoding import LEFT_TO_RIGHT, RIGHT_TO_LEFT
from .evaluation.detection import detection_ap
from .network.model import ModelConfig
from .training.config import TrainConfig
from .training.loop import build_samples, load_images, predict, train_stage1

log = logging.getLogger(__name__)


def _grid():
    rows = [("none/none", dict(attention="none", encoding="none"))]
    for att in ("vanilla", "symmetric"):
        rows.append((f"{att}/ape", dict(attention=att, encoding="ape")))
        rows.append((f"{att}/rpe", dict(attention=att, encoding="rpe")))
        for stn in (False, True):
            for side in (LEFT_TO_RIGHT, RIGHT_TO_LEFT):
                tag = "spe" if stn else "spe-nostn"
                rows.append((f"{att}/{tag}/{side}", dict(attention=att, encoding="spe", spe_stn=stn, spe_side=side)))
    return rows


ABLATION_GRID = tuple(_grid())


def run_ablation(train: DatasetIndex, val: DatasetIndex, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 only=None) -> list[dict]:
    """Train stage 1 per grid entry and score category-agnostic AP on TB validation images."""
    samples = build_samples(train.subset(TYPED_TB_CLASSES))
    val_tb = val.subset(TB_IMAGE_CLASSES)
    val_images = load_images(val_tb)
    rows = []
    for name, overrides in ABLATION_GRID:
        if only is not None and name not in only:
            continue
        cfg = replace(model_cfg, **overrides)
        model, losses = train_stage1(train, train_cfg, cfg, samples=samples)
        preds = predict(model, val_tb, "unfiltered", images=val_images)
        ap, ap50 = detection_ap(preds, val_tb, "category_agnostic", "only_tb")
        log.info("ablation %s: AP50 %.2f AP %.2f", name, ap50, ap)
        rows.append({"name": name, **{k: overrides.get(k, getattr(model_cfg, k)) for k in
                                      ("attention", "encoding", "spe_stn", "spe_side")},
                     "ap50": ap50, "ap": ap, "final_loss": losses[-1]["total"]})
    return rows
