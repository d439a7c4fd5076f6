"""Full detector: backbone, FPN, shared SAS block, detection and classification heads."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
from torch import nn

from ..attention import SASBlock
from ..encoding import RIGHT_TO_LEFT
from .backbone import FPN, ResNet50Backbone, TinyResNet
from .boxes import DEFAULT_RATIOS, DEFAULT_SCALES, STRIDES, RawOutputs, generate_anchors
from .heads import ClassificationHead, DetectionHead

CHECKPOINT_FORMAT = "ctdiag-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    backbone: str = "resnet50"               # "resnet50" or "tiny"
    stage_widths: tuple = (32, 64, 64, 64)   # tiny backbone only
    stage_blocks: tuple = (1, 1, 1, 1)
    channels: int = 256
    heads: int = 8
    points: int = 4
    attention: str = "symmetric"             # none | vanilla | symmetric
    encoding: str = "spe"                    # none | ape | rpe | spe
    spe_stn: bool = True
    spe_side: str = RIGHT_TO_LEFT
    anchor_ratios: tuple = DEFAULT_RATIOS
    anchor_scales: tuple = DEFAULT_SCALES
    anchor_bases: tuple = (16, 32, 64, 128)
    head_convs: int = 4
    cls_width: int = 512
    cls_convs: int = 5
    cls_pools: int = 3
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    pre_nms_top: int = 1000
    max_detections: int = 100
    input_size: int = 512

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        if self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.attention not in ("none", "vanilla", "symmetric"):
            raise ValueError(f"unknown attention {self.attention!r}")
        if self.encoding not in ("none", "ape", "rpe", "spe"):
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if self.backbone not in ("resnet50", "tiny"):
            raise ValueError(f"unknown backbone {self.backbone!r}")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(backbone="tiny", channels=64, cls_width=128, cls_pools=1, input_size=64)
        base.update(overrides)
        return cls(**base)

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_ratios) * len(self.anchor_scales)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class TBDiagnosisNet(nn.Module):
    """Expects normalized 1- or 3-channel images whose sides are multiples of 32."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.backbone == "tiny":
            self.backbone = TinyResNet(config.stage_widths, config.stage_blocks)
        else:
            self.backbone = ResNet50Backbone()
        self.fpn = FPN(self.backbone.out_channels, config.channels)
        self.sas = None
        if config.attention != "none":
            self.sas = SASBlock(config.channels, config.heads, config.points, config.attention,
                                config.encoding, config.spe_stn, config.spe_side)
        self.det_head = DetectionHead(config.channels, config.num_anchors, 2, config.head_convs)
        self.cls_head = ClassificationHead(config.channels, config.cls_width, config.cls_convs, config.cls_pools)
        self._anchor_cache = {}

    def pyramid(self, images: torch.Tensor):
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size must be a multiple of 32, got {h}x{w}")
        if images.shape[1] == 1:
            images = images.expand(-1, 3, -1, -1)
        return self.fpn(self.backbone(images))

    def enhance(self, levels):
        return levels if self.sas is None else self.sas.forward_pyramid(levels)

    def anchors(self, image_size, dtype=torch.float32):
        key = (tuple(image_size), dtype)
        if key not in self._anchor_cache:
            c = self.config
            self._anchor_cache[key] = [generate_anchors(i, image_size, c.anchor_ratios, c.anchor_scales,
                                                        c.anchor_bases, dtype) for i in range(1, 5)]
        return self._anchor_cache[key]

    def forward(self, images: torch.Tensor, with_classification: bool = True) -> RawOutputs:
        enhanced = self.enhance(self.pyramid(images))
        cls_logits, box_deltas = self.det_head(enhanced)
        if with_classification:
            image_logits = self.cls_head(enhanced[-1])
        else:
            image_logits = images.new_zeros(images.shape[0], 3)
        size = tuple(images.shape[-2:])
        return RawOutputs(cls_logits, box_deltas, image_logits, self.anchors(size, images.dtype), size)

    def detection_parameters(self):
        """Everything except the classification head."""
        return [p for n, p in self.named_parameters() if not n.startswith("cls_head.")]


def level_shapes(input_size: int):
    return [(input_size // s, input_size // s) for s in STRIDES]


def parameter_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: TBDiagnosisNet, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "meta": meta or {},
    }, path)
    return path


def load_checkpoint(path):
    """Return ``(model, meta)`` with the model in eval mode; raises ``ValueError`` for foreign or newer files."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob.get("version", 0) > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {blob['version']} is newer than supported")
    model = TBDiagnosisNet(ModelConfig(**blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    return model.eval(), blob.get("meta", {})
