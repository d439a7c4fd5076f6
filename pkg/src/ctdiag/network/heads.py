from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F


def prior_bias(prior: float) -> float:
    """Logit bias that makes the initial sigmoid score equal ``prior``."""
    return -math.log((1 - prior) / prior)


class DetectionHead(nn.Module):
    """RetinaNet-style head: classification and box towers shared across levels."""

    def __init__(self, channels=256, num_anchors=9, num_classes=2, tower_convs=4, prior=0.01):
        super().__init__()
        self.num_anchors, self.num_classes = num_anchors, num_classes

        def tower():
            layers = []
            for _ in range(tower_convs):
                layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True)]
            return nn.Sequential(*layers)

        self.cls_tower = tower()
        self.box_tower = tower()
        self.cls_pred = nn.Conv2d(channels, num_anchors * num_classes, 3, padding=1)
        self.box_pred = nn.Conv2d(channels, num_anchors * 4, 3, padding=1)
        # He init for the towers: without pretrained features or group norm,
        # std=0.01 towers shrink the signal until the heads barely train.
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        for m in (self.cls_pred, self.box_pred):
            nn.init.normal_(m.weight, std=0.01)
        nn.init.constant_(self.cls_pred.bias, prior_bias(prior))

    def forward_level(self, f):
        b, _, h, w = f.shape
        cls = self.cls_pred(self.cls_tower(f))
        box = self.box_pred(self.box_tower(f))
        # B x (A*k) x H x W -> B x (H*W*A) x k, matching anchor order (y, x, a)
        cls = cls.view(b, self.num_anchors, self.num_classes, h, w).permute(0, 3, 4, 1, 2)
        box = box.view(b, self.num_anchors, 4, h, w).permute(0, 3, 4, 1, 2)
        return cls.reshape(b, -1, self.num_classes), box.reshape(b, -1, 4)

    def forward(self, levels):
        outs = [self.forward_level(f) for f in levels]
        return [o[0] for o in outs], [o[1] for o in outs]


class ClassificationHead(nn.Module):
    """Five 3x3 conv+ReLU layers (max-pooling after the first ``pools``), GAP, linear."""

    def __init__(self, in_channels=256, width=512, num_convs=5, pools=3, num_classes=3):
        super().__init__()
        self.pools = pools
        self.convs = nn.ModuleList(
            nn.Conv2d(in_channels if i == 0 else width, width, 3, padding=1) for i in range(num_convs)
        )
        self.fc = nn.Linear(width, num_classes)
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        h, w = x.shape[-2:]
        need = 2 ** self.pools
        if h < need or w < need:
            raise ValueError(f"classification head needs at least {need}x{need} input for "
                             f"{self.pools} poolings, got {h}x{w}")
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            if i < self.pools:
                x = F.max_pool2d(x, 2)
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))
