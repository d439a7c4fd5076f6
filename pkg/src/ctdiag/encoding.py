"""Positional encodings for feature-pyramid levels.

``sinusoidal_encoding`` builds the 2D absolute encoding (first half of the
channels encodes the row, second half the column). The symmetric variant
keeps one half of that encoding, warps it with a small spatial transformer,
mirrors it onto the other half, and the result is added to the features.
"""
from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

RIGHT_TO_LEFT = "right_to_left"
LEFT_TO_RIGHT = "left_to_right"


def _axis_encoding(n: int, dim: int, dtype, device) -> torch.Tensor:
    # dim channels for positions 0..n-1: even slots sin, odd slots cos
    pos = torch.arange(n, dtype=torch.float64, device=device)[:, None]
    j = torch.arange(dim // 2, dtype=torch.float64, device=device)[None, :]
    angle = pos / torch.pow(10000.0, 2.0 * j / dim)
    enc = torch.empty(n, dim, dtype=torch.float64, device=device)
    enc[:, 0::2] = torch.sin(angle)
    enc[:, 1::2] = torch.cos(angle)
    return enc.T.to(dtype)  # dim x n


def sinusoidal_encoding(height: int, width: int, channels: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """C x H x W encoding; channels [0, C/2) follow the row index, [C/2, C) the column index."""
    if channels % 4:
        raise ValueError(f"channels must be divisible by 4, got {channels}")
    half = channels // 2
    ey = _axis_encoding(height, half, dtype, device)
    ex = _axis_encoding(width, half, dtype, device)
    return torch.cat([
        ey[:, :, None].expand(half, height, width),
        ex[:, None, :].expand(half, height, width),
    ], dim=0).contiguous()


def flip_x(t: torch.Tensor) -> torch.Tensor:
    return torch.flip(t, dims=[-1])


def affine_resample(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Bilinear resample ``x`` (B x C x H x W) under affine ``theta`` (B x 2 x 3).

    Normalized coordinates put -1 and 1 on the outermost pixel centres; samples
    falling outside the map read zeros.
    """
    b, _, h, w = x.shape

    def axis(n):
        # a single pixel sits at the normalized origin
        if n == 1:
            return torch.zeros(1, dtype=x.dtype, device=x.device)
        return torch.linspace(-1.0, 1.0, n, dtype=x.dtype, device=x.device)

    gy, gx = torch.meshgrid(axis(h), axis(w), indexing="ij")
    base = torch.stack([gx, gy, torch.ones_like(gx)], dim=-1).reshape(1, h * w, 3)
    grid = (base @ theta.to(x.dtype).transpose(1, 2)).reshape(theta.shape[0], h, w, 2)
    if grid.shape[0] != b:
        grid = grid.expand(b, h, w, 2)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


class SpatialTransformer(nn.Module):
    """Localization net (pool, conv-relu, pool, conv-relu) -> MLP -> affine, then resample.

    The final MLP layer starts at zero weight with identity bias, so a fresh
    module maps every input to itself.
    """

    def __init__(self, channels: int, pooled: int = 8, hidden: int = 32):
        super().__init__()
        c1, c2 = max(channels // 4, 1), max(channels // 8, 1)
        self.pooled = pooled
        self.conv1 = nn.Conv2d(channels, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.fc1 = nn.Linear(c2 * pooled * pooled, hidden)
        self.fc2 = nn.Linear(hidden, 6)
        nn.init.zeros_(self.fc2.weight)
        with torch.no_grad():
            self.fc2.bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))

    def predict_affine(self, x: torch.Tensor) -> torch.Tensor:
        h = F.max_pool2d(x, 2, 2, ceil_mode=True)
        h = F.relu(self.conv1(h))
        h = F.max_pool2d(h, 2, 2, ceil_mode=True)
        h = F.relu(self.conv2(h))
        h = F.adaptive_avg_pool2d(h, self.pooled).flatten(1)
        return self.fc2(F.relu(self.fc1(h))).view(-1, 2, 3)

    def forward(self, x: torch.Tensor, theta: torch.Tensor | None = None) -> torch.Tensor:
        if theta is None:
            theta = self.predict_affine(x)
        return affine_resample(x, theta)


def symmetric_positional_encoding(P: torch.Tensor, stn: SpatialTransformer | None,
                                  source_side: str = RIGHT_TO_LEFT) -> torch.Tensor:
    """Mirror one half of ``P`` (C x H x W or B x C x H x W) onto the other half.

    With ``right_to_left`` the right half is kept, warped by ``stn`` (skipped
    when ``stn`` is None), flipped, and placed on the left.
    """
    width = P.shape[-1]
    if width % 2:
        raise ValueError(f"symmetric encoding needs an even width, got {width}")
    squeeze = P.dim() == 3
    if squeeze:
        P = P.unsqueeze(0)
    half = width // 2
    left, right = P[..., :half], P[..., half:]
    if source_side == RIGHT_TO_LEFT:
        source = right
    elif source_side == LEFT_TO_RIGHT:
        source = left
    else:
        raise ValueError(f"unknown source side {source_side!r}")
    moved = stn(source) if stn is not None else source
    moved = flip_x(moved)
    out = torch.cat([moved, right], -1) if source_side == RIGHT_TO_LEFT else torch.cat([left, moved], -1)
    return out.squeeze(0) if squeeze else out


def recalibrate(features: torch.Tensor, encoding: torch.Tensor) -> torch.Tensor:
    if features.shape[-encoding.dim():] != encoding.shape:
        raise ValueError(f"encoding shape {tuple(encoding.shape)} does not match features {tuple(features.shape)}")
    return features + encoding


class PositionalEncoding(nn.Module):
    """Encoding added to a feature map before attention.

    ``kind`` is one of ``none``, ``ape`` (plain sinusoidal) or ``spe``
    (symmetric; ``use_stn`` and ``source_side`` select the variant). The
    relative-position option lives in the attention layer, so ``rpe`` adds
    nothing here.
    """

    def __init__(self, channels: int, kind: str = "spe", use_stn: bool = True,
                 source_side: str = RIGHT_TO_LEFT, pooled: int = 8):
        super().__init__()
        if kind not in ("none", "ape", "rpe", "spe"):
            raise ValueError(f"unknown encoding kind {kind!r}")
        self.channels = channels
        self.kind = kind
        self.source_side = source_side
        self.stn = SpatialTransformer(channels, pooled) if kind == "spe" and use_stn else None

    def encoding(self, height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor | None:
        if self.kind in ("none", "rpe"):
            return None
        P = sinusoidal_encoding(height, width, self.channels, dtype, device)
        if self.kind == "ape":
            return P
        return symmetric_positional_encoding(P, self.stn, self.source_side)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        enc = self.encoding(features.shape[-2], features.shape[-1], features.dtype, features.device)
        return features if enc is None else recalibrate(features, enc)


def encoding_asymmetry(P: torch.Tensor) -> float:
    return float((P - flip_x(P)).detach().abs().max())

