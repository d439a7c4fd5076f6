"""Symmetric search attention and the SAS block built around it.

Every reference location (y, x) of a C x H x W map gathers K sampled values
per head around its mirror location (y, W - 1 - x). Offsets are predicted by
1x1 convolutions in grid units and added to the reference point *before*
mirroring. With ``symmetric=False`` the same layer is plain deformable
attention around the reference point itself.
"""
from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .encoding import RIGHT_TO_LEFT, PositionalEncoding


def mirror_coordinate(x, width: int):
    """Reflect a (possibly fractional) column coordinate about the centre line."""
    return (width - 1) - x


def sample_bilinear(value: torch.Tensor, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Gather ``value`` (N x C x H x W) at points ``y``, ``x`` (N x P) -> N x C x P.

    Each of the four neighbouring grid points contributes its bilinear weight
    when it lies on the grid and nothing otherwise.
    """
    n, c, h, w = value.shape
    flat = value.reshape(n, c, h * w)
    y0 = torch.floor(y)
    x0 = torch.floor(x)
    wy1 = y - y0
    wx1 = x - x0
    wy0 = 1 - wy1
    wx0 = 1 - wx1
    out = value.new_zeros(n, c, y.shape[1])
    for yy, wy in ((y0, wy0), (y0 + 1, wy1)):
        for xx, wx in ((x0, wx0), (x0 + 1, wx1)):
            valid = (yy >= 0) & (yy <= h - 1) & (xx >= 0) & (xx <= w - 1)
            idx = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1)).long()
            gathered = torch.gather(flat, 2, idx[:, None, :].expand(n, c, idx.shape[1]))
            out = out + gathered * (wy * wx * valid.to(value.dtype))[:, None, :]
    return out


def bilinear_sample(value_map: torch.Tensor, y: float, x: float) -> torch.Tensor:
    """Single-point convenience wrapper: C x H x W map -> length-C vector."""
    yy = torch.tensor([[float(y)]], dtype=value_map.dtype)
    xx = torch.tensor([[float(x)]], dtype=value_map.dtype)
    return sample_bilinear(value_map[None], yy, xx)[0, :, 0]


class SymmetricSearchAttention(nn.Module):
    """Offsets, attention and value projections plus the output projection.

    ``forward`` takes the recalibrated map (sampling source and predictor
    input) and the original map used for the residual.
    """

    def __init__(self, channels: int = 256, heads: int = 8, points: int = 4,
                 symmetric: bool = True, relative_bias: bool = False, rpe_radius: int = 4):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels ({channels}) must be divisible by heads ({heads})")
        self.channels, self.heads, self.points = channels, heads, points
        self.symmetric = symmetric
        mk = heads * points
        self.offset_x = nn.Conv2d(channels, mk, 1)
        self.offset_y = nn.Conv2d(channels, mk, 1)
        self.attn = nn.Conv2d(channels, mk, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.rpe_radius = rpe_radius
        self.rpe_table = nn.Parameter(torch.zeros(heads, 2 * rpe_radius + 1, 2 * rpe_radius + 1)) if relative_bias else None
        self.reset_parameters()

    def reset_parameters(self):
        for m in (self.offset_x, self.offset_y, self.proj):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)
        for m in (self.attn, self.value):
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, _, h, w = t.shape
        return t.view(b, self.heads, self.points, h, w)

    def predict_offsets(self, recalib: torch.Tensor):
        """(dx, dy), each B x M x K x H x W in grid units."""
        return self._split(self.offset_x(recalib)), self._split(self.offset_y(recalib))

    def attention_logits(self, recalib, dx=None, dy=None):
        logits = self._split(self.attn(recalib))
        if self.rpe_table is not None:
            r = self.rpe_radius
            iy = (torch.round(dy).clamp(-r, r) + r).long()
            ix = (torch.round(dx).clamp(-r, r) + r).long()
            heads = torch.arange(self.heads, device=logits.device).view(1, -1, 1, 1, 1).expand_as(iy)
            logits = logits + self.rpe_table[heads, iy, ix]
        return logits

    def predict_attention(self, recalib, dx=None, dy=None) -> torch.Tensor:
        """B x M x K x H x W weights, normalized over the K samples."""
        return F.softmax(self.attention_logits(recalib, dx, dy), dim=2)

    def sample_locations(self, dx: torch.Tensor, dy: torch.Tensor):
        _, _, _, h, w = dx.shape
        ref_y = torch.arange(h, dtype=dx.dtype, device=dx.device).view(1, 1, 1, h, 1)
        ref_x = torch.arange(w, dtype=dx.dtype, device=dx.device).view(1, 1, 1, 1, w)
        sy = ref_y + dy
        sx = ref_x + dx
        if self.symmetric:
            sx = mirror_coordinate(sx, w)
        return sy, sx

    def aggregate(self, recalib: torch.Tensor):
        """Concatenated per-head attention output, before the output projection."""
        b, c, h, w = recalib.shape
        m, k = self.heads, self.points
        dx, dy = self.predict_offsets(recalib)
        weights = self.predict_attention(recalib, dx, dy)
        value = self.value(recalib).view(b * m, c // m, h, w)
        sy, sx = self.sample_locations(dx, dy)
        sampled = sample_bilinear(value, sy.reshape(b * m, k * h * w), sx.reshape(b * m, k * h * w))
        sampled = sampled.view(b, m, c // m, k, h, w)
        return (sampled * weights[:, :, None]).sum(dim=3).reshape(b, c, h, w)

    def forward(self, recalib: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
        return self.proj(self.aggregate(recalib)) + residual


class SASBlock(nn.Module):
    """Encoding -> (symmetric) deformable attention -> feed-forward, each with a residual.

    Shared by every pyramid level. A fresh block is the identity map because
    the output projection and the last feed-forward layer start at zero.
    """

    def __init__(self, channels: int = 256, heads: int = 8, points: int = 4,
                 attention: str = "symmetric", encoding: str = "spe", use_stn: bool = True,
                 source_side: str = RIGHT_TO_LEFT, mlp_ratio: int = 4, stn_pool: int = 8):
        super().__init__()
        if attention not in ("symmetric", "vanilla"):
            raise ValueError(f"unknown attention kind {attention!r}")
        self.channels = channels
        self.encoding = PositionalEncoding(channels, encoding, use_stn, source_side, stn_pool)
        self.attention = SymmetricSearchAttention(channels, heads, points, symmetric=attention == "symmetric",
                                                  relative_bias=encoding == "rpe")
        self.mlp1 = nn.Conv2d(channels, mlp_ratio * channels, 1)
        self.mlp2 = nn.Conv2d(mlp_ratio * channels, channels, 1)
        nn.init.zeros_(self.mlp2.weight)
        nn.init.zeros_(self.mlp2.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {features.shape[1]}")
        recalib = self.encoding(features)
        out = self.attention(recalib, features)
        return self.mlp2(F.relu(self.mlp1(out))) + out

    def forward_pyramid(self, levels):
        channels = {f.shape[1] for f in levels}
        if len(channels) != 1:
            raise ValueError(f"pyramid levels disagree on channel count: {sorted(channels)}")
        return [self(f) for f in levels]
