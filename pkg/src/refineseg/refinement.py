"""UNet-like mask refinement from the object embedding and the encoder pyramid
up to full-resolution logits."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import FeaturePyramid
from .layers import LayerNorm2d


@dataclass
class RefinementOutputs:
    final_logits: torch.Tensor  # [B, 1, R, R]
    intermediates: list  # three logit maps at R/8, R/4, R/4


class DecoderBlock(nn.Module):
    """concat(current, skip) -> 3x3 conv -> GELU -> LN -> optional x2 bilinear upsampling."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, upsample: bool):
        super().__init__()
        self.conv = nn.Conv2d(in_channels + skip_channels, out_channels, 3, padding=1)
        self.norm = LayerNorm2d(out_channels)
        self.upsample = upsample

    def forward(self, current, skip):
        if current.shape[-2:] != skip.shape[-2:]:
            raise ValueError(f"spatial mismatch {tuple(current.shape[-2:])} vs {tuple(skip.shape[-2:])}")
        x = self.norm(F.gelu(self.conv(torch.cat([current, skip], dim=1))))
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return x


class MaskRefinement(nn.Module):
    def __init__(self, embed_dim: int, c4: int, c8: int, c16: int, c_low: int,
                 widths=(64, 32, 32)):
        super().__init__()
        w1, w2, w3 = widths
        self.block1 = DecoderBlock(embed_dim, c16, w1, upsample=True)
        self.block2 = DecoderBlock(w1, c8, w2, upsample=True)
        self.block3 = DecoderBlock(w2, c4, w3, upsample=False)
        self.heads = nn.ModuleList(nn.Conv2d(w, 1, 1) for w in widths)
        self.lift1 = nn.ConvTranspose2d(w3, c_low, 2, stride=2)
        self.lift2 = nn.ConvTranspose2d(c_low, c_low, 2, stride=2)
        self.low_proj = nn.Conv2d(c_low, c_low, 1)
        self.out = nn.Conv2d(c_low, 1, 3, padding=1)

    def forward(self, embedding: torch.Tensor, pyramid: FeaturePyramid) -> RefinementOutputs:
        if pyramid.low is None:
            raise ValueError("mask refinement needs the low-level stem feature")
        x1 = self.block1(embedding, pyramid.f16)
        x2 = self.block2(x1, pyramid.f8)
        x3 = self.block3(x2, pyramid.f4)
        intermediates = [head(x) for head, x in zip(self.heads, (x1, x2, x3))]
        y = self.lift2(F.gelu(self.lift1(x3)))
        if y.shape[-2:] != pyramid.low.shape[-2:]:
            raise ValueError(f"lifted feature {tuple(y.shape[-2:])} does not match low-level feature "
                             f"{tuple(pyramid.low.shape[-2:])}")
        y = F.gelu(y + self.low_proj(pyramid.low))
        return RefinementOutputs(self.out(y), intermediates)
