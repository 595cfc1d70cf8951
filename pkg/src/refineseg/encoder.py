"""Hierarchical convolutional image encoder producing the stride 4/8/16 pyramid,
plus the full-resolution low-level stem used by mask refinement."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import LayerNorm2d


@dataclass
class FeaturePyramid:
    f4: torch.Tensor
    f8: torch.Tensor
    f16: torch.Tensor
    low: torch.Tensor | None = None

    def select(self, idx) -> "FeaturePyramid":
        return FeaturePyramid(self.f4[idx], self.f8[idx], self.f16[idx],
                              None if self.low is None else self.low[idx])


def check_images(images: torch.Tensor, multiple: int = 16) -> torch.Tensor:
    if not isinstance(images, torch.Tensor):
        raise TypeError("images must be a torch.Tensor")
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"images must have shape [B, 3, R, R], got {tuple(images.shape)}")
    b, _, h, w = images.shape
    if b < 1 or h != w:
        raise ValueError(f"images must be square with B >= 1, got {tuple(images.shape)}")
    if h % multiple:
        raise ValueError(f"image side {h} is not divisible by {multiple}")
    if not torch.isfinite(images).all():
        raise ValueError("images contain non-finite values")
    return images


class ConvBlock(nn.Module):
    """Residual 3x3 conv -> LN -> GELU."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = LayerNorm2d(channels)

    def forward(self, x):
        return x + F.gelu(self.norm(self.conv(x)))


class Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, stride, stride=stride)
        self.norm = LayerNorm2d(out_ch)
        self.block = ConvBlock(out_ch)

    def forward(self, x):
        return self.block(F.gelu(self.norm(self.down(x))))


class ImageEncoder(nn.Module):
    """Patch embedding at stride 4 followed by two x2 downsampling stages."""

    def __init__(self, c4: int = 32, c8: int = 64, c16: int = 128):
        super().__init__()
        self.stage4 = Stage(3, c4, 4)
        self.stage8 = Stage(c4, c8, 2)
        self.stage16 = Stage(c8, c16, 2)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        check_images(images)
        f4 = self.stage4(images)
        f8 = self.stage8(f4)
        f16 = self.stage16(f8)
        return FeaturePyramid(f4, f8, f16)


class LowLevelStem(nn.Module):
    """Two full-resolution 3x3 convolutions over the raw image."""

    def __init__(self, c_low: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, c_low, 3, padding=1)
        self.norm = LayerNorm2d(c_low)
        self.conv2 = nn.Conv2d(c_low, c_low, 3, padding=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        check_images(images, multiple=1)
        return self.conv2(F.gelu(self.norm(self.conv1(images))))
