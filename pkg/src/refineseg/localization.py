"""Localization augment: encode four quadrant crops next to the full image and
let the global feature attend to pooled local features."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import FeaturePyramid
from .layers import Attention, detokenize, sinusoidal_grid_encoding, tokenize

GRID_POSITIONS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass
class SubImageBatch:
    subs: torch.Tensor  # [4, B, 3, R, R]
    positions: list


def crop_subimages(images: torch.Tensor) -> SubImageBatch:
    """Split into four quadrants (row-major) and bilinearly upsample each back to R x R."""
    if images.ndim != 4:
        raise ValueError(f"expected [B, 3, R, R], got {tuple(images.shape)}")
    r = images.shape[-1]
    if r % 2 or images.shape[-2] % 2:
        raise ValueError(f"image side must be even, got {tuple(images.shape[-2:])}")
    half_h, half_w = images.shape[-2] // 2, r // 2
    tiles = []
    for row, col in GRID_POSITIONS:
        tile = images[..., row * half_h:(row + 1) * half_h, col * half_w:(col + 1) * half_w]
        tiles.append(F.interpolate(tile, size=images.shape[-2:], mode="bilinear", align_corners=False))
    return SubImageBatch(torch.stack(tiles), list(GRID_POSITIONS))


def assemble_local_feature(sub_features: torch.Tensor, positions) -> torch.Tensor:
    """Place four [B, C, h, w] tiles into a [B, C, 2h, 2w] mosaic keyed by (row, col)."""
    if len(sub_features) != 4 or len(positions) != 4:
        raise ValueError("exactly four sub-features are required")
    positions = [tuple(int(v) for v in p) for p in positions]
    if sorted(positions) != sorted(GRID_POSITIONS):
        raise ValueError(f"positions must be a permutation of {GRID_POSITIONS}, got {positions}")
    by_pos = dict(zip(positions, sub_features))
    top = torch.cat([by_pos[(0, 0)], by_pos[(0, 1)]], dim=-1)
    bottom = torch.cat([by_pos[(1, 0)], by_pos[(1, 1)]], dim=-1)
    return torch.cat([top, bottom], dim=-2)


def multi_granularity_pool(local: torch.Tensor, kernels=(2, 4, 8)) -> list:
    """Non-overlapping average pooling of ``local`` with each kernel (stride = kernel)."""
    h, w = local.shape[-2:]
    out = []
    for k in kernels:
        if k <= 0 or h % k or w % k:
            raise ValueError(f"pooling kernel {k} does not divide the feature side {h}x{w}")
        out.append(F.avg_pool2d(local, kernel_size=k, stride=k))
    return out


def local_token_count(resolution: int, kernels=(2, 4, 8)) -> int:
    side = resolution // 8
    return sum((side // k) ** 2 for k in kernels)


class GlobalLocalAttention(nn.Module):
    """Cross-attention from global tokens (queries) to multi-granularity local
    tokens (keys/values) with a residual connection back onto the global tokens."""

    def __init__(self, dim: int, num_heads: int = 4, zero_init: bool = True):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        if zero_init:
            nn.init.zeros_(self.attn.out_proj.weight)
            nn.init.zeros_(self.attn.out_proj.bias)

    def forward(self, g_tokens, l_tokens, g_pe=None, l_pe=None):
        if g_tokens.shape[-1] != l_tokens.shape[-1]:
            raise ValueError(f"token widths differ: {g_tokens.shape[-1]} vs {l_tokens.shape[-1]}")
        q = self.norm_q(g_tokens)
        kv = self.norm_kv(l_tokens)
        k = kv
        if g_pe is not None:
            q = q + g_pe
        if l_pe is not None:
            k = kv + l_pe
        return g_tokens + self.attn(q, k, kv)


class LocalizationAugment(nn.Module):
    def __init__(self, dim: int, num_heads: int = 4, kernels=(2, 4, 8), pos_enc: bool = True):
        super().__init__()
        self.kernels = tuple(kernels)
        self.pos_enc = pos_enc
        self.cross = GlobalLocalAttention(dim, num_heads)

    def local_tokens(self, local: torch.Tensor):
        pooled = multi_granularity_pool(local, self.kernels)
        tokens = torch.cat([tokenize(p) for p in pooled], dim=1)
        pe = None
        if self.pos_enc:
            dim = local.shape[1]
            pe = torch.cat([sinusoidal_grid_encoding(*p.shape[-2:], dim, dtype=local.dtype) for p in pooled])
            pe = pe.to(local.device)
        return pooled, tokens, pe

    def refine(self, global_feature: torch.Tensor, sub_features: torch.Tensor, positions=GRID_POSITIONS):
        """G [B, C, h, w] and sub-image features [4, B, C, h, w] -> G_re [B, C, h, w]."""
        h, w = global_feature.shape[-2:]
        local = assemble_local_feature(sub_features, positions)
        _, l_tokens, l_pe = self.local_tokens(local)
        g_tokens = tokenize(global_feature)
        g_pe = None
        if self.pos_enc:
            g_pe = sinusoidal_grid_encoding(h, w, global_feature.shape[1], dtype=global_feature.dtype)
            g_pe = g_pe.to(global_feature.device)
        out = self.cross(g_tokens, l_tokens, g_pe, l_pe)
        return detokenize(out, h, w)

    def forward(self, images: torch.Tensor, encoder) -> torch.Tensor:
        """Crop, encode the full image and its crops as one 5B batch, then refine G."""
        b = images.shape[0]
        crops = crop_subimages(images)
        batch = torch.cat([images, crops.subs.flatten(0, 1)], dim=0)
        f16 = encoder(batch).f16
        g = f16[:b]
        subs = f16[b:].view(4, b, *f16.shape[1:])
        return self.refine(g, subs, crops.positions)


def encode_with_crops(images: torch.Tensor, encoder):
    """Run the encoder on the full image and its four crops in one batch.

    Returns the full-image pyramid and the crops' stride-16 features [4, B, C, h, w].
    """
    b = images.shape[0]
    crops = crop_subimages(images)
    pyr = encoder(torch.cat([images, crops.subs.flatten(0, 1)], dim=0))
    full = FeaturePyramid(pyr.f4[:b], pyr.f8[:b], pyr.f16[:b])
    subs = pyr.f16[b:].view(4, b, *pyr.f16.shape[1:])
    return full, subs
