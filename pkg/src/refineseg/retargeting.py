"""Prompt retargeting: multi-branch augmentation of the object embedding, a
rasterised click/mask prompt map, and token/embedding attention that re-aligns
the embedding with the prompts."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import MLP, Attention, LayerNorm2d


class RFBBranch(nn.Module):
    def __init__(self, channels: int, hidden: int, n: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.row = nn.Conv2d(hidden, hidden, (1, n), padding=(0, n // 2))
        self.col = nn.Conv2d(hidden, hidden, (n, 1), padding=(n // 2, 0))

    def forward(self, x):
        return F.gelu(self.col(self.row(F.gelu(self.reduce(x)))))


class RFBBlock(nn.Module):
    """Bottleneck branches with 1xn + nx1 kernels, fused and added to a 1x1 shortcut.

    The shortcut starts as the identity and the fusion conv at zero, so a freshly
    built block passes the embedding through unchanged.
    """

    def __init__(self, channels: int, kernel_sizes=(3, 5, 7), reduction: int = 4, identity_init: bool = True):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.branches = nn.ModuleList(RFBBranch(channels, hidden, n) for n in kernel_sizes)
        self.fuse = nn.Conv2d(hidden * len(kernel_sizes), channels, 1)
        self.shortcut = nn.Conv2d(channels, channels, 1)
        if identity_init:
            nn.init.zeros_(self.fuse.weight)
            nn.init.zeros_(self.fuse.bias)
            with torch.no_grad():
                self.shortcut.weight.copy_(torch.eye(channels).view(channels, channels, 1, 1))
                self.shortcut.bias.zero_()

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected [B, {self.channels}, h, w], got {tuple(x.shape)}")
        y = torch.cat([branch(x) for branch in self.branches], dim=1)
        return self.fuse(y) + self.shortcut(x)


def default_click_radius(side: int) -> int:
    return max(1, round(side / 50))


def rasterize_dense_prompt(points, labels, selected_mask_logits, side: int, resolution: int,
                           radius: int | None = None) -> torch.Tensor:
    """Three-channel prompt map [B, 3, D, D].

    Channel 0/1 hold positive/negative click disks of ``radius`` map pixels around
    ``floor(p * D / R)``; channel 2 holds the sigmoid of the selected mask logits.
    ``points`` is [B, N, 2] (x, y) and ``labels`` [B, N] with -1 for padding.
    """
    if radius is None:
        radius = default_click_radius(side)
    points = torch.as_tensor(points)
    labels = torch.as_tensor(labels)
    b = points.shape[0]
    dtype = selected_mask_logits.dtype if selected_mask_logits is not None else torch.float32
    clicks = torch.zeros(b, 2, side, side, dtype=dtype)
    if points.numel():
        centers = torch.floor(points.double() * side / resolution).long()
        ys = torch.arange(side).view(1, 1, side, 1)
        xs = torch.arange(side).view(1, 1, 1, side)
        cx = centers[..., 0].view(b, -1, 1, 1)
        cy = centers[..., 1].view(b, -1, 1, 1)
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius  # [B, N, D, D]
        for channel, label in ((0, 1), (1, 0)):
            sel = (labels == label).view(b, -1, 1, 1)
            clicks[:, channel] = (inside & sel).any(dim=1).to(dtype)
    if selected_mask_logits is None:
        prob = torch.zeros(b, 1, side, side, dtype=dtype)
    else:
        if selected_mask_logits.shape[-2:] != (side, side):
            raise ValueError(f"selected mask must be {side}x{side}")
        prob = torch.sigmoid(selected_mask_logits.reshape(b, 1, side, side))
    return torch.cat([clicks.to(prob.device), prob], dim=1)


class DensePromptEncoder(nn.Module):
    """Two stride-2 2x2 convs (each followed by GELU and layer norm) and a 1x1 projection."""

    def __init__(self, out_channels: int, hidden=(16, 32), zero_init: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(3, hidden[0], 2, stride=2)
        self.norm1 = LayerNorm2d(hidden[0])
        self.conv2 = nn.Conv2d(hidden[0], hidden[1], 2, stride=2)
        self.norm2 = LayerNorm2d(hidden[1])
        self.proj = nn.Conv2d(hidden[1], out_channels, 1)
        if zero_init:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, prompt_map: torch.Tensor, target_side: int | None = None) -> torch.Tensor:
        if prompt_map.shape[1] != 3:
            raise ValueError("prompt map must have 3 channels")
        if target_side is not None and prompt_map.shape[-1] != 4 * target_side:
            raise ValueError(f"prompt map side {prompt_map.shape[-1]} must be 4 x {target_side}")
        x = self.norm1(F.gelu(self.conv1(prompt_map)))
        x = self.norm2(F.gelu(self.conv2(x)))
        return self.proj(x)


class RetargetingAttention(nn.Module):
    """Token self-attention, token->embedding cross-attention, token MLP,
    embedding->token cross-attention.

    Tokens use post-norm residuals. The embedding stream is pre-normed so that a
    zero update leaves the embedding exactly as it came in.
    """

    def __init__(self, dim: int, num_heads: int = 4, mlp_dim: int | None = None, zero_init: bool = True):
        super().__init__()
        mlp_dim = mlp_dim or 2 * dim
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.token_to_image = Attention(dim // 2, num_heads, q_dim=dim, kv_dim=dim, out_dim=dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, dim)
        self.norm3 = nn.LayerNorm(dim)
        self.norm_image = nn.LayerNorm(dim)
        self.norm_tokens = nn.LayerNorm(dim)
        self.image_to_token = Attention(dim // 2, num_heads, q_dim=dim, kv_dim=dim, out_dim=dim)
        if zero_init:
            nn.init.zeros_(self.image_to_token.out_proj.weight)
            nn.init.zeros_(self.image_to_token.out_proj.bias)

    def attentions(self):
        return [self.self_attn, self.token_to_image, self.image_to_token]

    def forward(self, embedding, sparse_tokens, output_token, image_pe=None):
        b, c, h, w = embedding.shape
        if sparse_tokens.shape[-1] != c or output_token.shape[-1] != c:
            raise ValueError(f"token width must equal embedding channels {c}")
        tokens = torch.cat([output_token, sparse_tokens], dim=1)
        pe_tokens = tokens
        image = embedding.flatten(2).transpose(1, 2)
        key_pe = 0 if image_pe is None else image_pe.flatten(2).transpose(1, 2)
        # (1) self-attention over output + sparse prompt tokens
        q = tokens + pe_tokens
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens))
        # (2) tokens attend to the embedding
        tokens = self.norm2(tokens + self.token_to_image(tokens + pe_tokens, image + key_pe, image))
        # (3) token MLP
        tokens = self.norm3(tokens + self.mlp(tokens))
        # (4) embedding attends to the tokens
        q = self.norm_image(image) + key_pe
        kv = self.norm_tokens(tokens)
        image = image + self.image_to_token(q, kv + pe_tokens, kv)
        return image.transpose(1, 2).reshape(b, c, h, w)


class PromptRetargeting(nn.Module):
    def __init__(self, dim: int, resolution: int, num_heads: int = 4, radius: int | None = None):
        super().__init__()
        self.resolution = resolution
        self.side = resolution // 4
        self.radius = default_click_radius(self.side) if radius is None else radius
        self.rfb = RFBBlock(dim)
        self.dense_encoder = DensePromptEncoder(dim)
        self.retarget = RetargetingAttention(dim, num_heads)

    def augment(self, embedding, points, labels, selected_mask):
        """Return (E_a, E_p, E_ap)."""
        e_a = self.rfb(embedding)
        prompt_map = rasterize_dense_prompt(points, labels, selected_mask, self.side, self.resolution,
                                            self.radius).to(embedding.device, embedding.dtype)
        e_p = self.dense_encoder(prompt_map, embedding.shape[-1])
        return e_a, e_p, e_a + e_p

    def forward(self, embedding, points, labels, selected_mask, sparse_tokens, output_token, image_pe=None):
        _, _, e_ap = self.augment(embedding, points, labels, selected_mask)
        return self.retarget(e_ap, sparse_tokens, output_token, image_pe)
