"""Promptable baseline: prompt encoder and a two-way transformer mask decoder.

The decoder emits three candidate masks at R/4, a quality score per candidate,
a presence logit and the post-attention object embedding at R/16.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import MLP, Attention, LayerNorm2d, RandomFourierEncoding

NUM_MASKS = 3


@dataclass
class PromptSet:
    """Prompts for one target object. Coordinates are pixels in [0, R)."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.int64))
    box: tuple | None = None
    coarse_mask: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")
        if self.box is not None:
            self.box = tuple(float(v) for v in self.box)
        if self.coarse_mask is not None:
            self.coarse_mask = np.asarray(self.coarse_mask, dtype=np.float32)
            if self.coarse_mask.ndim == 3:
                self.coarse_mask = self.coarse_mask[0]

    @property
    def num_points(self) -> int:
        return len(self.points)

    def validate(self, resolution: int) -> "PromptSet":
        if self.num_points == 0 and self.box is None and self.coarse_mask is None:
            raise ValueError("at least one prompt is required")
        if self.num_points:
            if np.any(self.points < 0) or np.any(self.points >= resolution):
                raise ValueError(f"point coordinates must lie in [0, {resolution})")
            if not np.all(np.isin(self.labels, (0, 1))):
                raise ValueError("point labels must be 0 (negative) or 1 (positive)")
        if self.box is not None:
            x0, y0, x1, y1 = self.box
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"degenerate box {self.box}")
            if min(x0, y0) < 0 or max(x1, y1) > resolution:
                raise ValueError(f"box {self.box} outside [0, {resolution}]")
        if self.coarse_mask is not None:
            side = resolution // 4
            if self.coarse_mask.shape != (side, side):
                raise ValueError(f"coarse mask must be {side}x{side}, got {self.coarse_mask.shape}")
            if self.coarse_mask.min() < 0 or self.coarse_mask.max() > 1:
                raise ValueError("coarse mask values must lie in [0, 1]")
        return self

    def to_json(self) -> dict:
        out = {"points": self.points.tolist(), "labels": self.labels.tolist()}
        if self.box is not None:
            out["box"] = list(self.box)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "PromptSet":
        return cls(points=data.get("points", []), labels=data.get("labels", []), box=data.get("box"))


@dataclass
class PromptBatch:
    points: torch.Tensor  # [B, N, 2]
    labels: torch.Tensor  # [B, N], -1 marks padding
    boxes: torch.Tensor | None  # [B, 4]
    box_valid: torch.Tensor | None  # [B]
    masks: torch.Tensor | None  # [B, 1, R/4, R/4]
    mask_valid: torch.Tensor | None  # [B]

    def __len__(self):
        return self.points.shape[0]


def collate_prompts(prompts, resolution: int, dtype=torch.float32) -> PromptBatch:
    """Stack per-sample prompt sets, padding points with label -1."""
    prompts = [p.validate(resolution) for p in prompts]
    b = len(prompts)
    n = max(p.num_points for p in prompts)
    points = torch.zeros(b, n, 2, dtype=dtype)
    labels = torch.full((b, n), -1, dtype=torch.long)
    for i, p in enumerate(prompts):
        points[i, :p.num_points] = torch.as_tensor(p.points, dtype=dtype)
        labels[i, :p.num_points] = torch.as_tensor(p.labels)
    boxes = box_valid = masks = mask_valid = None
    if any(p.box is not None for p in prompts):
        boxes = torch.zeros(b, 4, dtype=dtype)
        box_valid = torch.zeros(b, dtype=torch.bool)
        for i, p in enumerate(prompts):
            if p.box is not None:
                boxes[i] = torch.as_tensor(p.box, dtype=dtype)
                box_valid[i] = True
    if any(p.coarse_mask is not None for p in prompts):
        side = resolution // 4
        masks = torch.zeros(b, 1, side, side, dtype=dtype)
        mask_valid = torch.zeros(b, dtype=torch.bool)
        for i, p in enumerate(prompts):
            if p.coarse_mask is not None:
                masks[i, 0] = torch.as_tensor(p.coarse_mask, dtype=dtype)
                mask_valid[i] = True
    return PromptBatch(points, labels, boxes, box_valid, masks, mask_valid)


class PromptEncoder(nn.Module):
    def __init__(self, embed_dim: int, resolution: int, mask_channels: int = 16):
        super().__init__()
        self.embed_dim = embed_dim
        self.resolution = resolution
        self.pe_layer = RandomFourierEncoding(embed_dim // 2)
        # negative, positive, box top-left, box bottom-right
        self.point_embeddings = nn.Parameter(torch.randn(4, embed_dim) * 0.02)
        self.not_a_point = nn.Parameter(torch.randn(embed_dim) * 0.02)
        self.no_mask = nn.Parameter(torch.randn(embed_dim) * 0.02)
        self.mask_downscaling = nn.Sequential(
            nn.Conv2d(1, mask_channels // 4, 2, stride=2),
            LayerNorm2d(mask_channels // 4),
            nn.GELU(),
            nn.Conv2d(mask_channels // 4, mask_channels, 2, stride=2),
            LayerNorm2d(mask_channels),
            nn.GELU(),
            nn.Conv2d(mask_channels, embed_dim, 1),
        )

    @property
    def grid_side(self) -> int:
        return self.resolution // 16

    def dense_pe(self) -> torch.Tensor:
        return self.pe_layer.grid(self.grid_side, self.grid_side).unsqueeze(0)

    def _embed_points(self, points, labels):
        pe = self.pe_layer.points(points, self.resolution)
        pad = (labels == -1).unsqueeze(-1)
        label_emb = torch.where(labels.unsqueeze(-1) == 1, self.point_embeddings[1], self.point_embeddings[0])
        tokens = pe + label_emb
        return torch.where(pad, self.not_a_point.expand_as(tokens), tokens)

    def _embed_boxes(self, boxes, valid):
        corners = boxes.view(-1, 2, 2)
        tokens = self.pe_layer.points(corners, self.resolution) + self.point_embeddings[2:4]
        return torch.where(valid.view(-1, 1, 1), tokens, self.not_a_point.expand_as(tokens))

    def forward(self, prompts: PromptBatch):
        """Return sparse tokens [B, N_s, C] and the dense embedding [B, C, R/16, R/16]."""
        b = len(prompts)
        dtype = self.point_embeddings.dtype
        parts = []
        if prompts.points.shape[1]:
            parts.append(self._embed_points(prompts.points.to(dtype), prompts.labels))
        if prompts.boxes is not None:
            parts.append(self._embed_boxes(prompts.boxes.to(dtype), prompts.box_valid))
        if parts:
            sparse = torch.cat(parts, dim=1)
        else:
            sparse = torch.zeros(b, 0, self.embed_dim, dtype=dtype)
        side = self.grid_side
        no_mask = self.no_mask.view(1, -1, 1, 1).expand(b, -1, side, side)
        if prompts.masks is None:
            dense = no_mask
        else:
            dense = self.mask_downscaling(prompts.masks.to(dtype))
            dense = torch.where(prompts.mask_valid.view(-1, 1, 1, 1), dense, no_mask)
        return sparse, dense


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_dim: int, skip_first_pe: bool = False):
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = Attention(dim // 2, num_heads, q_dim=dim, kv_dim=dim, out_dim=dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, dim)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = Attention(dim // 2, num_heads, q_dim=dim, kv_dim=dim, out_dim=dim)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)
        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_image_to_token(k, q, queries))
        return queries, keys

    def attentions(self):
        return [self.self_attn, self.cross_token_to_image, self.cross_image_to_token]


class TwoWayTransformer(nn.Module):
    def __init__(self, dim: int, num_heads: int, depth: int = 2, mlp_dim: int | None = None):
        super().__init__()
        mlp_dim = mlp_dim or 2 * dim
        self.layers = nn.ModuleList(
            TwoWayBlock(dim, num_heads, mlp_dim, skip_first_pe=(i == 0)) for i in range(depth))
        self.final_attn = Attention(dim // 2, num_heads, q_dim=dim, kv_dim=dim, out_dim=dim)
        self.norm_final = nn.LayerNorm(dim)

    def forward(self, image, image_pe, tokens):
        b, c, h, w = image.shape
        keys = image.flatten(2).transpose(1, 2)
        key_pe = image_pe.flatten(2).transpose(1, 2)
        queries = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        q = queries + tokens
        k = keys + key_pe
        queries = self.norm_final(queries + self.final_attn(q, k, keys))
        return queries, keys

    def attentions(self):
        return [a for layer in self.layers for a in layer.attentions()] + [self.final_attn]


@dataclass
class DecoderOutputs:
    masks: torch.Tensor  # M: [B, 3, R/4, R/4] logits
    scores: torch.Tensor  # [B, 3]
    presence: torch.Tensor  # [B, 1]
    embedding: torch.Tensor  # E: [B, C_e, R/16, R/16]
    output_token: torch.Tensor  # [B, 1, C_e] token of the selected candidate
    sparse_tokens: torch.Tensor  # [B, N_s, C_e]
    hyper_weights: torch.Tensor  # [B, 3, C_e/8]
    index: torch.Tensor  # [B] selected candidate


def select_mask(outputs: DecoderOutputs):
    """Pick the best-scoring candidate per sample; ties go to the lowest index."""
    index = select_index(outputs.scores)
    chosen = outputs.masks.gather(1, index.view(-1, 1, 1, 1).expand(-1, 1, *outputs.masks.shape[-2:]))
    return chosen, index


def select_index(scores: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index
    return torch.argmax(scores, dim=1)


class MaskDecoder(nn.Module):
    def __init__(self, dim: int, num_heads: int = 4, depth: int = 2):
        super().__init__()
        self.dim = dim
        self.transformer = TwoWayTransformer(dim, num_heads, depth)
        self.score_token = nn.Parameter(torch.randn(1, dim) * 0.02)
        self.presence_token = nn.Parameter(torch.randn(1, dim) * 0.02)
        self.mask_tokens = nn.Parameter(torch.randn(NUM_MASKS, dim) * 0.02)
        self.output_upscaling = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 4, 2, stride=2),
            LayerNorm2d(dim // 4),
            nn.GELU(),
            nn.ConvTranspose2d(dim // 4, dim // 8, 2, stride=2),
            nn.GELU(),
        )
        self.hypernets = nn.ModuleList(MLP(dim, dim, dim // 8, 3) for _ in range(NUM_MASKS))
        self.score_head = MLP(dim, dim, NUM_MASKS, 3)
        self.presence_head = MLP(dim, dim, 1, 2)

    def masks_from_embedding(self, embedding: torch.Tensor, hyper_weights: torch.Tensor) -> torch.Tensor:
        """Dot the x4-upscaled embedding with per-candidate hypernetwork weights."""
        up = self.output_upscaling(embedding)
        b, c, h, w = up.shape
        return (hyper_weights @ up.view(b, c, h * w)).view(b, -1, h, w)

    def forward(self, image_feature, image_pe, sparse_tokens, dense_embedding) -> DecoderOutputs:
        if image_feature.shape[1] != self.dim:
            raise ValueError(f"image feature has {image_feature.shape[1]} channels, decoder expects {self.dim}")
        if sparse_tokens.shape[-1] != self.dim or dense_embedding.shape[1] != self.dim:
            raise ValueError("prompt embeddings do not match the decoder width")
        if dense_embedding.shape[-2:] != image_feature.shape[-2:]:
            raise ValueError("dense embedding and image feature differ in spatial size")
        b, c, h, w = image_feature.shape
        out_tokens = torch.cat([self.score_token, self.presence_token, self.mask_tokens], dim=0)
        tokens = torch.cat([out_tokens.unsqueeze(0).expand(b, -1, -1), sparse_tokens], dim=1)
        src = image_feature + dense_embedding
        pos = image_pe.expand(b, -1, -1, -1)
        hs, src = self.transformer(src, pos, tokens)
        score_out = hs[:, 0]
        presence_out = hs[:, 1]
        mask_out = hs[:, 2:2 + NUM_MASKS]
        embedding = src.transpose(1, 2).reshape(b, c, h, w)
        hyper = torch.stack([net(mask_out[:, i]) for i, net in enumerate(self.hypernets)], dim=1)
        masks = self.masks_from_embedding(embedding, hyper)
        scores = self.score_head(score_out)
        index = select_index(scores)
        output_token = mask_out.gather(1, index.view(-1, 1, 1).expand(-1, 1, c))
        return DecoderOutputs(
            masks=masks, scores=scores, presence=self.presence_head(presence_out),
            embedding=embedding, output_token=output_token, sparse_tokens=sparse_tokens,
            hyper_weights=hyper, index=index)


class BaseModel(nn.Module):
    """Prompt encoder + mask decoder."""

    def __init__(self, dim: int, resolution: int, num_heads: int = 4):
        super().__init__()
        self.prompt_encoder = PromptEncoder(dim, resolution)
        self.decoder = MaskDecoder(dim, num_heads)

    def encode_prompts(self, prompts):
        if not isinstance(prompts, PromptBatch):
            prompts = collate_prompts(prompts, self.prompt_encoder.resolution)
        return self.prompt_encoder(prompts)

    def decode_masks(self, image_feature, sparse_tokens, dense_embedding) -> DecoderOutputs:
        pe = self.prompt_encoder.dense_pe().to(image_feature.dtype)
        return self.decoder(image_feature, pe, sparse_tokens, dense_embedding)
