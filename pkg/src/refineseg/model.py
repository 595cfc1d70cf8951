"""Single-image forward pass wiring encoder, localization augment, baseline
decoder, prompt retargeting and mask refinement, with per-module bypasses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .base_model import BaseModel, DecoderOutputs, PromptBatch, collate_prompts, select_mask
from .config import ModelConfig
from .encoder import FeaturePyramid, ImageEncoder, LowLevelStem, check_images
from .layers import detokenize, tokenize
from .localization import LocalizationAugment, crop_subimages
from .refinement import MaskRefinement, RefinementOutputs
from .retargeting import PromptRetargeting
from .video import MemoryAttention, MemoryBank, MemoryEncoder

BASELINE_PREFIXES = ("encoder.", "base.", "feature_proj.", "memory_encoder.", "memory_attention.")
REFINER_PREFIXES = {"la": ("la.",), "pr": ("pr.",), "mr": ("mr.", "stem.")}


@dataclass
class ForwardResult:
    decoder: DecoderOutputs
    refinement: RefinementOutputs | None
    final_logits: torch.Tensor  # [B, 1, R, R]
    selected: torch.Tensor  # [B, 1, R/4, R/4]
    feature: torch.Tensor  # decoder input feature [B, C_e, R/16, R/16]
    renewed: torch.Tensor  # embedding after retargeting (or E when disabled)


@dataclass
class EncodedImages:
    """Frozen-encoder outputs: full-image pyramid and the four crops' stride-16 features."""

    pyramid: FeaturePyramid
    subs: torch.Tensor | None = None  # [4, B, C16, h, w]

    def select(self, idx) -> "EncodedImages":
        return EncodedImages(self.pyramid.select(idx), None if self.subs is None else self.subs[:, idx])


class RefinerModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        self.encoder = ImageEncoder(cfg.c4, cfg.c8, cfg.c16)
        self.feature_proj = nn.Conv2d(cfg.c16, cfg.c_embed, 1) if cfg.c16 != cfg.c_embed else None
        self.base = BaseModel(cfg.c_embed, cfg.resolution, cfg.num_heads)
        self.memory_encoder = MemoryEncoder(cfg.c_embed, cfg.memory_dim)
        self.memory_attention = MemoryAttention(cfg.c16, cfg.memory_dim, cfg.num_heads)
        self.stem = LowLevelStem(cfg.c_low)
        self.la = LocalizationAugment(cfg.c16, cfg.num_heads, cfg.pool_kernels)
        self.pr = PromptRetargeting(cfg.c_embed, cfg.resolution, cfg.num_heads, cfg.radius)
        self.mr = MaskRefinement(cfg.c_embed, cfg.c4, cfg.c8, cfg.c16, cfg.c_low)

    def reset_refiner(self, seed: int) -> "RefinerModel":
        """Re-create the refiner modules from ``seed`` (baseline weights untouched)."""
        cfg = self.config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            dtype = next(self.encoder.parameters()).dtype
            self.stem = LowLevelStem(cfg.c_low).to(dtype)
            self.la = LocalizationAugment(cfg.c16, cfg.num_heads, cfg.pool_kernels).to(dtype)
            self.pr = PromptRetargeting(cfg.c_embed, cfg.resolution, cfg.num_heads, cfg.radius).to(dtype)
            self.mr = MaskRefinement(cfg.c_embed, cfg.c4, cfg.c8, cfg.c16, cfg.c_low).to(dtype)
        return self

    @property
    def modules_enabled(self) -> frozenset:
        return self.config.modules

    def set_modules(self, modules) -> "RefinerModel":
        self.config = self.config.with_modules(modules)
        return self

    # parameter groups ------------------------------------------------------
    def baseline_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith(BASELINE_PREFIXES)]

    def refiner_named_parameters(self, modules=None):
        modules = self.modules_enabled if modules is None else modules
        prefixes = tuple(p for m in modules for p in REFINER_PREFIXES[m])
        if not prefixes:
            return []
        return [(n, p) for n, p in self.named_parameters() if n.startswith(prefixes)]

    # encoding --------------------------------------------------------------
    def encode(self, images: torch.Tensor, with_crops: bool | None = None) -> EncodedImages:
        """Full image and (when LA needs them) the crops are encoded in separate calls so the
        full-image pyramid does not depend on whether LA is enabled."""
        check_images(images)
        with_crops = ("la" in self.modules_enabled) if with_crops is None else with_crops
        pyramid = self.encoder(images)
        subs = None
        if with_crops:
            crops = crop_subimages(images)
            b = images.shape[0]
            f16 = self.encoder(crops.subs.flatten(0, 1)).f16
            subs = f16.view(4, b, *f16.shape[1:])
        return EncodedImages(pyramid, subs)

    def project(self, g: torch.Tensor) -> torch.Tensor:
        return g if self.feature_proj is None else self.feature_proj(g)

    def condition_on_memory(self, g: torch.Tensor, entries, frame_index: int) -> torch.Tensor:
        entries = list(entries)
        if not entries:
            return g
        h, w = g.shape[-2:]
        return detokenize(self.memory_attention(tokenize(g), entries, frame_index, (h, w)), h, w)

    # forward ---------------------------------------------------------------
    def _prompts(self, prompts) -> PromptBatch:
        if isinstance(prompts, PromptBatch):
            return prompts
        return collate_prompts(list(prompts), self.config.resolution)

    def forward_image(self, images, prompts, encoded: EncodedImages | None = None,
                      memory=None, frame_index: int = 0) -> ForwardResult:
        modules = self.modules_enabled
        prompts = self._prompts(prompts)
        if len(prompts) != images.shape[0]:
            raise ValueError(f"{len(prompts)} prompt sets for {images.shape[0]} images")
        if encoded is None or ("la" in modules and encoded.subs is None):
            encoded = self.encode(images)
        pyramid = encoded.pyramid
        g = pyramid.f16
        if memory:
            g = self.condition_on_memory(g, memory, frame_index)
        if "la" in modules:
            g = self.la.refine(g, encoded.subs)
        feature = self.project(g)
        sparse, dense = self.base.encode_prompts(prompts)
        dec = self.base.decode_masks(feature, sparse, dense)
        selected, index = select_mask(dec)
        renewed = dec.embedding
        if "pr" in modules:
            pe = self.base.prompt_encoder.dense_pe().to(renewed.dtype)
            renewed = self.pr(dec.embedding, prompts.points, prompts.labels, selected,
                              dec.sparse_tokens, dec.output_token, pe)
        refinement = None
        if "mr" in modules:
            low = self.stem(images)
            refinement = self.mr(renewed, FeaturePyramid(pyramid.f4, pyramid.f8, pyramid.f16, low))
            final = refinement.final_logits
        else:
            coarse = selected
            if "pr" in modules:
                masks = self.base.decoder.masks_from_embedding(renewed, dec.hyper_weights)
                coarse = masks.gather(1, index.view(-1, 1, 1, 1).expand(-1, 1, *masks.shape[-2:]))
            final = upsample_logits(coarse, self.config.resolution)
        return ForwardResult(dec, refinement, final, selected, feature, renewed)

    def forward(self, images, prompts, encoded=None):
        return self.forward_image(images, prompts, encoded).final_logits

    def baseline_forward(self, images, prompts) -> torch.Tensor:
        """The frozen baseline alone: decode from G and interpolate the selected mask to R."""
        prompts = self._prompts(prompts)
        feature = self.project(self.encoder(check_images(images)).f16)
        sparse, dense = self.base.encode_prompts(prompts)
        selected, _ = select_mask(self.base.decode_masks(feature, sparse, dense))
        return upsample_logits(selected, self.config.resolution)

    # video -----------------------------------------------------------------
    def encode_memory(self, feature: torch.Tensor, final_logits: torch.Tensor, frame_index: int):
        return self.memory_encoder(feature, final_logits, frame_index)

    @torch.no_grad()
    def propagate_video(self, frames: torch.Tensor, first_prompt, capacity: int | None = None):
        """Segment every frame re-using the first-frame prompt; returns logits [T, 1, R, R].

        The prompted first frame's memory is pinned; later frames go through a FIFO bank.
        """
        if frames.ndim == 3:
            frames = frames.unsqueeze(0)
        if frames.shape[0] < 1:
            raise ValueError("at least one frame is required")
        prompts = self._prompts([first_prompt])
        bank = MemoryBank(capacity or self.config.bank_capacity)
        anchor = None
        outputs = []
        for t in range(frames.shape[0]):
            memory = ([anchor] if anchor is not None else []) + bank.entries
            out = self.forward_image(frames[t:t + 1], prompts, memory=memory, frame_index=t)
            outputs.append(out.final_logits[0])
            entry = self.encode_memory(out.feature[0], out.final_logits[0], t)
            if anchor is None:
                anchor = entry
            else:
                bank.push(entry)
        return torch.stack(outputs)


def upsample_logits(logits: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(logits, size=(size, size), mode="bilinear", align_corners=False)
