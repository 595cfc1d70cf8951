"""Video memory: memory encoder, FIFO memory bank and memory attention."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import Attention, sinusoidal_grid_encoding, sinusoidal_index_encoding


@dataclass
class MemoryEntry:
    embedding: torch.Tensor  # [C_m, h, w]
    frame_index: int


class MemoryBank:
    """Bounded FIFO of memory entries; the oldest entry is evicted first."""

    def __init__(self, capacity: int = 6):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries = deque()

    def push(self, entry: MemoryEntry) -> "MemoryBank":
        if self._entries and entry.frame_index <= self._entries[-1].frame_index:
            raise ValueError("frame indices must increase within a bank")
        self._entries.append(entry)
        while len(self._entries) > self.capacity:
            self._entries.popleft()
        return self

    @property
    def entries(self) -> list:
        return list(self._entries)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)


def bank_push(bank: MemoryBank, entry: MemoryEntry) -> MemoryBank:
    return bank.push(entry)


class MemoryEncoder(nn.Module):
    """Fuse the frame feature with the predicted mask probability into a memory embedding."""

    def __init__(self, in_channels: int, memory_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = nn.Conv2d(in_channels + 1, memory_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(memory_channels, memory_channels, 1)

    def forward(self, frame_feature: torch.Tensor, final_logits: torch.Tensor, frame_index: int) -> MemoryEntry:
        if frame_feature.ndim != 3 or frame_feature.shape[0] != self.in_channels:
            raise ValueError(f"frame feature must be [{self.in_channels}, h, w], got {tuple(frame_feature.shape)}")
        h, w = frame_feature.shape[-2:]
        prob = torch.sigmoid(final_logits.reshape(1, 1, *final_logits.shape[-2:]))
        if prob.shape[-1] % w or prob.shape[-2] % h:
            raise ValueError("mask resolution is not a multiple of the feature grid")
        prob = F.adaptive_avg_pool2d(prob, (h, w)).to(frame_feature.dtype)
        x = torch.cat([frame_feature.unsqueeze(0), prob], dim=1)
        emb = self.conv2(F.gelu(self.conv1(x)))
        return MemoryEntry(emb[0], int(frame_index))


class MemoryAttention(nn.Module):
    """Frame tokens attend to all memory tokens; residual onto the frame tokens.

    Memory tokens carry a spatial encoding and an encoding of their offset from the
    current frame. The output projection starts at zero.
    """

    def __init__(self, dim: int, memory_dim: int, num_heads: int = 4, zero_init: bool = True):
        super().__init__()
        self.dim = dim
        self.memory_dim = memory_dim
        self.norm_q = nn.LayerNorm(dim)
        self.norm_m = nn.LayerNorm(memory_dim)
        self.attn = Attention(dim, num_heads, q_dim=dim, kv_dim=memory_dim, out_dim=dim)
        if zero_init:
            nn.init.zeros_(self.attn.out_proj.weight)
            nn.init.zeros_(self.attn.out_proj.bias)

    def memory_tokens(self, entries, current_index: int):
        toks, pes = [], []
        for e in entries:
            c, h, w = e.embedding.shape
            if c != self.memory_dim:
                raise ValueError(f"memory embedding has {c} channels, expected {self.memory_dim}")
            toks.append(e.embedding.flatten(1).transpose(0, 1))
            spatial = sinusoidal_grid_encoding(h, w, c, dtype=e.embedding.dtype)
            temporal = sinusoidal_index_encoding(current_index - e.frame_index, c, dtype=e.embedding.dtype)
            pes.append((spatial + temporal).to(e.embedding.device))
        return torch.cat(toks), torch.cat(pes)

    def forward(self, frame_tokens: torch.Tensor, entries, current_index: int = 0, grid=None) -> torch.Tensor:
        """frame_tokens [B, N, C]; ``entries`` an iterable of MemoryEntry (may be empty)."""
        entries = list(entries)
        if not entries:
            return frame_tokens
        if frame_tokens.shape[-1] != self.dim:
            raise ValueError(f"frame tokens have width {frame_tokens.shape[-1]}, expected {self.dim}")
        mem, mem_pe = self.memory_tokens(entries, current_index)
        b, n, _ = frame_tokens.shape
        q = self.norm_q(frame_tokens)
        if grid is not None:
            q = q + sinusoidal_grid_encoding(*grid, self.dim, dtype=q.dtype).to(q.device)
        kv = self.norm_m(mem).unsqueeze(0).expand(b, -1, -1)
        k = kv + mem_pe.unsqueeze(0)
        return frame_tokens + self.attn(q, k, kv)


def memory_attend(attention: MemoryAttention, frame_tokens, bank, current_index: int = 0, grid=None):
    return attention(frame_tokens, list(bank), current_index, grid)
