"""Building blocks shared by the encoder, decoder and refinement modules."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis of an NCHW tensor."""

    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int = 2):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v input widths.

    ``forward`` returns the projected output; the softmax weights of the last
    call are kept on ``last_weights`` when ``keep_weights`` is set, which the
    tests use to check row normalisation.
    """

    def __init__(self, dim: int, num_heads: int, q_dim: int | None = None,
                 kv_dim: int | None = None, out_dim: int | None = None):
        super().__init__()
        q_dim = q_dim or dim
        kv_dim = kv_dim or dim
        if dim % num_heads:
            raise ValueError(f"attention dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q_proj = nn.Linear(q_dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, out_dim or q_dim)
        self.keep_weights = False
        self.last_weights = None

    def mix(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Attention mixture before the output projection, shape [B, Nq, dim]."""
        if q.shape[-1] != self.q_proj.in_features or k.shape[-1] != self.k_proj.in_features \
                or v.shape[-1] != self.v_proj.in_features:
            raise ValueError(
                f"attention input widths {q.shape[-1]}/{k.shape[-1]}/{v.shape[-1]} do not match "
                f"{self.q_proj.in_features}/{self.k_proj.in_features}/{self.v_proj.in_features}")
        b, nq, _ = q.shape
        nk = k.shape[1]
        h = self.num_heads
        q = self.q_proj(q).view(b, nq, h, -1).transpose(1, 2)
        k = self.k_proj(k).view(b, nk, h, -1).transpose(1, 2)
        v = self.v_proj(v).view(b, nk, h, -1).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        weights = logits.softmax(dim=-1)
        if self.keep_weights:
            self.last_weights = weights.detach()
        out = weights @ v
        return out.transpose(1, 2).reshape(b, nq, -1)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return self.out_proj(self.mix(q, k, v))


def tokenize(x: torch.Tensor) -> torch.Tensor:
    """[B, C, h, w] -> [B, h*w, C], row-major over space."""
    return x.flatten(2).transpose(1, 2)


def detokenize(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`tokenize`."""
    b, n, c = tokens.shape
    if n != h * w:
        raise ValueError(f"{n} tokens cannot fill a {h}x{w} grid")
    return tokens.transpose(1, 2).reshape(b, c, h, w)


def sinusoidal_grid_encoding(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sine/cosine encoding of cell centres in normalised [0, 1] image
    coordinates, returned as tokens [h*w, dim].

    Because coordinates are normalised, grids of different granularity that cover
    the same image agree on where each token sits.
    """
    if dim % 4:
        raise ValueError("encoding dim must be divisible by 4")
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    quarter = dim // 4
    freqs = 2.0 ** torch.arange(quarter, dtype=torch.float64) * math.pi
    parts = []
    for coord in (yy.reshape(-1), xx.reshape(-1)):
        angles = coord[:, None] * freqs[None, :]
        parts += [angles.sin(), angles.cos()]
    return torch.cat(parts, dim=1).to(dtype)


def sinusoidal_index_encoding(index: float, dim: int, dtype=torch.float32) -> torch.Tensor:
    """1-D sinusoidal encoding of a scalar (used for relative frame offsets)."""
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = float(index) * freqs
    return torch.cat([angles.sin(), angles.cos()]).to(dtype)


class RandomFourierEncoding(nn.Module):
    """Positional encoding with a fixed random Gaussian frequency matrix."""

    def __init__(self, num_feats: int, scale: float = 1.0, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("gaussian", scale * torch.randn(2, num_feats, generator=gen), persistent=False)

    def encode(self, coords: torch.Tensor) -> torch.Tensor:
        """coords in [0, 1], shape [..., 2] as (x, y)."""
        coords = 2 * coords - 1
        coords = coords.to(self.gaussian.dtype) @ self.gaussian
        coords = 2 * math.pi * coords
        return torch.cat([coords.sin(), coords.cos()], dim=-1)

    def grid(self, h: int, w: int) -> torch.Tensor:
        """Dense encoding [2*num_feats, h, w]."""
        ys = (torch.arange(h, dtype=self.gaussian.dtype, device=self.gaussian.device) + 0.5) / h
        xs = (torch.arange(w, dtype=self.gaussian.dtype, device=self.gaussian.device) + 0.5) / w
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        pe = self.encode(torch.stack([xx, yy], dim=-1))
        return pe.permute(2, 0, 1)

    def points(self, xy: torch.Tensor, size: int) -> torch.Tensor:
        """Pixel coordinates (x, y) in [0, size) -> encodings [..., 2*num_feats]."""
        return self.encode((xy + 0.5) / size)
