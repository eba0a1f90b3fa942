"""Dual-stream transformer encoders for masked images and masked reports."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class TokenFeatures:
    """Batched per-token features.

    ``valid`` marks real tokens (False at [PAD]); ``positions`` holds the
    positional-table row used for each token.
    """

    features: torch.Tensor  # (B, T, d)
    valid: torch.Tensor  # (B, T) bool
    positions: torch.Tensor  # (B, T) long
    modality: str
    has_cls: bool = True

    @property
    def shape(self) -> torch.Size:
        return self.features.shape

    def with_features(self, features: torch.Tensor) -> "TokenFeatures":
        return TokenFeatures(features, self.valid, self.positions, self.modality, self.has_cls)


def init_weights(module: nn.Module) -> None:
    """Truncated-normal(0.02) weights, zero biases, unit LayerNorm."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if pad is not None:
            scores = scores.masked_fill(pad[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), pad)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


def encode(x: torch.Tensor, blocks: nn.ModuleList, pad: torch.Tensor | None = None) -> torch.Tensor:
    """Run ``x`` (B, T, d) through ``blocks``; an empty stack is the identity."""
    if not torch.isfinite(x).all():
        raise FloatingPointError("non-finite encoder input")
    for i, blk in enumerate(blocks):
        x = blk(x, pad)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite activations after encoder layer {i}")
    return x


class VisionEncoder(nn.Module):
    def __init__(self, num_patches: int, patch_dim: int, dim: int, depth: int,
                 num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.num_patches = num_patches
        self.patch_embed = nn.Linear(patch_dim, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches + 1, dim))
        self.blocks = nn.ModuleList(Block(dim, num_heads, mlp_ratio) for _ in range(depth))
        # counts forwards over the complete patch sequence
        self.full_forward_count = 0
        self.tokens_seen = 0

    def embed(self, patches: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """(B, n, P*P*C) kept patches + original indices -> (B, n+1, d).

        Row 0 is [CLS] + pos[0]; kept patch with original index k gets pos[k+1].
        """
        if positions.numel() and (positions.min() < 0 or positions.max() >= self.num_patches):
            raise IndexError(f"patch position outside [0, {self.num_patches})")
        b = patches.shape[0]
        pos = self.pos_embed[0]
        cls = (self.cls_token[:, 0] + pos[0]).expand(b, 1, -1)
        return torch.cat([cls, self.patch_embed(patches) + pos[positions + 1]], dim=1)

    def forward(self, patches: torch.Tensor, positions: torch.Tensor | None = None) -> TokenFeatures:
        b, n, _ = patches.shape
        if positions is None:
            positions = torch.arange(n, device=patches.device).expand(b, n)
        if n == self.num_patches:
            self.full_forward_count += 1
        self.tokens_seen += b * (n + 1)
        x = encode(self.embed(patches, positions), self.blocks)
        cls_pos = torch.zeros(b, 1, dtype=torch.long, device=patches.device)
        all_pos = torch.cat([cls_pos, positions + 1], dim=1)
        valid = torch.ones(b, n + 1, dtype=torch.bool, device=patches.device)
        return TokenFeatures(x, valid, all_pos, "vision")


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, max_positions: int, dim: int, depth: int,
                 num_heads: int, mlp_ratio: float = 4.0, pad_id: int = 0):
        super().__init__()
        self.max_positions = max_positions
        self.pad_id = pad_id
        self.word_embed = nn.Embedding(vocab_size, dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, max_positions, dim))
        self.blocks = nn.ModuleList(Block(dim, num_heads, mlp_ratio) for _ in range(depth))
        self.tokens_seen = 0

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        t = ids.shape[1]
        if t > self.max_positions:
            raise ValueError(f"sequence length {t} exceeds {self.max_positions} positions")
        return self.word_embed(ids) + self.pos_embed[:, :t]

    def forward(self, ids: torch.Tensor, valid: torch.Tensor | None = None) -> TokenFeatures:
        """``ids`` (B, T) framed as [CLS] body [SEP] [PAD]...; pads are never attended."""
        if valid is None:
            valid = ids != self.pad_id
        self.tokens_seen += int(ids.shape[0] * ids.shape[1])
        x = encode(self.embed(ids), self.blocks, pad=~valid)
        b, t = ids.shape
        positions = torch.arange(t, device=ids.device).expand(b, t)
        return TokenFeatures(x, valid, positions, "text")


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
