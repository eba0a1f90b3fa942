"""Training objectives: image-report contrastive, masked image and masked report
reconstruction, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import Block, TokenFeatures, encode


def contrastive_loss(sv: torch.Tensor, sr: torch.Tensor, tau, lambda_v: float = 0.75,
                     lambda_r: float = 0.25, tau_min: float | None = None) -> torch.Tensor:
    """Asymmetric InfoNCE summed (not averaged) over the batch.

    ``lambda_v * L(v->r) + lambda_r * L(r->v)`` where each direction is
    ``-sum_k log softmax_j(<sv_k, sr_j> / tau)[k]`` over L2-normalised rows.
    """
    if sv.shape != sr.shape:
        raise ValueError(f"batch mismatch: {tuple(sv.shape)} vs {tuple(sr.shape)}")
    if sv.shape[0] < 1:
        raise ValueError("empty batch")
    tau = torch.as_tensor(tau, dtype=sv.dtype, device=sv.device)
    if tau_min is not None and float(tau) < tau_min * (1 - 1e-9):
        raise ValueError(f"temperature {float(tau)} below floor {tau_min}")
    sv = F.normalize(sv, dim=-1)
    sr = F.normalize(sr, dim=-1)
    logits = sv @ sr.T / tau
    v2r = -torch.diagonal(logits.log_softmax(dim=1)).sum()
    r2v = -torch.diagonal(logits.T.log_softmax(dim=1)).sum()
    return lambda_v * v2r + lambda_r * r2v


class ImageDecoder(nn.Module):
    """MAE-style pixel decoder.

    Kept tokens are re-embedded, mask tokens fill the masked slots, each
    slot receives its positional embedding, and a linear head emits one
    patch of pixels per position.
    """

    def __init__(self, num_patches: int, patch_dim: int, dim: int, depth: int,
                 num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.num_patches = num_patches
        self.embed = nn.Linear(dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches + 1, dim))
        self.blocks = nn.ModuleList(Block(dim, num_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.head = nn.Linear(dim, patch_dim)

    def forward(self, fv: TokenFeatures) -> torch.Tensor:
        x = self.embed(fv.features)
        b, t, d = x.shape
        kept = fv.positions[:, 1:]  # shifted by +1 for [CLS]
        if kept.numel() and (kept.min() < 1 or kept.max() > self.num_patches):
            raise ValueError("kept positions inconsistent with the patch grid")
        full = self.mask_token.expand(b, self.num_patches + 1, d).clone()
        full = full.scatter(1, kept[..., None].expand(-1, -1, d), x[:, 1:])
        full = torch.cat([x[:, :1], full[:, 1:]], dim=1) + self.pos_embed
        full = encode(full, self.blocks)
        return self.head(self.norm(full))[:, 1:]


def decode_image(fv: TokenFeatures, decoder: ImageDecoder) -> torch.Tensor:
    return decoder(fv)


class TextDecoder(nn.Module):
    """Per-position vocabulary head: affine -> GELU -> LayerNorm -> affine."""

    def __init__(self, dim: int, vocab_size: int):
        super().__init__()
        self.dense = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.head = nn.Linear(dim, vocab_size)

    def forward(self, fr: TokenFeatures | torch.Tensor) -> torch.Tensor:
        x = fr.features if isinstance(fr, TokenFeatures) else fr
        if x.shape[-1] != self.dense.in_features:
            raise ValueError(f"feature width {x.shape[-1]} != decoder width {self.dense.in_features}")
        return self.head(self.norm(F.gelu(self.dense(x))))


def decode_text(fr: TokenFeatures, decoder: TextDecoder) -> torch.Tensor:
    return decoder(fr)


def _batched(x: torch.Tensor, ndim: int) -> torch.Tensor:
    return x.unsqueeze(0) if x.ndim == ndim - 1 else x


def mim_loss(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Squared pixel error averaged over masked patches only.

    ``pred``/``target`` are (B, N, P*P*C) or (N, P*P*C); ``masked`` is a
    boolean (B, N) / (N,) selector. Per-sample means are averaged over B.
    """
    pred, target, masked = _batched(pred, 3), _batched(target, 3), _batched(masked, 2)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    counts = masked.sum(dim=1)
    if (counts == 0).any():
        raise ValueError("empty image mask: reconstruction loss undefined")
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    per_patch = torch.where(masked, per_patch, torch.zeros_like(per_patch))
    return (per_patch.sum(dim=1) / counts).mean()


def mrm_loss(logits: torch.Tensor, original_ids: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Token cross-entropy averaged over masked positions, then over samples.

    Samples without any masked position are skipped; if none remain the
    loss is undefined and an error is raised.
    """
    logits, original_ids, masked = _batched(logits, 3), _batched(original_ids, 2), _batched(masked, 2)
    counts = masked.sum(dim=1)
    has = counts > 0
    if not has.any():
        raise ValueError("empty text mask: masked report loss undefined")
    nll = -logits.log_softmax(dim=-1).gather(-1, original_ids[..., None]).squeeze(-1)
    nll = torch.where(masked, nll, torch.zeros_like(nll))
    per_sample = nll.sum(dim=1)[has] / counts[has]
    return per_sample.mean()


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


@dataclass
class LossBundle:
    l_vrc: torch.Tensor
    l_mim: torch.Tensor
    l_mrm: torch.Tensor
    l_total: torch.Tensor
    tau_current: float
    batch_size: int = 1

    def to_record(self) -> dict[str, float]:
        vrc = _scalar(self.l_vrc)
        return {
            "l_vrc": vrc,
            "l_vrc_per_sample": vrc / max(self.batch_size, 1),
            "l_mim": _scalar(self.l_mim),
            "l_mrm": _scalar(self.l_mrm),
            "l_total": _scalar(self.l_total),
            "tau": self.tau_current,
        }


def total_loss(l_vrc, l_mim, l_mrm, lambda_vrc: float = 0.1, lambda_mim: float = 1.0,
               lambda_mrm: float = 1.0, tau_current: float = math.nan,
               batch_size: int = 1) -> LossBundle:
    parts = [torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
             for p in (l_vrc, l_mim, l_mrm)]
    names = ("l_vrc", "l_mim", "l_mrm")
    for name, p in zip(names, parts):
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite loss component {name}: {float(p)}")
    total = lambda_vrc * parts[0] + lambda_mim * parts[1] + lambda_mrm * parts[2]
    return LossBundle(parts[0], parts[1], parts[2], total, tau_current, batch_size)
