"""Random mask plans for the single masked input shared by every objective.

Sampling uses numpy's PCG64 generator (``numpy.random.Generator``), so a
given seed reproduces the same plans on every platform.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .preprocessing import PatchGrid, TokenSeq


def mask_count(n_items: int, rate: float) -> int:
    """``floor(rate * n)`` clamped to ``[1, n - 1]``."""
    if n_items < 2:
        raise ValueError(f"need at least 2 items to mask, got {n_items}")
    return min(max(math.floor(rate * n_items), 1), n_items - 1)


def sample_mask(n_items: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random subset of ``range(n_items)`` of size ``mask_count``, sorted."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"rate {rate} must lie strictly inside (0, 1)")
    k = mask_count(n_items, rate)
    return np.sort(rng.permutation(n_items)[:k])


@dataclass(frozen=True)
class MaskPlan:
    image_masked_idx: tuple[int, ...]
    text_masked_idx: tuple[int, ...]  # positions in the framed sequence, [CLS] is 0
    num_patches: int
    body_len: int

    @property
    def image_rate(self) -> float:
        return len(self.image_masked_idx) / self.num_patches

    @property
    def text_rate(self) -> float:
        return len(self.text_masked_idx) / self.body_len if self.body_len else 0.0

    @property
    def image_kept_idx(self) -> tuple[int, ...]:
        masked = set(self.image_masked_idx)
        return tuple(i for i in range(self.num_patches) if i not in masked)

    def to_record(self, study_id: str) -> dict:
        return {
            "study_id": study_id,
            "image_masked_idx": list(self.image_masked_idx),
            "text_masked_idx": list(self.text_masked_idx),
        }


def sample_plan(
    num_patches: int,
    body_len: int,
    image_rate: float,
    text_rate: float,
    rng: np.random.Generator,
) -> MaskPlan:
    """Draw image indices first, then text body positions (shifted past [CLS]).

    A body shorter than 2 tokens cannot keep one token visible and mask one,
    so it gets an empty text plan and contributes nothing to the text loss.
    """
    img = sample_mask(num_patches, image_rate, rng)
    if body_len >= 2:
        txt = sample_mask(body_len, text_rate, rng) + 1
    else:
        txt = np.zeros(0, dtype=np.int64)
    return MaskPlan(tuple(int(i) for i in img), tuple(int(i) for i in txt), num_patches, body_len)


def apply_image_mask(grid: PatchGrid, plan: MaskPlan) -> tuple[np.ndarray, list[int]]:
    """Drop masked patches. Returns kept rows (original order) and their indices."""
    n = grid.num_patches
    masked = plan.image_masked_idx
    if not masked:
        raise ValueError("image mask plan is empty; at least one patch must be masked")
    if len(masked) >= n:
        raise ValueError("image mask plan masks every patch")
    if min(masked) < 0 or max(masked) >= n:
        raise ValueError(f"image mask index out of range [0, {n})")
    keep = np.ones(n, dtype=bool)
    keep[list(masked)] = False
    positions = np.flatnonzero(keep)
    return grid.patches[positions], positions.tolist()


def apply_text_mask(seq: TokenSeq, plan: MaskPlan, mask_id: int) -> TokenSeq:
    """Replace the planned body positions with ``mask_id``; keep originals alongside."""
    body_end = len(seq.ids) - 1  # [SEP]
    ids = list(seq.ids)
    for k in plan.text_masked_idx:
        if k <= 0 or k >= body_end:
            raise ValueError(f"text mask position {k} is not a body position (1..{body_end - 1})")
        ids[k] = mask_id
    if plan.text_masked_idx and len(plan.text_masked_idx) >= seq.body_len:
        raise ValueError("text mask plan masks the whole body")
    return TokenSeq(tuple(ids), seq.offsets, original_ids=seq.ids)


def write_plans_jsonl(records: Iterable[tuple[str, MaskPlan]], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for study_id, plan in records:
            fh.write(json.dumps(plan.to_record(study_id)) + "\n")


def read_plans_jsonl(path: str | os.PathLike) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
