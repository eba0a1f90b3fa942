"""Common-space projection, pooling, and the two orderings of them.

Mapping-before-aggregation (MbA) projects every token and pools in the
common space; aggregation-before-mapping (AbM) pools in the encoder space
and projects the pooled vector. Both use the same projection module, so
they differ only in order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .encoders import TokenFeatures

NORM_FLOOR = 1e-12


class Projection(nn.Module):
    """Map d -> d_s, either ``affine`` or ``affine -> GELU -> affine``."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None, kind: str = "mlp"):
        super().__init__()
        self.kind = kind
        if kind == "mlp":
            hidden = hidden or in_dim
            self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))
        elif kind == "linear":
            self.net = nn.Linear(in_dim, out_dim)
        else:
            raise ValueError(f"unknown projection kind {kind!r}")
        self.in_dim, self.out_dim = in_dim, out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"feature width {x.shape[-1]} != projection input {self.in_dim}")
        return self.net(x)


def project(tokens: TokenFeatures, proj: Projection) -> TokenFeatures:
    return tokens.with_features(proj(tokens.features))


def pool_mask(tokens: TokenFeatures, include_cls: bool = True) -> torch.Tensor:
    valid = tokens.valid
    if not include_cls and tokens.has_cls:
        valid = valid.clone()
        valid[:, 0] = False
    return valid


def aggregate(tokens: TokenFeatures, mode: str = "max", include_cls: bool = True) -> torch.Tensor:
    """Pool (B, T, d) over valid tokens -> (B, d).

    Max ties resolve to the lowest token index (``torch.max`` semantics),
    which is where the gradient goes.
    """
    x = tokens.features
    valid = pool_mask(tokens, include_cls)
    if x.shape[1] == 0 or not valid.any(dim=1).all():
        raise ValueError("cannot aggregate an empty token set")
    if mode == "max":
        return x.masked_fill(~valid[..., None], float("-inf")).max(dim=1).values
    if mode == "mean":
        w = valid[..., None].to(x.dtype)
        return (x * w).sum(dim=1) / w.sum(dim=1)
    raise ValueError(f"unknown aggregation {mode!r}")


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if (norm < NORM_FLOOR).any():
        raise FloatingPointError("cannot normalise a (near) zero embedding")
    return x / norm


def align(tokens: TokenFeatures, proj: Projection, strategy: str = "MbA", mode: str = "max",
          include_cls: bool = True) -> torch.Tensor:
    """Unit-norm global embedding (B, d_s) for one modality."""
    if strategy == "MbA":
        pooled = aggregate(project(tokens, proj), mode, include_cls)
    elif strategy == "AbM":
        pooled = proj(aggregate(tokens, mode, include_cls))
    else:
        raise ValueError(f"unknown alignment strategy {strategy!r}")
    return l2_normalize(pooled)


def align_pair(fv: TokenFeatures, fr: TokenFeatures, proj_v: Projection, proj_r: Projection,
               strategy: str = "MbA", mode: str = "max",
               include_cls: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    return (align(fv, proj_v, strategy, mode, include_cls),
            align(fr, proj_r, strategy, mode, include_cls))


@dataclass
class AlignedEmbeddings:
    """Row-aligned unit vectors with owners, as exported for retrieval."""

    vectors: np.ndarray  # (n, d_s)
    study_ids: list[str]
    modality: str

    def __post_init__(self):
        if len(self.study_ids) != len(self.vectors):
            raise ValueError("one study_id per embedding row is required")


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, AlignedEmbeddings):
        return np.asarray(x.vectors, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def modality_gap(vs, rs) -> float:
    """Euclidean distance between the image and report centroids."""
    v, r = _as_matrix(vs), _as_matrix(rs)
    if len(v) == 0 or len(r) == 0:
        raise ValueError("modality_gap needs non-empty embedding sets")
    return float(np.linalg.norm(v.mean(axis=0) - r.mean(axis=0)))


def pca_scatter(vs, rs) -> dict[str, list[list[float]]]:
    """2-D principal-component coordinates of both clouds (shared basis)."""
    v, r = _as_matrix(vs), _as_matrix(rs)
    both = np.concatenate([v, r])
    centered = both - both.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:2].T
    if basis.shape[1] < 2:
        basis = np.pad(basis, ((0, 0), (0, 2 - basis.shape[1])))
    xy = centered @ basis
    return {"vision": xy[: len(v)].tolist(), "text": xy[len(v):].tolist()}


def export_embeddings(embeddings: Sequence[AlignedEmbeddings], matrix_path: str | os.PathLike,
                      sidecar_path: str | os.PathLike | None = None) -> None:
    """Write all rows to one ``.npy`` matrix and a JSONL sidecar of owners."""
    matrix_path = Path(matrix_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else matrix_path.with_suffix(".jsonl")
    np.save(matrix_path, np.concatenate([e.vectors for e in embeddings]).astype(np.float32))
    row = 0
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        for e in embeddings:
            for sid in e.study_ids:
                fh.write(json.dumps({"study_id": sid, "modality": e.modality, "row": row}) + "\n")
                row += 1


def import_embeddings(matrix_path: str | os.PathLike,
                      sidecar_path: str | os.PathLike | None = None) -> dict[str, AlignedEmbeddings]:
    matrix_path = Path(matrix_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else matrix_path.with_suffix(".jsonl")
    mat = np.load(matrix_path)
    rows: dict[str, tuple[list[int], list[str]]] = {}
    for line in sidecar_path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        idx, ids = rows.setdefault(rec["modality"], ([], []))
        idx.append(rec["row"])
        ids.append(rec["study_id"])
    return {m: AlignedEmbeddings(mat[idx], ids, m) for m, (idx, ids) in rows.items()}


def tensor_to_embeddings(x: torch.Tensor, study_ids: Sequence[str], modality: str) -> AlignedEmbeddings:
    return AlignedEmbeddings(x.detach().cpu().double().numpy(), list(study_ids), modality)

