"""Cross-modal retrieval scoring.

Images query reports (I->R, one query per image) and reports query images
(R->I, one query per report). A report with ``m`` images is credited
``hits / min(K, m)`` in R->I. Similarity ties are broken by candidate
index, lowest first.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .alignment import AlignedEmbeddings, modality_gap
from .metrics import CiderStats, bleu4, cider, rouge_l
from .preprocessing import split_sentences

DIRECTIONS = ("i2r", "r2i")


@dataclass
class RetrievalIndex:
    image_emb: np.ndarray  # (n_img, d)
    image_owner: np.ndarray  # (n_img,) row index into the reports
    report_emb: np.ndarray  # (n_rep, d)
    report_ids: list[str]

    def __post_init__(self):
        self.image_emb = np.asarray(self.image_emb, dtype=np.float64)
        self.report_emb = np.asarray(self.report_emb, dtype=np.float64)
        self.image_owner = np.asarray(self.image_owner, dtype=np.int64)
        if len(self.image_owner) != len(self.image_emb):
            raise ValueError("one owner per image embedding is required")
        if len(self.report_ids) != len(self.report_emb):
            raise ValueError("one id per report embedding is required")
        if len(self.image_owner) and (self.image_owner.min() < 0
                                      or self.image_owner.max() >= len(self.report_ids)):
            raise ValueError("image owner outside the report set")
        self._sim: np.ndarray | None = None

    @classmethod
    def from_embeddings(cls, images: AlignedEmbeddings, reports: AlignedEmbeddings) -> "RetrievalIndex":
        pos = {sid: i for i, sid in enumerate(reports.study_ids)}
        missing = [s for s in images.study_ids if s not in pos]
        if missing:
            raise ValueError(f"images owned by unknown reports: {missing[:5]}")
        return cls(images.vectors, [pos[s] for s in images.study_ids], reports.vectors,
                   list(reports.study_ids))

    @property
    def sim(self) -> np.ndarray:
        """(n_img, n_rep) dot products."""
        if self._sim is None:
            self._sim = self.image_emb @ self.report_emb.T
        return self._sim

    @property
    def images_of(self) -> list[np.ndarray]:
        order = np.argsort(self.image_owner, kind="stable")
        bounds = np.searchsorted(self.image_owner[order], np.arange(len(self.report_ids) + 1))
        return [order[bounds[r]:bounds[r + 1]] for r in range(len(self.report_ids))]

    def image_study_ids(self) -> list[str]:
        return [self.report_ids[o] for o in self.image_owner]

    def embeddings(self) -> tuple[AlignedEmbeddings, AlignedEmbeddings]:
        return (AlignedEmbeddings(self.image_emb, self.image_study_ids(), "vision"),
                AlignedEmbeddings(self.report_emb, list(self.report_ids), "text"))

    def gap(self) -> float:
        return modality_gap(self.image_emb, self.report_emb)


def _check(direction: str) -> None:
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def _clamp_k(k: int, n_candidates: int) -> int:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if k > n_candidates:
        warnings.warn(f"K={k} exceeds the {n_candidates} candidates; clamped", stacklevel=3)
        return n_candidates
    return k


def _rank_of(scores: np.ndarray, j: int) -> int:
    """0-based rank of candidate ``j`` under (score desc, index asc) ordering."""
    s = scores[j]
    return int(np.count_nonzero(scores > s) + np.count_nonzero(scores[:j] == s))


def query_hits(index: RetrievalIndex, direction: str, k: int) -> np.ndarray:
    """Per-query credit in [0, 1] (R->I skips reports that own no image)."""
    _check(direction)
    sim = index.sim
    if direction == "i2r":
        k = _clamp_k(k, sim.shape[1])
        ranks = np.array([_rank_of(sim[i], o) for i, o in enumerate(index.image_owner)])
        return (ranks < k).astype(np.float64)
    k = _clamp_k(k, sim.shape[0])
    credit = []
    for r, own in enumerate(index.images_of):
        if len(own) == 0:
            continue
        col = sim[:, r]
        hits = sum(_rank_of(col, int(i)) < k for i in own)
        credit.append(hits / min(k, len(own)))
    return np.asarray(credit, dtype=np.float64)


def recall_at_k(index: RetrievalIndex, direction: str, k: int) -> float:
    """Recall@K in percent."""
    hits = query_hits(index, direction, k)
    if len(hits) == 0:
        raise ValueError("no queries to score")
    return 100.0 * float(hits.mean())


def brute_force_recall(index: RetrievalIndex, direction: str, k: int) -> float:
    """Reference implementation: fully sort every query's candidates."""
    _check(direction)
    sim = index.sim.tolist()
    owner = index.image_owner.tolist()
    n_img, n_rep = len(owner), len(index.report_ids)
    credits = []
    if direction == "i2r":
        k = min(k, n_rep)
        for i in range(n_img):
            ranked = sorted(range(n_rep), key=lambda j: (-sim[i][j], j))
            credits.append(1.0 if owner[i] in ranked[:k] else 0.0)
    else:
        k = min(k, n_img)
        for r in range(n_rep):
            own = [i for i in range(n_img) if owner[i] == r]
            if not own:
                continue
            ranked = sorted(range(n_img), key=lambda i: (-sim[i][r], i))
            top = set(ranked[:k])
            credits.append(sum(1 for i in own if i in top) / min(k, len(own)))
    return 100.0 * sum(credits) / len(credits)


def ranking(index: RetrievalIndex, direction: str, query: int) -> np.ndarray:
    """Candidate indices best-first for one query (stable on ties)."""
    _check(direction)
    scores = index.sim[query] if direction == "i2r" else index.sim[:, query]
    return np.argsort(-scores, kind="stable")


# embedding a corpus -----------------------------------------------------------

@torch.no_grad()
def embed_corpus(model, corpus, batch_size: int = 256) -> RetrievalIndex:
    """Complete (unmasked) image and report forwards for an ``EncodedCorpus``."""
    if len(corpus) == 0:
        raise ValueError("cannot embed an empty corpus")
    model.eval()
    imgs, reps = [], []
    for s in range(0, len(corpus.patches), batch_size):
        imgs.append(model.embed_images(torch.from_numpy(corpus.patches[s:s + batch_size])))
    for s in range(0, len(corpus), batch_size):
        ids = torch.from_numpy(corpus.ids[s:s + batch_size])
        reps.append(model.embed_texts(ids, ids != corpus.vocab.pad_id))
    return RetrievalIndex(torch.cat(imgs).double().numpy(), corpus.view_owner,
                          torch.cat(reps).double().numpy(), list(corpus.study_ids))


def evaluate_recall(index: RetrievalIndex, ks: Sequence[int] = (1, 5, 10)) -> dict[str, float]:
    return {f"{d}_R@{k}": recall_at_k(index, d, k) for d in DIRECTIONS for k in ks}


# NLG scoring of retrieved reports -----------------------------------------------

def nlg_curves(index: RetrievalIndex, reports: Sequence[str], k_max: int = 10) -> list[dict]:
    """Per K, the mean BLEU-4/ROUGE-L/CIDEr of the K-th retrieved report
    against the query's true report, for both directions."""
    if len(index.report_ids) == 0 or len(index.image_owner) == 0:
        raise ValueError("empty corpus")
    if len(reports) != len(index.report_ids):
        raise ValueError("one report text per indexed report is required")
    stats = CiderStats(reports)
    cache: dict[tuple[int, int], tuple[float, float, float]] = {}

    def score(cand: int, truth: int) -> tuple[float, float, float]:
        key = (cand, truth)
        if key not in cache:
            c, t = reports[cand], reports[truth]
            cache[key] = (bleu4(c, t), rouge_l(c, t), cider(c, t, stats))
        return cache[key]

    i2r_rank = [ranking(index, "i2r", i) for i in range(len(index.image_owner))]
    r2i_queries = [r for r, own in enumerate(index.images_of) if len(own)]
    r2i_rank = [ranking(index, "r2i", r) for r in r2i_queries]
    rows = []
    for k in range(1, k_max + 1):
        row: dict[str, float] = {"K": k}
        if k <= len(index.report_ids):
            vals = np.array([score(int(rk[k - 1]), int(o))
                             for rk, o in zip(i2r_rank, index.image_owner)])
            row.update({"i2r_bleu4": vals[:, 0].mean(), "i2r_rouge_l": vals[:, 1].mean(),
                        "i2r_cider": vals[:, 2].mean()})
        if k <= len(index.image_owner):
            vals = np.array([score(int(index.image_owner[rk[k - 1]]), r)
                             for rk, r in zip(r2i_rank, r2i_queries)])
            row.update({"r2i_bleu4": vals[:, 0].mean(), "r2i_rouge_l": vals[:, 1].mean(),
                        "r2i_cider": vals[:, 2].mean()})
        rows.append({key: float(v) for key, v in row.items()})
    return rows


# sentence-count groups -----------------------------------------------------------

@dataclass(frozen=True)
class GroupSpec:
    bounds: tuple[tuple[int, int | None], ...] = ((1, 5), (6, 10), (11, None))

    def label(self, g: int) -> str:
        lo, hi = self.bounds[g]
        return f"{lo}-{hi}" if hi is not None else f"{lo}+"

    def group_of(self, n_sentences: int) -> int:
        for g, (lo, hi) in enumerate(self.bounds):
            if n_sentences >= lo and (hi is None or n_sentences <= hi):
                return g
        # reports with no detectable sentence count as the first group
        return 0


def grouped_recall(index: RetrievalIndex, reports: Sequence[str], groups: GroupSpec = GroupSpec(),
                   ks: Sequence[int] = (1, 5, 10)) -> list[dict]:
    """Recall@K restricted to queries whose report falls in each sentence-count group."""
    report_group = np.array([groups.group_of(len(split_sentences(r))) for r in reports])
    r2i_reports = np.array([r for r, own in enumerate(index.images_of) if len(own)], dtype=np.int64)
    rows = []
    per_k = {(d, k): query_hits(index, d, k) for d in DIRECTIONS for k in ks}
    for g in range(len(groups.bounds)):
        sel_i2r = report_group[index.image_owner] == g
        sel_r2i = report_group[r2i_reports] == g if len(r2i_reports) else np.zeros(0, bool)
        row: dict = {"group": groups.label(g), "n_reports": int((report_group == g).sum()),
                     "n_i2r_queries": int(sel_i2r.sum()), "n_r2i_queries": int(sel_r2i.sum())}
        for k in ks:
            h = per_k[("i2r", k)][sel_i2r]
            row[f"i2r_R@{k}"] = 100.0 * float(h.mean()) if len(h) else None
            h = per_k[("r2i", k)][sel_r2i]
            row[f"r2i_R@{k}"] = 100.0 * float(h.mean()) if len(h) else None
        rows.append(row)
    return rows


# qualitative dumps -----------------------------------------------------------------

def topk_dump(index: RetrievalIndex, reports: Sequence[str], query_id: str, k: int = 3,
              direction: str = "r2i") -> dict:
    """Top-K candidates for one study's query, with the true pair's rank (1-based).

    For I->R the study's first image is the query.
    """
    _check(direction)
    try:
        r = index.report_ids.index(query_id)
    except ValueError:
        raise KeyError(f"unknown study {query_id!r}") from None
    own = index.images_of[r]
    if direction == "i2r":
        if len(own) == 0:
            raise ValueError(f"study {query_id!r} has no images to query with")
        q = int(own[0])
        order = ranking(index, "i2r", q)
        k = _clamp_k(k, len(order))
        scores = index.sim[q]
        top = [{"rank": i + 1, "study_id": index.report_ids[j], "similarity": float(scores[j]),
                "report": reports[j]} for i, j in enumerate(order[:k])]
        paired = int(np.flatnonzero(order == r)[0]) + 1
    else:
        order = ranking(index, "r2i", r)
        k = _clamp_k(k, len(order))
        scores = index.sim[:, r]
        top = [{"rank": i + 1, "image_index": int(j),
                "study_id": index.report_ids[index.image_owner[j]],
                "similarity": float(scores[j]), "report": reports[index.image_owner[j]]}
               for i, j in enumerate(order[:k])]
        paired = (int(min(np.flatnonzero(np.isin(order, own)))) + 1) if len(own) else None
        q = r
    return {"direction": direction, "query_id": query_id, "query_index": q,
            "query_report": reports[r], "top": top, "paired_rank": paired}
