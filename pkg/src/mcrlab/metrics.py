"""Caption-style text similarity: BLEU-4, ROUGE-L and CIDEr.

All metrics share one tokenizer: lowercase, then split into word runs and
single punctuation marks.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from typing import Iterable, Sequence

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_refs(references: str | Iterable[str]) -> list[str]:
    return [references] if isinstance(references, str) else list(references)


def bleu4(candidate: str, references: str | Iterable[str], smoothing: bool = False) -> float:
    """Sentence BLEU with uniform 1..4-gram weights and closest-length brevity penalty.

    Any zero n-gram precision gives 0 unless ``smoothing`` is set, in which
    case 2..4-gram precisions use add-one counts.
    """
    refs = [tokenize(r) for r in _as_refs(references)]
    if not refs:
        raise ValueError("bleu4 needs at least one reference")
    cand = tokenize(candidate)
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        counts = ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= ngrams(r, n)
        hits = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = max(len(cand) - n + 1, 0)
        if smoothing and n > 1:
            hits, total = hits + 1, total + 1
        if hits == 0 or total == 0:
            return 0.0
        log_p += math.log(hits / total) / 4
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, references: str | Iterable[str], beta: float = 1.2) -> float:
    """LCS F-measure. With several references the best precision and best
    recall are combined, as in the COCO caption toolkit."""
    refs = [tokenize(r) for r in _as_refs(references)]
    cand = tokenize(candidate)
    if not cand or not refs:
        return 0.0
    precs, recs = [], []
    for r in refs:
        lcs = lcs_length(cand, r)
        precs.append(lcs / len(cand))
        recs.append(lcs / len(r) if r else 0.0)
    p, rec = max(precs), max(recs)
    if p == 0 or rec == 0:
        return 0.0
    return (1 + beta**2) * p * rec / (rec + beta**2 * p)


class CiderStats:
    """Document frequencies of n-grams over a corpus of reference sets."""

    def __init__(self, reference_sets: Iterable[str | Iterable[str]], n: int = 4):
        self.n = n
        self.df: Counter = Counter()
        count = 0
        for refs in reference_sets:
            count += 1
            seen = set()
            for r in _as_refs(refs):
                toks = tokenize(r)
                for k in range(1, n + 1):
                    seen.update(ngrams(toks, k))
            self.df.update(seen)
        if count == 0:
            raise ValueError("CIDEr statistics need a non-empty corpus")
        self.log_docs = math.log(count)

    def vector(self, tokens: Sequence[str]) -> list[dict]:
        vecs = []
        for k in range(1, self.n + 1):
            vecs.append({g: tf * (self.log_docs - math.log(max(1.0, self.df[g])))
                         for g, tf in ngrams(tokens, k).items()})
        return vecs


def cider(candidate: str, references: str | Iterable[str], stats: CiderStats,
          sigma: float = 6.0) -> float:
    """10 x mean over n of the length-penalised TF-IDF cosine, averaged over references."""
    refs = [tokenize(r) for r in _as_refs(references)]
    if not refs:
        raise ValueError("cider needs at least one reference")
    cand = tokenize(candidate)
    cvec = stats.vector(cand)
    total = 0.0
    for r in refs:
        rvec = stats.vector(r)
        penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma**2))
        per_n = 0.0
        for cv, rv in zip(cvec, rvec):
            dot = sum(w * rv.get(g, 0.0) for g, w in cv.items())
            nc = math.sqrt(sum(w * w for w in cv.values()))
            nr = math.sqrt(sum(w * w for w in rv.values()))
            if nc > 0 and nr > 0:
                per_n += penalty * dot / (nc * nr)
        total += per_n / stats.n
    return 10.0 * total / len(refs)
