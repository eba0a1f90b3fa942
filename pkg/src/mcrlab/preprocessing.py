"""Images to patch sequences, reports to WordPiece ids, reports to sentences."""

from __future__ import annotations

import os
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED_TOKENS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # (N, P*P*C), raster order
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        if self.patches.ndim != 2 or self.patches.shape[0] != self.grid_rows * self.grid_cols:
            raise ValueError(
                f"patches shape {self.patches.shape} inconsistent with grid "
                f"{self.grid_rows}x{self.grid_cols}"
            )

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


def _as_hwc(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ValueError(f"expected an HxWxC image, got shape {image.shape}")
    return image


def patchify(image: np.ndarray, patch_size: int) -> PatchGrid:
    """Cut an HxWxC image into non-overlapping PxP patches.

    Row ``k`` of the result is patch ``(k // cols, k % cols)`` flattened
    in (row, col, channel) order.
    """
    image = _as_hwc(image)
    h, w, c = image.shape
    p = patch_size
    if p <= 0 or h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    rows, cols = h // p, w // p
    x = image.reshape(rows, p, cols, p, c).transpose(0, 2, 1, 3, 4)
    return PatchGrid(x.reshape(rows * cols, p * p * c).copy(), rows, cols)


def unpatchify(grid: PatchGrid, patch_size: int) -> np.ndarray:
    p = patch_size
    n, width = grid.patches.shape
    if p <= 0 or width % (p * p):
        raise ValueError(f"patch width {width} is not a multiple of {p}x{p}")
    c = width // (p * p)
    x = grid.patches.reshape(grid.grid_rows, grid.grid_cols, p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(grid.grid_rows * p, grid.grid_cols * p, c).copy()


def normalize_patch_targets(grid: PatchGrid, eps: float = 1e-6) -> PatchGrid:
    """Per-patch standardisation: ``(x - mean) / sqrt(var + eps)`` per row."""
    x = grid.patches.astype(np.float64)
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return PatchGrid((x - mean) / np.sqrt(var + eps), grid.grid_rows, grid.grid_cols)


# images ---------------------------------------------------------------------

def load_image(path: str | os.PathLike, size: int | None = None, channels: int = 1) -> np.ndarray:
    """Read a PNG (8-bit gray/RGB) or ``.npy`` float image as HxWxC in [0, 1]."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
        arr = _as_hwc(arr)
    else:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = _as_hwc(np.asarray(im, dtype=np.float32) / 255.0)
    if arr.shape[2] != channels:
        raise ValueError(f"{path}: expected {channels} channels, got {arr.shape[2]}")
    return arr


def save_png(image: np.ndarray, path: str | os.PathLike) -> None:
    image = _as_hwc(image)
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(data).save(path, format="PNG", optimize=False)


# vocabulary and WordPiece ----------------------------------------------------

class Vocabulary:
    """Token <-> id bijection. The first five ids are the reserved tokens."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens:
            raise ValueError("empty vocabulary")
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    pad_id = property(lambda self: self.index[PAD])
    unk_id = property(lambda self: self.index[UNK])
    cls_id = property(lambda self: self.index[CLS])
    sep_id = property(lambda self: self.index[SEP])
    mask_id = property(lambda self: self.index[MASK])

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(RESERVED_TOKENS)))

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        words: list[str] = []
        for i in ids:
            if skip_special and i in self.special_ids:
                continue
            tok = self.tokens[i]
            if tok.startswith(CONTINUATION) and words:
                words[-1] += tok[len(CONTINUATION):]
            else:
                words.append(tok)
        return " ".join(words)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def from_words(cls, words: Iterable[str], extra_pieces: Iterable[str] = ()) -> "Vocabulary":
        """Whole words, then the given pieces, then single-character fallbacks."""
        seen: dict[str, None] = dict.fromkeys(RESERVED_TOKENS)
        for w in words:
            for piece in basic_split(w):
                seen.setdefault(piece[0])
        for piece in extra_pieces:
            seen.setdefault(piece)
        for ch in "abcdefghijklmnopqrstuvwxyz0123456789":
            seen.setdefault(ch)
            seen.setdefault(CONTINUATION + ch)
        for ch in ".,;:!?()-/%'":
            seen.setdefault(ch)
        return cls(list(seen))


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    offsets: tuple[tuple[int, int], ...] = field(default=())  # char span per id; (0, 0) for specials
    original_ids: tuple[int, ...] | None = None  # set after masking

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def body_len(self) -> int:
        return len(self.ids) - 2


_PUNCT_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def basic_split(text: str) -> list[tuple[str, int, int]]:
    """Lowercase, strip accents, split on whitespace and punctuation."""
    out = []
    for m in _PUNCT_RE.finditer(text):
        word = unicodedata.normalize("NFD", m.group().lower())
        word = "".join(ch for ch in word if unicodedata.category(ch) != "Mn")
        out.append((word, m.start(), m.end()))
    return out


def _wordpiece(word: str, vocab: Vocabulary, max_chars: int = 100) -> list[tuple[str, int, int]] | None:
    if len(word) > max_chars:
        return None
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            cand = word[start:end]
            if start > 0:
                cand = CONTINUATION + cand
            if cand in vocab:
                match = cand
                break
            end -= 1
        if match is None:
            return None
        pieces.append((match, start, end))
        start = end
    return pieces


def wordpiece_tokenize(text: str, vocab: Vocabulary, max_len: int | None = None) -> TokenSeq:
    """Greedy longest-match-first WordPiece, framed as [CLS] body [SEP].

    A word with no full segmentation becomes a single [UNK]. The body is
    truncated to ``max_len`` tokens; [SEP] is always kept.
    """
    if vocab is None or len(vocab) == 0:
        raise ValueError("empty vocabulary")
    ids = [vocab.cls_id]
    offsets = [(0, 0)]
    for word, ws, we in basic_split(text):
        pieces = _wordpiece(word, vocab)
        if pieces is None:
            ids.append(vocab.unk_id)
            offsets.append((ws, we))
        else:
            for tok, ps, pe in pieces:
                ids.append(vocab.index[tok])
                offsets.append((ws + ps, ws + pe))
    if max_len is not None and len(ids) - 1 > max_len:
        ids, offsets = ids[: max_len + 1], offsets[: max_len + 1]
    ids.append(vocab.sep_id)
    offsets.append((0, 0))
    return TokenSeq(tuple(ids), tuple(offsets))


# sentences ------------------------------------------------------------------

ABBREVIATIONS = frozenset(
    {"dr", "mr", "mrs", "ms", "vs", "e.g", "i.e", "approx", "fig", "st"}
)
_BOUNDARY_RE = re.compile(r"[.!?]+(?=\s+[A-Z]|\s*$)")


def split_sentences(report: str) -> list[str]:
    """Rule-based splitter.

    Breaks after ``.``, ``!`` or ``?`` when followed by whitespace and an
    uppercase letter, or by the end of the text. A period right after a
    word in ``ABBREVIATIONS`` never ends a sentence.
    """
    sentences = []
    start = 0
    for m in _BOUNDARY_RE.finditer(report):
        if m.group().startswith("."):
            before = report[start:m.start()].split()
            if before and before[-1].lower().rstrip(".") in ABBREVIATIONS and m.end() < len(report.rstrip()):
                continue
        piece = report[start:m.end()].strip()
        if piece:
            sentences.append(piece)
        start = m.end()
    tail = report[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences
