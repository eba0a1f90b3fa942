"""Paired image-report studies: a synthetic generator and a JSONL manifest loader.

The synthetic corpus is a toy stand-in for chest radiographs. A catalog of
findings lives on a grid of image cells; each finding draws a glyph
(disc or band, faint or dense) in its cell and contributes one templated
sentence to the report. Normal-finding filler sentences follow the
finding sentences.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .preprocessing import Vocabulary, load_image, save_png


class DataError(ValueError):
    """Malformed or missing corpus input."""


@dataclass
class StudyPair:
    study_id: str
    images: list[np.ndarray]  # each HxWxC float in [0, 1]
    report: str
    findings: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.images:
            raise DataError(f"study {self.study_id}: needs at least one image")


ROW_WORDS = ("apical", "upper", "lower", "basal")
COL_WORDS = (("right", "lateral"), ("right", "medial"), ("left", "medial"), ("left", "lateral"))
SHAPE_WORDS = ("nodule", "band")
INTENSITY_WORDS = ("faint", "dense")
INTENSITY_VALUES = (0.35, 0.7)

FILLERS = (
    "The heart size is normal.",
    "No pneumothorax is seen.",
    "The mediastinal contour is unremarkable.",
    "No pleural effusion.",
    "Osseous structures are intact.",
    "The trachea is midline.",
    "No acute osseous abnormality.",
    "Pulmonary vasculature is normal.",
    "Hila are unremarkable.",
    "No free air below the diaphragm.",
    "Soft tissues are unremarkable.",
    "Degenerative changes of the spine.",
)


@dataclass(frozen=True)
class Finding:
    index: int
    row: int
    col: int
    shape: int  # 0 disc, 1 band
    intensity: int  # 0 faint, 1 dense

    @property
    def location(self) -> str:
        side, depth = COL_WORDS[self.col % len(COL_WORDS)]
        return f"{side} {depth} {ROW_WORDS[self.row % len(ROW_WORDS)]}"

    def sentence(self, variant: int) -> str:
        shape, level = SHAPE_WORDS[self.shape], INTENSITY_WORDS[self.intensity]
        if variant == 0:
            return f"{level.capitalize()} {shape} in {self.location} zone."
        loc = self.location
        return f"{loc[0].upper()}{loc[1:]} {shape}, {level}."


def default_catalog(grid: int = 4) -> list[Finding]:
    """One finding per cell; shape and intensity alternate in a 2x2 pattern."""
    if not 1 <= grid <= 4:
        raise ValueError("catalog grid must be between 1 and 4")
    return [Finding(r * grid + c, r, c, (r + c) % 2, (r // 2 + c // 2 + r) % 2)
            for r in range(grid) for c in range(grid)]


@dataclass
class SyntheticSpec:
    n_studies: int = 2200
    image_size: int = 64
    channels: int = 1
    grid: int = 4
    findings_per_study: tuple[int, int] = (1, 3)
    views_per_study: tuple[int, int] = (1, 2)
    filler_sentences: tuple[int, int] = (0, 9)
    noise: float = 0.05
    seed: int = 0
    catalog: list[Finding] = field(default_factory=list)

    def __post_init__(self):
        if not self.catalog:
            self.catalog = default_catalog(self.grid)

    def validate(self) -> None:
        if not self.catalog:
            raise ValueError("findings catalog is empty")
        if self.n_studies < 0:
            raise ValueError("n_studies must be >= 0")
        lo, hi = self.findings_per_study
        if not 1 <= lo <= hi <= len(self.catalog):
            raise ValueError(f"findings_per_study {self.findings_per_study} impossible for "
                             f"a catalog of {len(self.catalog)}")
        lo, hi = self.views_per_study
        if not 1 <= lo <= hi:
            raise ValueError(f"views_per_study {self.views_per_study} impossible")
        lo, hi = self.filler_sentences
        if not 0 <= lo <= hi <= len(FILLERS):
            raise ValueError(f"filler_sentences {self.filler_sentences} impossible")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.image_size % self.grid:
            raise ValueError("image_size must be divisible by the catalog grid")


def _render(spec: SyntheticSpec, findings: Sequence[Finding], rng: np.random.Generator,
            n_views: int) -> list[np.ndarray]:
    s = spec.image_size
    cell = s // spec.grid
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float32)
    noisy = spec.noise > 0
    # background: soft vertical gradient and two darker lung fields
    base = 0.12 + 0.06 * yy / s
    lungs = np.exp(-(((xx - 0.3 * s) / (0.16 * s)) ** 2 + ((yy - 0.5 * s) / (0.3 * s)) ** 2))
    lungs += np.exp(-(((xx - 0.7 * s) / (0.16 * s)) ** 2 + ((yy - 0.5 * s) / (0.3 * s)) ** 2))
    canvas = base - 0.05 * lungs
    if noisy:
        canvas = canvas + rng.uniform(-0.03, 0.03)
    for f in findings:
        jy, jx = (rng.integers(-1, 2, size=2) if noisy else (0, 0))
        cy, cx = f.row * cell + cell / 2 - 0.5 + jy, f.col * cell + cell / 2 - 0.5 + jx
        if f.shape == 0:
            glyph = ((yy - cy) ** 2 + (xx - cx) ** 2) <= (cell * 0.28) ** 2
        else:
            glyph = (np.abs(yy - cy) <= cell * 0.12) & (np.abs(xx - cx) <= cell * 0.38)
        canvas = canvas + INTENSITY_VALUES[f.intensity] * glyph
    views = []
    for v in range(n_views):
        img = canvas
        if noisy and v > 0:
            # deterministic per-view transform: 1px shift and a contrast change
            img = np.roll(img, shift=(v % 2, (v + 1) % 2), axis=(0, 1)) * (1.0 - 0.08 * v)
        if noisy:
            img = img + rng.normal(0.0, spec.noise, size=img.shape)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        views.append(np.repeat(img[:, :, None], spec.channels, axis=2))
    return views


def generate_corpus(spec: SyntheticSpec) -> list[StudyPair]:
    """Draw ``spec.n_studies`` studies; study ``i`` uses the stream (seed, i)."""
    spec.validate()
    pairs = []
    width = max(4, len(str(max(spec.n_studies - 1, 0))))
    for i in range(spec.n_studies):
        rng = np.random.Generator(np.random.PCG64([spec.seed, i]))
        k = int(rng.integers(spec.findings_per_study[0], spec.findings_per_study[1] + 1))
        chosen = sorted(rng.choice(len(spec.catalog), size=k, replace=False).tolist())
        findings = [spec.catalog[j] for j in chosen]
        order = rng.permutation(k)
        sentences = [findings[j].sentence(int(rng.integers(2))) for j in order]
        n_fill = int(rng.integers(spec.filler_sentences[0], spec.filler_sentences[1] + 1))
        sentences += [FILLERS[j] for j in rng.choice(len(FILLERS), size=n_fill, replace=False)]
        n_views = int(rng.integers(spec.views_per_study[0], spec.views_per_study[1] + 1))
        images = _render(spec, findings, rng, n_views)
        pairs.append(StudyPair(f"s{i:0{width}d}", images, " ".join(sentences),
                               tuple(f.index for f in findings)))
    return pairs


_TEMPLATE_A = re.compile(r"^(Faint|Dense) (nodule|band) in (right|left) (lateral|medial) "
                         r"(apical|upper|lower|basal) zone\.$")
_TEMPLATE_B = re.compile(r"^(Right|Left) (lateral|medial) (apical|upper|lower|basal) "
                         r"(nodule|band), (faint|dense)\.$")


def parse_findings(report: str, catalog: Sequence[Finding]) -> set[int]:
    """Recover finding indices from templated sentences (fillers are ignored)."""
    from .preprocessing import split_sentences

    by_words = {}
    for f in catalog:
        side, depth = COL_WORDS[f.col]
        by_words[(side, depth, ROW_WORDS[f.row], SHAPE_WORDS[f.shape],
                  INTENSITY_WORDS[f.intensity])] = f.index
    found = set()
    for sent in split_sentences(report):
        if m := _TEMPLATE_A.match(sent):
            lvl, shape, side, depth, row = (g.lower() for g in m.groups())
        elif m := _TEMPLATE_B.match(sent):
            side, depth, row, shape, lvl = (g.lower() for g in m.groups())
        else:
            continue
        key = (side, depth, row, shape, lvl)
        if key not in by_words:
            raise DataError(f"sentence {sent!r} names no catalog finding")
        found.add(by_words[key])
    return found


def build_vocabulary() -> Vocabulary:
    """Vocabulary covering every word the synthetic templates can emit."""
    words = list(ROW_WORDS) + [w for pair in COL_WORDS for w in pair]
    words += list(SHAPE_WORDS) + list(INTENSITY_WORDS) + ["in", "zone"]
    for sent in FILLERS:
        words += sent.split()
    pieces = ["##s", "##al", "##ly", "##ed", "##ing", "##ity", "##ic", "##ar", "##ous"]
    return Vocabulary.from_words(words, pieces)


# manifest I/O ---------------------------------------------------------------

def write_corpus(pairs: Sequence[StudyPair], outdir: str | os.PathLike) -> Path:
    """Write PNG views, ``manifest.jsonl`` and ``findings.jsonl``; return the manifest path."""
    out = Path(outdir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as mf, \
            open(out / "findings.jsonl", "w", encoding="utf-8") as ff:
        for p in pairs:
            paths = []
            for v, img in enumerate(p.images):
                rel = f"images/{p.study_id}_v{v}.png"
                save_png(img, out / rel)
                paths.append(rel)
            mf.write(json.dumps({"study_id": p.study_id, "report": p.report,
                                 "image_paths": paths}) + "\n")
            ff.write(json.dumps({"study_id": p.study_id,
                                 "findings": list(p.findings or ())}) + "\n")
    return manifest


def load_manifest(path: str | os.PathLike, image_size: int | None = None,
                  channels: int = 1, min_words: int = 3) -> list[StudyPair]:
    """Read a JSONL manifest; image paths resolve relative to the manifest.

    Rows whose report has fewer than ``min_words`` words are dropped.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    findings: dict[str, tuple[int, ...]] = {}
    fpath = path.parent / "findings.jsonl"
    if fpath.exists():
        for line in fpath.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                findings[rec["study_id"]] = tuple(rec["findings"])
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            sid, report, image_paths = str(row["study_id"]), row["report"], row["image_paths"]
            if not isinstance(report, str) or not isinstance(image_paths, list):
                raise TypeError("report must be a string and image_paths a list")
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed row {lineno}: {exc}") from None
        if len(report.split()) < min_words:
            continue
        if not image_paths:
            raise DataError(f"{path}: row {lineno} has no images")
        images = []
        for rel in image_paths:
            ip = Path(rel) if Path(rel).is_absolute() else path.parent / rel
            if not ip.exists():
                raise DataError(f"{path}: row {lineno}: missing image {ip}")
            images.append(load_image(ip, image_size, channels))
        pairs.append(StudyPair(sid, images, report, findings.get(sid)))
    return pairs


def split_dataset(pairs: Sequence, fractions: Sequence[float], seed: int = 0):
    """Seeded disjoint (train, val, test) split; sizes are rounded, test takes the rest."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions {tuple(fractions)} must be three non-negative values summing to 1")
    n = len(pairs)
    n_train = round(fractions[0] * n)
    n_val = min(round(fractions[1] * n), n - n_train)
    order = np.random.Generator(np.random.PCG64([seed, 7])).permutation(n)
    take = lambda idx: [pairs[i] for i in sorted(idx)]  # noqa: E731
    return (take(order[:n_train]), take(order[n_train:n_train + n_val]),
            take(order[n_train + n_val:]))
