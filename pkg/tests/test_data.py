import json

import numpy as np
import pytest

from mcrlab.data import (DataError, SyntheticSpec, build_vocabulary, default_catalog,
                         generate_corpus, load_manifest, parse_findings, split_dataset,
                         write_corpus)
from mcrlab.preprocessing import split_sentences, wordpiece_tokenize


class TestGenerator:
    def test_deterministic(self):
        spec = SyntheticSpec(n_studies=6, image_size=16, seed=5)
        a, b = generate_corpus(spec), generate_corpus(spec)
        for x, y in zip(a, b):
            assert x.report == y.report
            for u, v in zip(x.images, y.images):
                np.testing.assert_array_equal(u, v)

    def test_ranges_and_shapes(self, small_pairs):
        for p in small_pairs:
            assert 1 <= len(p.findings) <= 3
            assert 1 <= len(p.images) <= 2
            for img in p.images:
                assert img.shape == (16, 16, 1) and img.min() >= 0 and img.max() <= 1
            assert len(split_sentences(p.report)) <= 3 + 9

    def test_findings_parse_back(self, small_pairs):
        catalog = default_catalog()
        for p in small_pairs:
            assert parse_findings(p.report, catalog) == set(p.findings)

    def test_zero_noise_views_identical(self):
        pairs = generate_corpus(SyntheticSpec(n_studies=20, image_size=16, noise=0.0,
                                              views_per_study=(2, 2)))
        for p in pairs:
            np.testing.assert_array_equal(p.images[0], p.images[1])

    def test_noisy_views_differ(self):
        pairs = generate_corpus(SyntheticSpec(n_studies=5, image_size=16, views_per_study=(2, 2)))
        assert all(not np.array_equal(p.images[0], p.images[1]) for p in pairs)

    def test_finding_changes_its_cell(self):
        base = SyntheticSpec(n_studies=1, image_size=16, noise=0.0, findings_per_study=(1, 1))
        img = generate_corpus(base)[0]
        cell = default_catalog()[img.findings[0]]
        diff = img.images[0][:, :, 0] - generate_corpus(
            SyntheticSpec(n_studies=1, image_size=16, noise=0.0, findings_per_study=(1, 1),
                          seed=1))[0].images[0][:, :, 0]
        r, c = cell.row * 4, cell.col * 4
        assert np.abs(diff[r:r + 4, c:c + 4]).max() > 0.2

    @pytest.mark.parametrize("kw", [dict(findings_per_study=(0, 2)), dict(catalog=[]),
                                    dict(findings_per_study=(1, 40)), dict(noise=-1.0)])
    def test_invalid_specs(self, kw):
        spec = SyntheticSpec(n_studies=3, **kw)
        if "catalog" in kw:
            spec.catalog = []
        with pytest.raises(ValueError):
            generate_corpus(spec)

    def test_vocabulary_covers_reports(self, small_pairs):
        vocab = build_vocabulary()
        for p in small_pairs:
            assert vocab.unk_id not in wordpiece_tokenize(p.report, vocab).ids


class TestManifest:
    def test_round_trip(self, tmp_path, small_pairs):
        manifest = write_corpus(small_pairs[:4], tmp_path)
        back = load_manifest(manifest, image_size=16)
        assert [p.study_id for p in back] == [p.study_id for p in small_pairs[:4]]
        assert back[0].findings == small_pairs[0].findings
        np.testing.assert_allclose(back[0].images[0], small_pairs[0].images[0], atol=1 / 255)

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text(json.dumps({"study_id": "a", "report": "x y z", "image_paths": []}) + "\n"
                        + '{"study_id": "b"}\n')
        with pytest.raises(DataError, match="row"):
            load_manifest(path)

    def test_missing_image(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text(json.dumps({"study_id": "a", "report": "one two three",
                                    "image_paths": ["nope.png"]}) + "\n")
        with pytest.raises(DataError, match="row 1"):
            load_manifest(path)

    def test_short_reports_dropped(self, tmp_path, small_pairs):
        manifest = write_corpus(small_pairs[:2], tmp_path)
        rows = manifest.read_text().splitlines()
        first = json.loads(rows[0])
        first["report"] = "Clear."
        manifest.write_text(json.dumps(first) + "\n" + rows[1] + "\n")
        assert [p.study_id for p in load_manifest(manifest)] == [small_pairs[1].study_id]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(tmp_path / "none.jsonl")


class TestSplit:
    def test_disjoint_and_sizes(self):
        items = list(range(100))
        tr, va, te = split_dataset(items, (0.8, 0.1, 0.1), seed=2)
        assert (len(tr), len(va), len(te)) == (80, 10, 10)
        assert set(tr) | set(va) | set(te) == set(items)
        assert not set(tr) & set(te)

    def test_seeded(self):
        assert split_dataset(list(range(50)), (0.5, 0.2, 0.3), 1) == \
            split_dataset(list(range(50)), (0.5, 0.2, 0.3), 1)

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split_dataset([1, 2, 3], (0.5, 0.5, 0.5))
