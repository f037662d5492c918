import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssankit.data import (
    PAD_ID,
    UNK_ID,
    DataError,
    DatasetRecord,
    SyntheticSpec,
    Vocabulary,
    build_vocabulary,
    detokenize,
    generate_synthetic,
    load_dataset,
    split_words,
    synthetic_caption,
    tokenize,
    write_manifest,
    write_synthetic,
)


def recs(*captions):
    return [DatasetRecord(i, f"img{i}.png", [c]) for i, c in enumerate(captions)]


class TestVocabulary:
    def test_counts_unique_words(self):
        vocab = build_vocabulary(recs("a red shirt", "a red bag"), min_count=1)
        assert len(vocab) == 4
        assert set(vocab.words) == {"a", "red", "shirt", "bag"}

    def test_min_count_threshold(self):
        vocab = build_vocabulary(recs("a red shirt", "a red bag"), min_count=2)
        assert set(vocab.words) == {"a", "red"}
        assert vocab.index("shirt") == UNK_ID
        assert vocab.index("bag") == UNK_ID

    def test_empty_corpus(self):
        with pytest.raises(DataError, match="empty training corpus"):
            build_vocabulary([])

    def test_indices_contiguous_and_clear_of_specials(self):
        vocab = build_vocabulary(recs("one two three", "two four"))
        ids = sorted(vocab.index(w) for w in vocab.words)
        assert ids == list(range(2, 2 + len(vocab)))
        assert PAD_ID not in ids and UNK_ID not in ids

    def test_json_round_trip(self, tmp_path):
        vocab = build_vocabulary(recs("a red shirt"), dim=16)
        vocab.save(tmp_path / "v.json")
        data = json.loads((tmp_path / "v.json").read_text())
        assert data == {"words": ["a", "red", "shirt"], "min_count": 1, "dim": 16}
        again = Vocabulary.load(tmp_path / "v.json")
        assert again.words == vocab.words and again.dim == 16


class TestTokenize:
    vocab = Vocabulary(["a", "red", "shirt"])

    def test_maps_words(self):
        tok = tokenize("A red shirt.", self.vocab, 8)
        assert tok.length == 3
        assert tok.valid_ids.tolist() == [2, 3, 4]
        assert tok.ids[3:].tolist() == [PAD_ID] * 5

    def test_unknown_word(self):
        tok = tokenize("a cerulean shirt", self.vocab, 8)
        assert tok.valid_ids.tolist() == [2, UNK_ID, 4]

    def test_truncation(self):
        tok = tokenize(" ".join(["red"] * 100), self.vocab, 64)
        assert tok.length == 64 and len(tok.ids) == 64

    def test_empty_after_tokenization(self):
        with pytest.raises(DataError, match="empty caption after tokenization"):
            tokenize(" ,.! ", self.vocab, 8)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from(["a", "red", "shirt"]), min_size=1, max_size=12))
    def test_idempotent_round_trip(self, words):
        tok = tokenize(" ".join(words), self.vocab, 12)
        assert tokenize(detokenize(tok, self.vocab), self.vocab, 12) == tok


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(identities=2, images_per_identity=2, test_identities=0, seed=7)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        for ra, rb in zip(a[0] + a[1], b[0] + b[1]):
            assert ra == rb
            assert ra.pixels.tobytes() == rb.pixels.tobytes()

    def test_counts(self):
        train, test = generate_synthetic(SyntheticSpec(identities=40, images_per_identity=4, test_identities=8))
        records = train + test
        assert len(records) == 160
        tuples = {tuple(r.attributes.values()) for r in records}
        assert len(tuples) == 40
        assert {r.identity_id for r in train}.isdisjoint({r.identity_id for r in test})

    def test_templates_reorder_same_attributes(self):
        attrs = {"hat": "red", "shirt": "blue", "pants": "black", "shoes": "white", "bag": "none"}
        first, second = synthetic_caption(attrs, 0, 3), synthetic_caption(attrs, 1, 3)

        def zone_order(text):
            words = split_words(text)
            return [w for w in words if w in ("red", "blue", "black", "white")]

        assert sorted(zone_order(first)) == sorted(zone_order(second))
        assert zone_order(first) != zone_order(second)

    def test_inventory_too_small(self):
        spec = SyntheticSpec(identities=5, colors=("red",), bag_colors=("none",), test_identities=1)
        with pytest.raises(DataError, match="inventory"):
            generate_synthetic(spec)

    def test_image_shape(self):
        train, _ = generate_synthetic(SyntheticSpec(identities=3, images_per_identity=2, test_identities=1))
        assert train[0].pixels.shape == (96, 32, 3) and train[0].pixels.dtype == np.uint8

    def test_target_domain_shifts_palette(self):
        kw = dict(identities=3, images_per_identity=2, test_identities=1, seed=1)
        src, _ = generate_synthetic(SyntheticSpec(**kw))
        tgt, _ = generate_synthetic(SyntheticSpec(domain="target", **kw))
        assert src[0].attributes == tgt[0].attributes
        assert not np.array_equal(src[0].pixels, tgt[0].pixels)


class TestManifest:
    def test_round_trip(self, tmp_path):
        spec = SyntheticSpec(identities=4, images_per_identity=2, test_identities=1, seed=2)
        train, test = generate_synthetic(spec)
        manifest = write_synthetic(spec, tmp_path)
        got_train, got_val, got_test = load_dataset(manifest, load_pixels=True)
        assert got_val == []
        for orig, got in zip(train + test, got_train + got_test):
            assert (orig.identity_id, orig.captions, orig.attributes) == (got.identity_id, got.captions, got.attributes)
            assert np.array_equal(orig.pixels, got.pixels)

    def test_leakage_rejected(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"")
        lines = [{"id": 5, "image": "x.png", "captions": ["a"], "split": "train"},
                 {"id": 5, "image": "x.png", "captions": ["b"], "split": "test"}]
        (tmp_path / "m.jsonl").write_text("\n".join(json.dumps(x) for x in lines))
        with pytest.raises(DataError, match="identity 5"):
            load_dataset(tmp_path / "m.jsonl")

    def test_missing_image(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(json.dumps({"id": 1, "image": "gone.png", "captions": ["a"], "split": "train"}))
        with pytest.raises(DataError, match="missing image"):
            load_dataset(tmp_path / "m.jsonl")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope.jsonl")

    def test_unknown_split(self, tmp_path):
        with pytest.raises(DataError):
            write_manifest(tmp_path / "m.jsonl", {"dev": []})

    def test_record_needs_caption(self):
        with pytest.raises(DataError):
            DatasetRecord(0, "a.png", [])

    def test_rewrite_is_byte_identical(self, tmp_path):
        spec = SyntheticSpec(identities=3, images_per_identity=2, test_identities=1, seed=9)

        def digest(root):
            h = hashlib.sha256()
            for p in sorted(root.rglob("*")):
                if p.is_file():
                    h.update(str(p.relative_to(root)).encode() + p.read_bytes())
            return h.hexdigest()

        write_synthetic(spec, tmp_path / "a")
        write_synthetic(spec, tmp_path / "b")
        assert digest(tmp_path / "a") == digest(tmp_path / "b")
