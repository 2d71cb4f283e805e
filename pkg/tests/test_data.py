import json
import warnings

import numpy as np
import pytest

from advcap.data import (PAD_ID, UNK, UNK_ID, Caption, ToyWorldConfig, Vocabulary, build_vocabulary,
                         generate_toy_dataset, load_caption_records, load_coco_captions, load_dataset,
                         save_dataset, tokenize)
from advcap.data.corpus import group_by_image
from advcap.data.toyworld import grammar_words
from advcap.data.vocab import RESERVED
from advcap.errors import ConfigError, ContractError, DataError, IntegrityError, SchemaError
from advcap.metrics import div_n


def test_tokenize():
    assert tokenize("A Dog runs on the Beach.") == ["a", "dog", "runs", "on", "the", "beach"]
    assert tokenize("  two  cats!! ") == ["two", "cats"]
    assert tokenize("") == []


def test_build_vocabulary_min_count():
    corpus = [["a", "b", "a"], ["a"]]
    vocab = build_vocabulary(corpus, min_count=2)
    assert vocab.tokens == list(RESERVED) + ["a"]
    assert vocab.encode("b a").tokens == (UNK_ID, vocab.id("a"))
    full = build_vocabulary(corpus, min_count=1)
    assert UNK_ID not in full.encode("a b").tokens


def test_build_vocabulary_order_and_errors():
    vocab = build_vocabulary([["c", "b", "b", "a", "a"]], object_words=["z"])
    assert vocab.tokens[4:] == ["a", "b", "c", "z"]
    assert vocab.object_ids == [vocab.id("z")]
    assert build_vocabulary([["c", "b", "b", "a", "a"]]).tokens == build_vocabulary(
        [["c", "b", "b", "a", "a"]]).tokens
    with pytest.raises(ContractError):
        build_vocabulary([])
    with pytest.raises(ContractError):
        build_vocabulary([["a"]], min_count=0)


def test_vocabulary_invariants(tmp_path):
    with pytest.raises(ConfigError):
        Vocabulary(["a"] + list(RESERVED))
    with pytest.raises(ConfigError):
        Vocabulary(list(RESERVED) + ["a", "a"])
    with pytest.raises(ConfigError):
        Vocabulary(list(RESERVED) + ["a"], object_words=["dog"])
    vocab = Vocabulary(list(RESERVED) + ["a", "dog"], object_words=["dog"])
    vocab.save(tmp_path / "v.txt")
    again = Vocabulary.load(tmp_path / "v.txt", ["dog"])
    assert again.tokens == vocab.tokens and again.hash() == vocab.hash()
    with pytest.raises(DataError):
        vocab.decode([99])


def test_caption_round_trip(small_dataset):
    vocab = small_dataset.vocab
    for item in small_dataset.test.items:
        for ref in item.references:
            cap = vocab.encode(ref)
            assert vocab.encode(vocab.decode(cap)) == cap


def test_truncation_flag():
    vocab = Vocabulary(list(RESERVED) + ["a"])
    cap = vocab.encode("a a a a", max_words=2)
    assert cap == Caption((4, 4), truncated=True)


def test_dataset_structure(small_dataset):
    ids = [it.image_id for s in small_dataset.splits.values() for it in s.items]
    assert len(ids) == len(set(ids))
    for split in small_dataset.splits.values():
        for it in split.items:
            assert len(it.references) == small_dataset.config.k
            assert it.x_c.shape == (small_dataset.image_dim,)
            assert np.count_nonzero(it.x_o) == 1 and 0.7 <= it.x_o.max() <= 1.0
            for ref in it.references:
                assert all(w in small_dataset.vocab for w in tokenize(ref))


def test_every_grammar_word_in_vocabulary(small_dataset):
    assert all(w in small_dataset.vocab for w in grammar_words(small_dataset.config))


def test_degenerate_grammar_gives_identical_references():
    ds = generate_toy_dataset(ToyWorldConfig(use_synonyms=False, n_train=20, n_val=5, n_test=5), seed=0)
    for it in ds.train.items:
        assert len(set(it.references)) == 1


def test_same_seed_same_dataset_on_disk(tmp_path):
    cfg = ToyWorldConfig(n_train=30, n_val=10, n_test=10)
    a = save_dataset(generate_toy_dataset(cfg, seed=5), tmp_path / "a")
    b = save_dataset(generate_toy_dataset(cfg, seed=5), tmp_path / "b")
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = save_dataset(generate_toy_dataset(cfg, seed=6), tmp_path / "c")
    assert (a / "train.jsonl").read_bytes() != (c / "train.jsonl").read_bytes()


def test_save_load_round_trip_and_integrity(tmp_path, small_dataset):
    out = save_dataset(small_dataset, tmp_path / "ds")
    back = load_dataset(out)
    assert back.vocab.tokens == small_dataset.vocab.tokens
    for tag in ("train", "val", "test"):
        a, b = small_dataset.splits[tag], back.splits[tag]
        assert [it.references for it in a.items] == [it.references for it in b.items]
        np.testing.assert_array_equal(a.features()[0], b.features()[0])
    (out / "val.jsonl").write_text((out / "val.jsonl").read_text() + "\n")
    with pytest.raises(IntegrityError):
        load_dataset(out)


def test_split_overlap_detected(tmp_path, small_dataset):
    import hashlib

    out = save_dataset(small_dataset, tmp_path / "ds")
    lines = (out / "test.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    rec["image_id"] = small_dataset.train.items[0].image_id
    lines[0] = json.dumps(rec, sort_keys=True)
    (out / "test.jsonl").write_text("\n".join(lines) + "\n")
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["files"]["test.jsonl"] = hashlib.sha256((out / "test.jsonl").read_bytes()).hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError, match="more than one split"):
        load_dataset(out)


def test_invalid_grammar_names_production():
    cfg = ToyWorldConfig(templates=["{det} {object} {mood}"])
    with pytest.raises(ConfigError, match="mood"):
        cfg.validate()
    attrs = ToyWorldConfig().attributes
    attrs["color"]["red"] = ["red", ""]
    with pytest.raises(ConfigError, match="color"):
        ToyWorldConfig(attributes=attrs).validate()


def test_default_references_are_diverse():
    ds = generate_toy_dataset(ToyWorldConfig(n_train=200, n_val=10, n_test=100), seed=0)
    sets = [[tokenize(r) for r in it.references] for it in ds.test.items]
    assert np.mean([div_n(s, 2) for s in sets]) > 0.5


# COCO-format ingestion

def _coco(tmp_path, doc):
    path = tmp_path / "captions.json"
    path.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return path


def test_coco_minimal(tmp_path):
    path = _coco(tmp_path, {"images": [{"id": 1}], "annotations": [{"image_id": 1, "id": 7, "caption": "A dog."}]})
    assert load_coco_captions(path) == {1: [["a", "dog"]]}


def test_coco_unknown_image_warns_and_keeps(tmp_path):
    path = _coco(tmp_path, {"images": [{"id": 1}], "annotations": [{"image_id": 2, "id": 7, "caption": "x"}]})
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        corpus = load_coco_captions(path)
    assert corpus == {2: [["x"]]}
    assert any("image id 2" in str(w.message) for w in caught)


def test_coco_missing_key_names_it(tmp_path):
    path = _coco(tmp_path, {"images": [{"id": 1}], "annotations": [{"image_id": 1, "id": 7}]})
    with pytest.raises(SchemaError, match="caption"):
        load_coco_captions(path)
    with pytest.raises(SchemaError, match="images"):
        load_coco_captions(_coco(tmp_path, {"annotations": []}))


def test_coco_truncated_reports_byte_offset(tmp_path):
    path = _coco(tmp_path, '{"images": [{"id": 1}], "annotations": [{"image_id": 1, ')
    with pytest.raises(DataError, match="byte offset"):
        load_coco_captions(path)


def test_coco_with_vocabulary_maps_unk(tmp_path):
    path = _coco(tmp_path, {"images": [{"id": 1}], "annotations": [{"image_id": 1, "id": 7, "caption": "a zebra"}]})
    vocab = Vocabulary(list(RESERVED) + ["a"])
    assert load_coco_captions(path, vocab) == {1: [["a", UNK]]}


def test_caption_records_jsonl_and_grouping(tmp_path):
    path = tmp_path / "gen.jsonl"
    rows = [{"image_id": 1, "rank": 2, "caption": "b"}, {"image_id": 1, "rank": 1, "caption": "a"},
            {"image_id": 2, "rank": 1, "caption": "c"}]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert group_by_image(load_caption_records(path)) == {1: ["a", "b"], 2: ["c"]}
    path.write_text('{"image_id": 1, "caption": "a"}\n{"image_id": 2\n')
    with pytest.raises(DataError, match="byte offset"):
        load_caption_records(path)


def test_pad_id_reserved_first():
    assert PAD_ID == 0 and RESERVED[0] == "<pad>"
