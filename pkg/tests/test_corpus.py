import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from tgcap.corpus import (BOS, EOS, UNK, DatasetRecord, FeatureGrid, FormatError, SynthVocab,
                          Vocabulary, build_vocab, encode_caption, load_dataset, load_embeddings,
                          load_feature_grid, save_dataset, save_embeddings, save_feature_grid,
                          synth_dataset)
from tgcap.guidance import global_feature


def record(image_id, refs, split="train", R=1, P=1):
    return DatasetRecord(image_id, FeatureGrid(image_id, np.zeros((R, R, P), np.float32)),
                         [tuple(r.split()) for r in refs], split)


# -- vocabulary -------------------------------------------------------------------------

def test_threshold_is_strict():
    recs = [record(f"i{j}", ["six"] * 6 + ["five"] * 5) for j in range(1)]
    vocab = build_vocab(recs, 5)
    assert "six" in vocab.word_to_id
    assert "five" not in vocab.word_to_id


def test_reserved_ids_fixed():
    vocab = build_vocab([record("a", ["x y"])], 0)
    assert vocab.id_to_word[:3] == ("<bos>", "<eos>", "<unk>")
    assert (BOS, EOS, UNK) == (0, 1, 2)


def test_empty_training_split_rejected():
    with pytest.raises(ValueError):
        build_vocab([record("a", ["x"], split="test")], 0)


def test_vocab_only_uses_training_split():
    vocab = build_vocab([record("a", ["x"]), record("b", ["y"], split="test")], 0)
    assert "y" not in vocab.word_to_id


def test_id_order_frequency_then_lexicographic():
    vocab = build_vocab([record("a", ["b a c c", "a b"])], 0)
    # counts: a=2, b=2, c=2, so lexicographic
    assert vocab.id_to_word[3:] == ("a", "b", "c")
    vocab = build_vocab([record("a", ["z z z y y x"])], 0)
    assert vocab.id_to_word[3:] == ("z", "y", "x")


def test_vocab_deterministic_and_bijective():
    recs = synth_dataset(3, 20)
    a, b = build_vocab(recs, 2), build_vocab(recs, 2)
    assert a.id_to_word == b.id_to_word
    assert all(a.id_to_word[i] == w for w, i in a.word_to_id.items())
    assert Vocabulary.from_json(a.to_json()).id_to_word == a.id_to_word


def test_encode_examples():
    vocab = build_vocab([record("a", ["a man"])], 0)
    assert encode_caption(("a", "man"), vocab) == [BOS, vocab.word_to_id["a"], vocab.word_to_id["man"], EOS]
    assert encode_caption(("zzz",), vocab) == [BOS, UNK, EOS]
    assert encode_caption((), vocab) == [BOS, EOS]


@given(st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=8))
@settings(max_examples=100)
def test_encode_decode_round_trip(words):
    vocab = build_vocab([record("x", ["a b c d"])], 0)
    ids = vocab.encode(tuple(words))
    assert len(ids) == len(words) + 2
    assert vocab.decode(ids) == tuple(words)


# -- feature grids and embeddings --------------------------------------------------------

@given(R=st.integers(1, 4), P=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_feature_grid_round_trip_bit_exact(tmp_path_factory, R, P, seed):
    grid = np.random.default_rng(seed).standard_normal((R, R, P)).astype(np.float32)
    path = tmp_path_factory.mktemp("g") / "x.tgaf"
    save_feature_grid(path, FeatureGrid("x", grid))
    back = load_feature_grid(path)
    assert back.grid.tobytes() == grid.tobytes()
    save_feature_grid(path.with_suffix(".b"), back)
    assert path.read_bytes() == path.with_suffix(".b").read_bytes()


def test_feature_grid_header_layout(tmp_path):
    grid = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
    save_feature_grid(tmp_path / "g.tgaf", FeatureGrid("g", grid))
    raw = (tmp_path / "g.tgaf").read_bytes()
    assert raw[:4] == b"TGAF"
    assert struct.unpack_from("<HII", raw, 4) == (1, 2, 3)
    assert np.frombuffer(raw[14:], "<f4").tolist() == list(range(12))


def test_short_payload_rejected(tmp_path):
    path = tmp_path / "g.tgaf"
    path.write_bytes(b"TGAF" + struct.pack("<HII", 1, 10, 4) + b"\0" * 16)
    with pytest.raises(FormatError):
        load_feature_grid(path)


def test_bad_magic_and_nonfinite_rejected(tmp_path):
    path = tmp_path / "g.tgaf"
    path.write_bytes(b"XXXX" + struct.pack("<HII", 1, 1, 1) + struct.pack("<f", 1.0))
    with pytest.raises(FormatError):
        load_feature_grid(path)
    path.write_bytes(b"TGAF" + struct.pack("<HII", 1, 1, 1) + struct.pack("<f", float("nan")))
    with pytest.raises(FormatError):
        load_feature_grid(path)
    with pytest.raises(ValueError):
        FeatureGrid("x", np.full((1, 1, 1), np.inf, np.float32))


def test_full_size_grid_accepted(tmp_path):
    grid = np.zeros((10, 10, 512), np.float32)
    save_feature_grid(tmp_path / "g.tgaf", FeatureGrid("g", grid))
    assert load_feature_grid(tmp_path / "g.tgaf").grid.shape == (10, 10, 512)


def test_embeddings_round_trip(tmp_path):
    vecs = np.random.default_rng(0).standard_normal((7, 5)).astype(np.float32)
    save_embeddings(tmp_path / "e.tgas", vecs)
    raw = (tmp_path / "e.tgas").read_bytes()
    assert raw[:4] == b"TGAS" and struct.unpack_from("<HII", raw, 4) == (1, 7, 5)
    assert load_embeddings(tmp_path / "e.tgas").astype(np.float32).tobytes() == vecs.tobytes()


# -- dataset files ---------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    recs = synth_dataset(1, 6, splits={"test": 2})
    save_dataset(tmp_path, recs)
    lines = (tmp_path / "captions.jsonl").read_text().splitlines()
    row = json.loads(lines[0])
    assert set(row) >= {"image_id", "split", "captions"}
    back = load_dataset(tmp_path)
    assert [r.image_id for r in back] == [r.image_id for r in recs]
    assert [r.references for r in back] == [r.references for r in recs]
    assert [r.split for r in back] == [r.split for r in recs]
    assert all(a.feature.grid.tobytes() == b.feature.grid.tobytes() for a, b in zip(back, recs))


def test_record_requires_nonempty_references():
    with pytest.raises(ValueError):
        DatasetRecord("x", FeatureGrid("x", np.zeros((1, 1, 1), np.float32)), [])


# -- synthetic generator ---------------------------------------------------------------

def test_synth_is_deterministic():
    a, b = synth_dataset(5, 12), synth_dataset(5, 12)
    assert [r.references for r in a] == [r.references for r in b]
    assert all(x.feature.grid.tobytes() == y.feature.grid.tobytes() for x, y in zip(a, b))


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_synth_object_counts_and_captions(seed):
    spec = SynthVocab()
    for rec in synth_dataset(seed, 4, spec):
        objs = rec.meta["objects"]
        assert spec.min_objects <= len(objs) <= spec.max_objects
        for cap in rec.references:
            for o in objs:
                assert o["name"] in cap


def test_synth_vocab_size_is_small():
    recs = synth_dataset(0, 200)
    vocab = build_vocab(recs, 5)
    assert 40 <= len(vocab) <= 70


def test_identical_planted_sets_are_nearest_neighbours():
    spec = SynthVocab(min_objects=1, max_objects=1, color_prob=1.0)
    recs = synth_dataset(11, 120, spec, P=32)
    key = lambda r: (r.meta["scene"], tuple(sorted(o["name"] for o in r.meta["objects"])))
    vecs = [global_feature(r.feature).vector.tolist() for r in recs]
    ids = [r.image_id for r in recs]
    checked = 0
    for i, r in enumerate(recs):
        twins = [j for j, s in enumerate(recs) if j != i and key(s) == key(r)]
        if not twins:
            continue
        others = [j for j in range(len(recs)) if j != i]
        top = oracles.nearest(vecs[i], [vecs[j] for j in others], [ids[j] for j in others], 1)
        assert key(recs[ids.index(top[0])]) == key(r)
        checked += 1
    assert checked > 0
