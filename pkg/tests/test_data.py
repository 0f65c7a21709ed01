import json

import numpy as np
import pytest

from progen.concepts import build_context, extract_mentions
from progen.data import (
    BOS, EOS, PAD, SPECIAL_TOKENS, UNK, CorpusRecord, TokenSequence, Vocab,
    generate_synthetic, load_annotations, load_checkpoint, save_checkpoint,
    split_records, synth_corpus, synth_example, tokenize,
)
from progen.exceptions import CheckpointError, ContractError, DataError, UnsupportedVersionError


def test_tokenize_splits_punctuation_and_lowercases():
    assert tokenize("No acute disease.") == ["no", "acute", "disease", "."]
    assert tokenize("") == []
    assert tokenize("Heart size: normal, lungs clear; T2 ok.") == [
        "heart", "size", ":", "normal", ",", "lungs", "clear", ";", "t2", "ok", "."]


def test_tokenize_idempotent():
    rng = np.random.default_rng(0)
    alphabet = list("abcXYZ019 .,:;-\t\n")
    for _ in range(300):
        text = "".join(rng.choice(alphabet, size=rng.integers(0, 40)))
        toks = tokenize(text)
        assert tokenize(" ".join(toks)) == toks


def test_vocab_reserved_ids_and_threshold():
    v = Vocab.build([["a"] * 5])
    assert v.to_list() == list(SPECIAL_TOKENS) + ["a"]
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    v = Vocab.build([["a", "a", "a", "b", "b"]], min_freq=3)
    assert v.encode(["a", "b"]) == [4, UNK]


def test_vocab_order_frequency_then_text():
    corpus = [["z", "y", "x"], ["y", "x"], ["x", "w"], ["w", "y"]]
    v = Vocab.build(corpus, min_freq=1)
    assert v.to_list()[4:] == ["x", "y", "w", "z"]


def test_vocab_deterministic_and_roundtrip():
    rng = np.random.default_rng(1)
    corpus = [list(rng.choice(list("abcdefgh"), size=10)) for _ in range(50)]
    a = Vocab.build(corpus, min_freq=2)
    b = Vocab.build(list(corpus), min_freq=2)
    assert a.to_list() == b.to_list()
    toks = [t for t in corpus[0] if t in a]
    assert a.decode(a.encode(toks)) == toks
    assert Vocab.from_list(a.to_list()) == a


def test_vocab_empty_corpus():
    with pytest.raises(ContractError):
        Vocab.build([])


def test_vocab_built_from_train_only_maps_unseen_to_unk():
    train = [tokenize("there is a square .")] * 3
    v = Vocab.build(train, min_freq=3)
    assert v.encode(tokenize("there is a blob ."))[3] == UNK


def test_token_sequence_bounds():
    v = Vocab(["a"])
    seq = TokenSequence([4], v)
    assert seq.framed() == [BOS, 4, EOS]
    assert seq.text == "a"
    with pytest.raises(DataError):
        TokenSequence([5], v)


def _write_annotations(tmp_path, doc):
    (tmp_path / "img.pgm").write_bytes(b"P5\n1 1\n255\n\x00")
    p = tmp_path / "ann.json"
    p.write_text(json.dumps(doc))
    return p


def test_annotations_roundtrip(tmp_path):
    doc = {"train": [{"id": "r1", "image_path": ["img.pgm"], "report": "no findings ."}],
           "val": [], "test": []}
    recs = load_annotations(_write_annotations(tmp_path, doc))
    assert recs == [CorpusRecord("r1", [str(tmp_path / "img.pgm")], "no findings .", "train")]


def test_annotations_missing_report_names_record(tmp_path):
    doc = {"train": [{"id": "r1", "image_path": ["img.pgm"]}], "val": [], "test": []}
    p = _write_annotations(tmp_path, doc)
    with pytest.raises(DataError, match=r"train record 0.*'report'") as info:
        load_annotations(p)
    assert str(p) in str(info.value)


def test_annotations_bad_json(tmp_path):
    p = tmp_path / "ann.json"
    p.write_text("{not json")
    with pytest.raises(DataError, match="ann.json"):
        load_annotations(p)


def test_annotations_r2gen_shape(tmp_path):
    # published shape: per-split lists; records carry id, report, image_path list and split
    (tmp_path / "CXR1_1_IM-0001").mkdir()
    for name in ("0.png", "1.png"):
        (tmp_path / "CXR1_1_IM-0001" / name).write_bytes(b"")
    rec = {"id": "CXR1_1_IM-0001", "report": "The heart is normal in size.",
           "image_path": ["CXR1_1_IM-0001/0.png", "CXR1_1_IM-0001/1.png"], "split": "train"}
    doc = {"train": [rec], "val": [dict(rec, split="val")], "test": [dict(rec, split="test")]}
    p = tmp_path / "annotation.json"
    p.write_text(json.dumps(doc))
    recs = load_annotations(p)
    assert [r.split for r in recs] == ["train", "val", "test"]
    assert len(recs[0].image_paths) == 2
    assert len(split_records(recs, "test")) == 1


def test_synthetic_deterministic():
    a = generate_synthetic(7, 5, 2, 2)
    b = generate_synthetic(7, 5, 2, 2)
    for split in a:
        for ra, rb in zip(a[split], b[split]):
            assert ra["report"] == rb["report"]
            assert ra["image"].tobytes() == rb["image"].tobytes()


def test_synth_corpus_on_disk_bitwise(tmp_path):
    pa = synth_corpus(tmp_path / "a", seed=3, n_train=4, n_val=1, n_test=1)
    pb = synth_corpus(tmp_path / "b", seed=3, n_train=4, n_val=1, n_test=1)
    assert pa.read_bytes() == pb.read_bytes()
    for f in (tmp_path / "a" / "images").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()
    recs = load_annotations(pa)
    assert len(recs) == 6


def test_generator_extractor_consistency():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        _, concepts, report = synth_example(rng)
        got = [(m.label, m.polarity, list(m.attributes)) for m in extract_mentions(report)]
        assert got == [(lab, pol, list(attrs)) for lab, pol, attrs in concepts], report


def test_empty_image_report():
    class NoGlyphs:
        def __init__(self):
            self.rng = np.random.default_rng(0)

        def integers(self, lo, hi):
            return 0

        def __getattr__(self, name):
            return getattr(self.rng, name)

    img, concepts, report = synth_example(NoGlyphs())
    assert report == "no findings ."
    assert concepts == []
    assert build_context(extract_mentions(report)) == ["none"]
    assert img.max() < 0.5


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "s": np.array(2.5)}
    cfg = {"d_model": 8, "name": "x"}
    p = tmp_path / "m.ckpt"
    save_checkpoint(params, cfg, p)
    got, got_cfg = load_checkpoint(p)
    assert got_cfg == cfg
    assert list(got) == list(params)
    for k in params:
        assert got[k].shape == params[k].shape
        assert got[k].tobytes() == params[k].tobytes()


def test_checkpoint_truncated_and_corrupted(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint({"w": np.ones(10)}, {}, p)
    data = p.read_bytes()
    p.write_bytes(data[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    flipped = bytearray(data)
    flipped[40] ^= 1
    p.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(p)


def test_checkpoint_version(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint({"w": np.ones(2)}, {}, p)
    data = bytearray(p.read_bytes())
    data[4] = 99
    p.write_bytes(bytes(data))
    with pytest.raises(UnsupportedVersionError, match="99"):
        load_checkpoint(p)
