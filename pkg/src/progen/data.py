"""Tokenisation, vocabularies, corpus files, the synthetic corpus and checkpoints."""

from __future__ import annotations

import hashlib
import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, ContractError, DataError, UnsupportedVersionError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
SPLITS = ("train", "val", "test")

_PUNCT = re.compile(r"([.,:;])")


def tokenize(text):
    """Lowercase, split on whitespace, and split off ``. , : ;`` as tokens."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


def detokenize(tokens):
    return " ".join(tokens)


class Vocab:
    """Token <-> id map with ids 0..3 reserved for PAD, BOS, EOS, UNK."""

    def __init__(self, tokens=(), min_freq=1):
        self.itos = list(SPECIAL_TOKENS)
        self.min_freq = min_freq
        for tok in tokens:
            if tok in SPECIAL_TOKENS:
                continue
            self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ContractError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, corpus, min_freq=3, always=()):
        """Build from an iterable of token lists.

        Tokens seen fewer than ``min_freq`` times are left out (they encode to
        UNK). Ids follow descending frequency, ties broken by token text.
        ``always`` tokens are kept regardless of frequency.
        """
        counts = Counter()
        n = 0
        for toks in corpus:
            counts.update(toks)
            n += 1
        if n == 0:
            raise ContractError("cannot build a vocabulary from an empty corpus")
        keep = [t for t, c in counts.items() if c >= min_freq or t in always]
        keep += [t for t in always if t not in counts]
        keep.sort(key=lambda t: (-counts.get(t, 0), t))
        return cls(keep, min_freq=min_freq)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens):
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids, strip_special=True):
        out = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.itos):
                raise DataError(f"token id {i} outside vocabulary of size {len(self.itos)}")
            if strip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    def to_list(self):
        return list(self.itos)

    @classmethod
    def from_list(cls, itos, min_freq=1):
        if list(itos[:4]) != list(SPECIAL_TOKENS):
            raise DataError("vocabulary does not start with the reserved tokens")
        return cls(itos[4:], min_freq=min_freq)


@dataclass
class TokenSequence:
    ids: list
    vocab: Vocab = field(repr=False)

    def __post_init__(self):
        n = len(self.vocab)
        for i in self.ids:
            if not 0 <= i < n:
                raise DataError(f"token id {i} outside vocabulary of size {n}")

    @classmethod
    def from_text(cls, text, vocab):
        return cls(vocab.encode(tokenize(text)), vocab)

    @property
    def tokens(self):
        return self.vocab.decode(self.ids)

    @property
    def text(self):
        return detokenize(self.tokens)

    def framed(self):
        return [BOS] + list(self.ids) + [EOS]


# ---------------------------------------------------------------- annotations


@dataclass
class CorpusRecord:
    id: str
    image_paths: list
    report: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"record {self.id!r}: unknown split {self.split!r}")


def load_annotations(path, image_dir=None, check_images=True):
    """Read an annotation JSON file with ``train``/``val``/``test`` record lists.

    Each record needs ``id``, ``image_path`` (a list of paths, relative to
    ``image_dir`` or the file's directory) and ``report``. Extra keys are
    ignored.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read annotations: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError(f"{path}: top level must be an object with train/val/test")
    root = Path(image_dir) if image_dir is not None else path.parent
    records = []
    for split in SPLITS:
        if split not in doc:
            raise DataError(f"{path}: missing split {split!r}")
        if not isinstance(doc[split], list):
            raise DataError(f"{path}: split {split!r} must be a list")
        for i, rec in enumerate(doc[split]):
            where = f"{path}: {split} record {i}"
            if not isinstance(rec, dict):
                raise DataError(f"{where}: not an object")
            for key in ("id", "image_path", "report"):
                if key not in rec:
                    raise DataError(f"{where}: missing {key!r}")
            paths = rec["image_path"]
            if isinstance(paths, str):
                paths = [paths]
            if not isinstance(paths, list) or not paths:
                raise DataError(f"{where}: image_path must be a non-empty list")
            resolved = [str(root / p) for p in paths]
            if check_images:
                for p in resolved:
                    if not Path(p).is_file():
                        raise DataError(f"{where}: image not found: {p}")
            if not isinstance(rec["report"], str):
                raise DataError(f"{where}: report must be a string")
            records.append(CorpusRecord(str(rec["id"]), resolved, rec["report"], split))
    return records


def split_records(records, split):
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------- synthetic corpus

GLYPHS = ("square", "cross", "blob")
QUADRANTS = ("upper-left", "upper-right", "lower-left", "lower-right")


def _glyph(kind, cell):
    g = np.zeros((cell, cell))
    lo, hi = 1, cell - 2
    mid = (cell - 1) / 2.0
    if kind == "square":
        g[lo, lo:hi + 1] = g[hi, lo:hi + 1] = 1.0
        g[lo:hi + 1, lo] = g[lo:hi + 1, hi] = 1.0
    elif kind == "cross":
        a, b = int(np.floor(mid)), int(np.ceil(mid))
        g[a:b + 1, lo:hi + 1] = 1.0
        g[lo:hi + 1, a:b + 1] = 1.0
    elif kind == "blob":
        yy, xx = np.mgrid[0:cell, 0:cell]
        g[(yy - mid) ** 2 + (xx - mid) ** 2 <= (cell * 0.35) ** 2] = 1.0
    else:
        raise ValueError(f"unknown glyph {kind!r}")
    return g


def quadrant(row, col, grid):
    half = grid / 2
    return QUADRANTS[(0 if row < half else 2) + (0 if col < half else 1)]


def synth_example(rng, size=32, grid=4, noise=0.03):
    """One synthetic image with its generating concepts and templated report.

    Returns ``(image, concepts, report)`` where ``concepts`` is a list of
    ``(label, polarity, attributes)`` triples in report order.
    """
    if size % grid:
        raise ContractError(f"image size {size} not divisible by grid {grid}")
    cell = size // grid
    k = int(rng.integers(0, len(GLYPHS) + 1))
    kinds = [GLYPHS[i] for i in rng.permutation(len(GLYPHS))[:k]]
    cells = sorted(int(c) for c in rng.choice(grid * grid, size=k, replace=False))
    img = np.zeros((size, size))
    placed = []
    for kind, c in zip(kinds, cells):
        r, col = divmod(c, grid)
        img[r * cell:(r + 1) * cell, col * cell:(col + 1) * cell] = _glyph(kind, cell)
        placed.append((kind, quadrant(r, col, grid)))
    img = np.clip(img + rng.normal(0.0, noise, size=img.shape), 0.0, 1.0)

    concepts = [(kind, "POSITIVE", [q]) for kind, q in placed]
    sentences = [f"there is a {kind} in the {q} ." for kind, q in placed]
    if 0 < k < len(GLYPHS):
        absent = next(g for g in GLYPHS if g not in kinds)
        concepts.append((absent, "NEGATIVE", []))
        sentences.append(f"there is no {absent} .")
    report = " ".join(sentences) if sentences else "no findings ."
    return img, concepts, report


def generate_synthetic(seed, n_train, n_val, n_test, grid=4, size=32):
    """In-memory synthetic corpus: dict split -> list of record dicts."""
    for n in (n_train, n_val, n_test):
        if n < 1:
            raise ContractError("every split needs at least one record")
    rng = np.random.default_rng(seed)
    out = {}
    idx = 0
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        recs = []
        for _ in range(n):
            img, concepts, report = synth_example(rng, size=size, grid=grid)
            recs.append({"id": f"synth-{idx:05d}", "image": img, "concepts": concepts, "report": report})
            idx += 1
        out[split] = recs
    return out


def synth_corpus(out_dir, seed=0, n_train=800, n_val=100, n_test=100, grid=4, size=32):
    """Write a synthetic corpus (PGM images + ``annotation.json``) to ``out_dir``."""
    from .backbone import save_pgm

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    corpus = generate_synthetic(seed, n_train, n_val, n_test, grid=grid, size=size)
    doc = {}
    for split, recs in corpus.items():
        rows = []
        for rec in recs:
            rel = f"images/{rec['id']}.pgm"
            save_pgm(out_dir / rel, rec["image"])
            rows.append({
                "id": rec["id"],
                "image_path": [rel],
                "report": rec["report"],
                "split": split,
                "concepts": [[lab, pol, attrs] for lab, pol, attrs in rec["concepts"]],
            })
        doc[split] = rows
    path = out_dir / "annotation.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"PGEN"
CHECKPOINT_VERSION = 1


def save_checkpoint(params, config, path):
    """Write named float64 arrays plus a JSON config blob.

    Layout (little-endian): ``PGEN`` | u32 version | u32 len + config JSON |
    u32 count | per array: u32 len + name, u32 ndim, u32 dims..., f64 data |
    32-byte SHA-256 of everything before it.
    """
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    blob = json.dumps(config, sort_keys=True).encode()
    buf += struct.pack("<I", len(blob)) + blob
    buf += struct.pack("<I", len(params))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is C-order; keeps 0-d shapes
        raw = name.encode()
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += hashlib.sha256(buf).digest()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, config)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from None
    if len(data) < 8 + 32 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated)")
    try:
        pos = 8
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        config = json.loads(body[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(body):
                raise CheckpointError(f"{path}: array {name!r} runs past end of file")
            params[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
        if pos != len(body):
            raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from None
    return params, config
