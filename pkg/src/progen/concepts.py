"""Rule-based extraction of the concept skeleton from report text.

Disease phrases are found by longest match against a lexicon. A mention is
negated when a negation trigger ends within the six tokens before it in the
same sentence, uncertain when an uncertainty trigger does (negation wins),
and picks up modifier words within three tokens on either side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .data import tokenize
from .exceptions import DataError, ParseError

POSITIVE, NEGATIVE, UNCERTAIN = "POSITIVE", "NEGATIVE", "UNCERTAIN"
POLARITY_TOKENS = {POSITIVE: "pos", NEGATIVE: "neg", UNCERTAIN: "unc"}
TOKEN_POLARITY = {v: k for k, v in POLARITY_TOKENS.items()}
SEP = "<sep>"
NONE_TOKEN = "none"

TRIGGER_WINDOW = 6
ATTRIBUTE_WINDOW = 3


@dataclass(frozen=True)
class Lexicon:
    labels: dict          # canonical label -> tuple of surface phrases
    negation: tuple
    uncertainty: tuple
    attributes: frozenset

    def __post_init__(self):
        seen = {}
        for label, surfaces in self.labels.items():
            if not label or any(c.isspace() for c in label) or label in (SEP, NONE_TOKEN):
                raise DataError(f"lexicon label {label!r} must be a single token")
            if label in TOKEN_POLARITY:
                raise DataError(f"lexicon label {label!r} clashes with a polarity token")
            for s in surfaces:
                if s != s.lower():
                    raise DataError(f"surface {s!r} must be lowercase")
                if s in seen and seen[s] != label:
                    raise DataError(f"surface {s!r} listed under both {seen[s]!r} and {label!r}")
                seen[s] = label
        if not self.negation or not self.uncertainty:
            raise DataError("lexicon needs non-empty negation and uncertainty trigger lists")
        # surface token tuple -> label, longest first
        phrases = {tuple(tokenize(s)): lab for s, lab in seen.items()}
        object.__setattr__(self, "_phrases", phrases)
        object.__setattr__(self, "_max_len", max((len(p) for p in phrases), default=0))
        object.__setattr__(self, "_neg", [tuple(tokenize(t)) for t in self.negation])
        object.__setattr__(self, "_unc", [tuple(tokenize(t)) for t in self.uncertainty])

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(
                labels={k: tuple(v) for k, v in doc["labels"].items()},
                negation=tuple(doc["negation"]),
                uncertainty=tuple(doc["uncertainty"]),
                attributes=frozenset(doc["attributes"]),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise DataError(f"malformed lexicon: {exc}") from None

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: cannot read lexicon: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def default(cls):
        text = resources.files("progen.resources").joinpath("lexicon.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self):
        return {
            "labels": {k: list(v) for k, v in self.labels.items()},
            "negation": list(self.negation),
            "uncertainty": list(self.uncertainty),
            "attributes": sorted(self.attributes),
        }


@dataclass(frozen=True)
class ConceptMention:
    label: str
    polarity: str
    attributes: tuple = ()
    span: tuple = field(default=None, compare=False)  # (sentence index, start, end)


def _split_sentences(tokens):
    sent, out = [], []
    for tok in tokens:
        sent.append(tok)
        if tok == ".":
            out.append(sent)
            sent = []
    if sent:
        out.append(sent)
    return out


def _trigger_before(sent, start, triggers):
    lo = max(0, start - TRIGGER_WINDOW)
    for trig in triggers:
        n = len(trig)
        for i in range(lo, start - n + 1):
            if tuple(sent[i:i + n]) == trig:
                return True
    return False


def extract_mentions(report, lexicon=None):
    """Concept mentions of ``report`` in order of first occurrence."""
    lexicon = lexicon or Lexicon.default()
    phrases, longest = lexicon._phrases, lexicon._max_len
    mentions = []
    for si, sent in enumerate(_split_sentences(tokenize(report))):
        i = 0
        while i < len(sent):
            match = None
            for n in range(min(longest, len(sent) - i), 0, -1):
                label = phrases.get(tuple(sent[i:i + n]))
                if label is not None:
                    match = (label, n)
                    break
            if match is None:
                i += 1
                continue
            label, n = match
            if _trigger_before(sent, i, lexicon._neg):
                polarity = NEGATIVE
            elif _trigger_before(sent, i, lexicon._unc):
                polarity = UNCERTAIN
            else:
                polarity = POSITIVE
            lo, hi = max(0, i - ATTRIBUTE_WINDOW), min(len(sent), i + n + ATTRIBUTE_WINDOW)
            attrs = tuple(t for j, t in enumerate(sent[lo:hi], start=lo)
                          if not i <= j < i + n and t in lexicon.attributes)
            mentions.append(ConceptMention(label, polarity, attrs, (si, i, i + n)))
            i += n
    return mentions


def build_context(mentions):
    """Serialise mentions as ``label pol attr... <sep> label pol ...``; empty -> ``none``."""
    if not mentions:
        return [NONE_TOKEN]
    out = []
    for k, m in enumerate(mentions):
        if k:
            out.append(SEP)
        out.append(m.label)
        out.append(POLARITY_TOKENS[m.polarity])
        out.extend(m.attributes)
    return out


def parse_context(tokens):
    """Inverse of :func:`build_context`."""
    tokens = list(tokens)
    if tokens == [NONE_TOKEN]:
        return []
    if not tokens:
        raise ParseError("empty context", 0)
    mentions, pos = [], 0
    while True:
        if pos >= len(tokens) or tokens[pos] in (SEP, NONE_TOKEN) or tokens[pos] in TOKEN_POLARITY:
            raise ParseError("expected a concept label", pos)
        label = tokens[pos]
        if pos + 1 >= len(tokens) or tokens[pos + 1] not in TOKEN_POLARITY:
            raise ParseError(f"expected polarity after {label!r}", pos + 1)
        polarity = TOKEN_POLARITY[tokens[pos + 1]]
        pos += 2
        attrs = []
        while pos < len(tokens) and tokens[pos] != SEP:
            if tokens[pos] in TOKEN_POLARITY or tokens[pos] == NONE_TOKEN:
                raise ParseError(f"unexpected token {tokens[pos]!r}", pos)
            attrs.append(tokens[pos])
            pos += 1
        mentions.append(ConceptMention(label, polarity, tuple(attrs)))
        if pos == len(tokens):
            return mentions
        pos += 1  # skip separator


@dataclass
class ConceptContext:
    mentions: list

    @property
    def tokens(self):
        return build_context(self.mentions)

    @property
    def text(self):
        return " ".join(self.tokens)

    @classmethod
    def from_tokens(cls, tokens):
        return cls(parse_context(tokens))


def parse_context_lenient(tokens):
    """Parse model output, dropping malformed groups instead of raising."""
    tokens = [t for t in tokens if t != NONE_TOKEN]
    groups, cur = [], []
    for t in tokens:
        if t == SEP:
            groups.append(cur)
            cur = []
        else:
            cur.append(t)
    groups.append(cur)
    out = []
    for g in groups:
        try:
            out.extend(parse_context(g))
        except ParseError:
            continue
    return out


def label_set(mentions):
    """label -> polarity; a later mention of the same label overrides earlier ones."""
    out = {}
    for m in mentions:
        out[m.label] = m.polarity
    return out
