"""Greedy, beam and exhaustive decoding over an autoregressive step function.

A step function maps a prefix (list of token ids starting with BOS) to a 1-D
array of next-token log-probabilities. It may expose ``many(prefixes)``
returning a 2-D array for several prefixes at once; beam search uses it when
present.

``max_len`` counts generated tokens, EOS included. Scores are
``logprob / n_generated**alpha``; ties go to the lexicographically smallest
token list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import BOS, EOS
from .exceptions import ContractError

EXHAUSTIVE_LIMIT = 10 ** 6


@dataclass
class DecodeConfig:
    beam_size: int = 1
    max_len: int = 60
    length_norm_alpha: float = 0.0

    def __post_init__(self):
        if int(self.beam_size) != self.beam_size or self.beam_size < 1:
            raise ContractError(f"beam_size must be an integer >= 1, got {self.beam_size}")
        if int(self.max_len) != self.max_len or self.max_len < 1:
            raise ContractError(f"max_len must be an integer >= 1, got {self.max_len}")
        if not 0.0 <= self.length_norm_alpha <= 1.0:
            raise ContractError(f"length_norm_alpha must lie in [0, 1], got {self.length_norm_alpha}")


@dataclass
class BeamHypothesis:
    tokens: list
    logprob: float = 0.0
    finished: bool = False
    eos: int = field(default=EOS, repr=False, compare=False)

    @property
    def body(self):
        """Generated tokens without the leading BOS and trailing EOS."""
        out = self.tokens[1:]
        if self.finished:
            out = out[:-1]
        return list(out)

    @property
    def truncated(self):
        return not self.finished

    def score(self, alpha=0.0):
        n = len(self.tokens) - 1
        if alpha == 0.0 or n == 0:
            return self.logprob
        return self.logprob / n ** alpha


def _rank_key(hyp, alpha):
    return (-hyp.score(alpha), hyp.tokens)


def _step_many(step_fn, prefixes):
    many = getattr(step_fn, "many", None)
    if many is not None:
        return np.asarray(many(prefixes), dtype=np.float64)
    return np.stack([np.asarray(step_fn(p), dtype=np.float64) for p in prefixes])


def greedy_decode(step_fn, max_len, bos=BOS, eos=EOS):
    """Argmax chain until EOS or ``max_len`` tokens; ties go to the smallest id."""
    tokens, lp = [bos], 0.0
    for _ in range(max_len):
        logp = np.asarray(step_fn(tokens), dtype=np.float64)
        tok = int(np.argmax(logp))
        lp += float(logp[tok])
        tokens.append(tok)
        if tok == eos:
            return BeamHypothesis(tokens, lp, True, eos)
    return BeamHypothesis(tokens, lp, False, eos)


def beam_search(step_fn, cfg, bos=BOS, eos=EOS):
    """Beam search keeping the top ``beam_size`` expansions per step.

    Expansions ending in EOS leave the beam and wait in a finished pool; the
    best finished hypothesis is returned, or the best unfinished one (marked
    truncated) if nothing finished within ``max_len``.
    """
    alpha = cfg.length_norm_alpha
    alive = [BeamHypothesis([bos], 0.0, False, eos)]
    finished = []
    for _ in range(cfg.max_len):
        logp = _step_many(step_fn, [h.tokens for h in alive])
        cands = []
        for h, row in zip(alive, logp):
            for tok in range(row.shape[0]):
                if row[tok] == -math.inf:
                    continue
                cands.append(BeamHypothesis(h.tokens + [tok], h.logprob + float(row[tok]), tok == eos, eos))
        cands.sort(key=lambda c: (-c.logprob, c.tokens))
        top = cands[:cfg.beam_size]
        finished.extend(c for c in top if c.finished)
        alive = [c for c in top if not c.finished]
        if not alive:
            break
        if alpha == 0.0 and finished:
            # log-probs only fall as hypotheses grow, so nothing alive can win any more
            if max(f.logprob for f in finished) > alive[0].logprob:
                break
    pool = finished or alive
    return min(pool, key=lambda h: _rank_key(h, alpha))


def exhaustive_decode(step_fn, max_len, vocab_size, bos=BOS, eos=EOS, alpha=0.0):
    """True argmax over every sequence of at most ``max_len`` tokens.

    Finished sequences (ending in EOS) are preferred; only if none exists is
    the best length-``max_len`` sequence without EOS returned.
    """
    if vocab_size ** max_len > EXHAUSTIVE_LIMIT:
        raise ContractError(f"exhaustive search over {vocab_size}^{max_len} sequences exceeds {EXHAUSTIVE_LIMIT}")
    best = {True: None, False: None}

    def offer(h):
        cur = best[h.finished]
        if cur is None or _rank_key(h, alpha) < _rank_key(cur, alpha):
            best[h.finished] = h

    def walk(tokens, lp):
        logp = np.asarray(step_fn(tokens), dtype=np.float64)
        for tok in range(vocab_size):
            if logp[tok] == -math.inf:
                continue
            nxt, nlp = tokens + [tok], lp + float(logp[tok])
            if tok == eos:
                offer(BeamHypothesis(nxt, nlp, True, eos))
            elif len(nxt) - 1 < max_len:
                walk(nxt, nlp)
            else:
                offer(BeamHypothesis(nxt, nlp, False, eos))

    walk([bos], 0.0)
    return best[True] or best[False]


def rescore(step_fn, tokens):
    """Sum of per-step log-probs of ``tokens[1:]`` given their prefixes."""
    total = 0.0
    for t in range(1, len(tokens)):
        total += float(np.asarray(step_fn(tokens[:t]))[tokens[t]])
    return total


def decode(step_fn, cfg, bos=BOS, eos=EOS):
    if cfg.beam_size == 1 and cfg.length_norm_alpha == 0.0:
        return greedy_decode(step_fn, cfg.max_len, bos, eos)
    return beam_search(step_fn, cfg, bos, eos)
