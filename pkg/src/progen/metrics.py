"""Corpus metrics: BLEU-1..4, ROUGE-L, METEOR-lite and clinical efficacy.

All NLG metrics take token lists. METEOR-lite is exact-match METEOR without
stemming or synonym tables and is reported under its own name.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

from .concepts import POSITIVE, extract_mentions, label_set
from .exceptions import ContractError


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    ce_precision: float
    ce_recall: float
    ce_f1: float
    n_pairs: int

    def to_json(self, runs=1):
        return {
            "bleu": [self.bleu1, self.bleu2, self.bleu3, self.bleu4],
            "meteor": self.meteor,
            "rouge_l": self.rouge_l,
            "ce": {"p": self.ce_precision, "r": self.ce_recall, "f1": self.ce_f1},
            "n_pairs": self.n_pairs,
            "runs": runs,
        }

    @classmethod
    def from_json(cls, doc):
        b = doc["bleu"]
        return cls(b[0], b[1], b[2], b[3], doc["meteor"], doc["rouge_l"],
                   doc["ce"]["p"], doc["ce"]["r"], doc["ce"]["f1"], doc["n_pairs"])

    @classmethod
    def mean(cls, reports):
        """Field-wise arithmetic mean (``n_pairs`` taken from the first report)."""
        if not reports:
            raise ContractError("cannot average zero reports")
        fields = [k for k in asdict(reports[0]) if k != "n_pairs"]
        vals = {k: sum(getattr(r, k) for r in reports) / len(reports) for k in fields}
        return cls(n_pairs=reports[0].n_pairs, **vals)


def _check_corpora(candidates, references):
    if len(candidates) != len(references):
        raise ContractError(f"corpus sizes differ: {len(candidates)} vs {len(references)}")
    if not candidates:
        raise ContractError("empty corpus")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n=4):
    """Corpus BLEU-1..max_n (clipped n-gram precision, brevity penalty, no smoothing)."""
    _check_corpora(candidates, references)
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            c_counts = _ngrams(cand, n)
            r_counts = _ngrams(ref, n)
            matched[n - 1] += sum(min(c, r_counts[g]) for g, c in c_counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matched[n] == 0 or total[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def modified_precision(candidates, references, n):
    """Clipped n-gram precision over the corpus as (matched, total)."""
    m = t = 0
    for cand, ref in zip(candidates, references):
        r_counts = _ngrams(ref, n)
        m += sum(min(c, r_counts[g]) for g, c in _ngrams(cand, n).items())
        t += max(len(cand) - n + 1, 0)
    return m, t


def lcs_length(a, b):
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand, ref, beta=1.2):
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(candidates, references, beta=1.2):
    """Mean over pairs of the LCS F-measure."""
    _check_corpora(candidates, references)
    return sum(rouge_l_pair(c, r, beta) for c, r in zip(candidates, references)) / len(candidates)


def align(cand, ref):
    """Exact-match unigram alignment built greedily from the longest common runs.

    Repeatedly takes the longest run of still-unaligned tokens present in both
    sequences (ties: earliest in ``cand``, then earliest in ``ref``) until no
    token can be matched. Returns a sorted list of (cand_pos, ref_pos).
    """
    used_c = [False] * len(cand)
    used_r = [False] * len(ref)
    pairs = []
    while True:
        best = (0, 0, 0)
        # run[i][j]: length of the common unaligned run starting at cand[i], ref[j]
        run = [[0] * (len(ref) + 1) for _ in range(len(cand) + 1)]
        for i in range(len(cand) - 1, -1, -1):
            for j in range(len(ref) - 1, -1, -1):
                if not used_c[i] and not used_r[j] and cand[i] == ref[j]:
                    run[i][j] = run[i + 1][j + 1] + 1
                    if run[i][j] >= best[0]:
                        best = (run[i][j], i, j)
        n, i, j = best
        if n == 0:
            break
        for k in range(n):
            used_c[i + k] = used_r[j + k] = True
            pairs.append((i + k, j + k))
    pairs.sort()
    return pairs


def count_chunks(pairs):
    chunks = 0
    prev = None
    for ci, ri in pairs:
        if prev is None or ci != prev[0] + 1 or ri != prev[1] + 1:
            chunks += 1
        prev = (ci, ri)
    return chunks


def meteor_lite_pair(cand, ref):
    pairs = align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(cand)
    r = m / len(ref)
    fmean = 10 * p * r / (r + 9 * p)  # recall-weighted harmonic mean
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return fmean * (1 - penalty)


def meteor_lite(candidates, references):
    """Mean over pairs of exact-match METEOR."""
    _check_corpora(candidates, references)
    return sum(meteor_lite_pair(c, r) for c, r in zip(candidates, references)) / len(candidates)


def _ratio(num, den, both_empty):
    if den == 0:
        return both_empty
    return num / den


def clinical_efficacy(generated, references, lexicon=None):
    """Micro-averaged precision/recall/F1 of positive labels extracted from report texts.

    When neither side has any positive label the corpus scores 1 (nothing to
    find, nothing wrongly found).
    """
    if len(generated) != len(references):
        raise ContractError(f"corpus sizes differ: {len(generated)} vs {len(references)}")
    tp = n_gen = n_ref = 0
    for g, r in zip(generated, references):
        gpos = {k for k, v in label_set(extract_mentions(g, lexicon)).items() if v == POSITIVE}
        rpos = {k for k, v in label_set(extract_mentions(r, lexicon)).items() if v == POSITIVE}
        tp += len(gpos & rpos)
        n_gen += len(gpos)
        n_ref += len(rpos)
    empty = 1.0 if n_gen == 0 and n_ref == 0 else 0.0
    p = _ratio(tp, n_gen, empty)
    r = _ratio(tp, n_ref, empty)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def evaluate(generated, references, lexicon=None):
    """All metrics for aligned lists of generated and reference report texts."""
    from .data import tokenize

    cands = [tokenize(t) for t in generated]
    refs = [tokenize(t) for t in references]
    b = bleu(cands, refs)
    p, r, f1 = clinical_efficacy(generated, references, lexicon)
    return EvalReport(b[0], b[1], b[2], b[3], meteor_lite(cands, refs), rouge_l(cands, refs),
                      p, r, f1, len(cands))
