"""The two stages: image -> concept skeleton (ViLM) and skeleton -> report (LM).

Both are encoder-decoder transformers trained with teacher forcing. The ViLM
reads patch features from the convolutional backbone through a
memory-augmented encoder and a meshed decoder; the LM reads the serialised
skeleton tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import PatchExtractor, extract_patch_features
from .concepts import NONE_TOKEN
from .data import BOS, EOS, PAD
from .decoding import DecodeConfig, decode
from .exceptions import ContractError, DataError
from .layers import Embedding, Linear, Module
from .tensor import Tensor
from .transformer import Decoder, Encoder, TransformerConfig


def _zero_head(decoder):
    # an untrained model then predicts the uniform distribution over the vocabulary
    decoder.head.weight.data[...] = 0.0
    decoder.head.bias.data[...] = 0.0


def frame_targets(seqs, max_len=None):
    """Teacher-forcing arrays from id lists.

    Returns ``(inputs, targets)`` of shape (B, T+1): inputs are
    ``[BOS] + ids`` and targets ``ids + [EOS]``, both right-padded with PAD.
    """
    if not seqs:
        raise ContractError("empty batch")
    n = max(len(s) for s in seqs) + 1
    if max_len is not None and n > max_len:
        raise DataError(f"sequence of {n - 1} tokens exceeds max length {max_len - 1}")
    inp = np.full((len(seqs), n), PAD, dtype=np.int64)
    tgt = np.full((len(seqs), n), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        inp[i, 0] = BOS
        inp[i, 1:len(s) + 1] = s
        tgt[i, :len(s)] = s
        tgt[i, len(s)] = EOS
    return inp, tgt


class _Seq2Seq(Module):
    """Shared decoding plumbing; subclasses provide ``encode``."""

    def logits(self, source, prefix_ids):
        memory = self.encode(source)
        return self.decode_logits(memory, prefix_ids)

    def decode_logits(self, memory, prefix_ids):
        enc_outputs, keep = memory
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        if prefix_ids.ndim == 1:
            prefix_ids = prefix_ids[None]
        B = prefix_ids.shape[0]
        if enc_outputs[0].shape[0] != B:
            # one encoded source shared by several prefixes (beam hypotheses)
            reps = B // enc_outputs[0].shape[0]
            enc_outputs = [T.concat([e] * reps, axis=0) for e in enc_outputs]
            keep = np.repeat(keep, reps, axis=0) if keep is not None else None
        tgt_keep = prefix_ids != PAD
        tgt_keep[:, 0] = True
        return self.decoder(prefix_ids, enc_outputs, keep, tgt_keep)

    def loss(self, source, target_seqs):
        """Mean next-token NLL over the non-pad target positions of the batch."""
        inp, tgt = frame_targets(target_seqs, self.decoder.max_len)
        return T.cross_entropy(self.logits(source, inp), tgt, pad_id=PAD)

    def step_fn(self, source):
        """Next-token log-prob function for one example, for the decoders."""
        with T.no_grad():
            memory = self.encode(source)

        def step(prefix):
            return step.many([prefix])[0]

        def many(prefixes):
            with T.no_grad():
                out = self.decode_logits(memory, np.asarray(prefixes, dtype=np.int64))
                return T.log_softmax(out, axis=-1).data[:, -1]

        step.many = many
        return step

    def greedy_batch(self, source, max_len):
        """Greedy decoding of a whole batch at once; returns (bodies, truncated flags)."""
        with T.no_grad():
            memory = self.encode(source)
            B = memory[0][0].shape[0]
            ids = np.full((B, 1), BOS, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            for _ in range(max_len):
                logits = self.decode_logits(memory, ids).data[:, -1]
                nxt = np.argmax(logits, axis=-1)
                nxt[done] = PAD
                ids = np.concatenate([ids, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        bodies, truncated = [], []
        for row in ids[:, 1:]:
            row = list(row)
            if EOS in row:
                bodies.append([int(t) for t in row[:row.index(EOS)]])
                truncated.append(False)
            else:
                bodies.append([int(t) for t in row])
                truncated.append(True)
        return bodies, truncated


class ViLM(_Seq2Seq):
    """Images -> token sequence. Used for concepts (progressive) or reports (single stage)."""

    def __init__(self, cfg, vocab_size, image_size=32, patch_size=8, d_feature=None, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.image_size = image_size
        d_feature = d_feature or cfg.d_model
        self.backbone = PatchExtractor(image_size, patch_size, d_feature, rng)
        self.src_proj = Linear(d_feature, cfg.d_model, rng)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, vocab_size, rng)
        _zero_head(self.decoder)

    def encode(self, images):
        """``images``: list of examples, each a list of one or two (H, W) arrays."""
        if not images:
            raise ContractError("empty batch")
        feats, keep = extract_patch_features(self.backbone, images)
        outs = self.encoder(self.src_proj(feats), keep)
        return outs, keep

    def parameter_groups(self, visual_lr, lr):
        visual = self.backbone.parameter_group()
        ids = {id(p) for p in visual["params"]}
        rest = [p for p in self.parameters() if id(p) not in ids]
        return [dict(visual, lr=visual_lr), {"name": "other", "params": rest, "lr": lr}]


class LM(_Seq2Seq):
    """Concept-skeleton tokens -> report tokens (bidirectional encoder, causal decoder)."""

    def __init__(self, cfg, src_vocab_size, vocab_size, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.d_model = cfg.d_model
        self.src_vocab_size = src_vocab_size
        self.src_embed = Embedding(src_vocab_size, cfg.d_model, rng)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, vocab_size, rng)
        _zero_head(self.decoder)

    def encode(self, sources):
        """``sources``: list of non-empty id lists over the concept vocabulary."""
        if not sources:
            raise ContractError("empty batch")
        if any(len(s) == 0 for s in sources):
            raise ContractError("empty concept context; use the 'none' token")
        n = max(len(s) for s in sources)
        ids = np.full((len(sources), n), PAD, dtype=np.int64)
        for i, s in enumerate(sources):
            ids[i, :len(s)] = s
        if ids.min() < 0 or ids.max() >= self.src_vocab_size:
            raise DataError(f"concept id outside vocabulary of size {self.src_vocab_size}")
        keep = ids != PAD
        x = self.src_embed(ids) * np.sqrt(self.d_model)
        return self.encoder(x, keep), keep

    def parameter_groups(self, visual_lr, lr):
        return [{"name": "other", "params": self.parameters(), "lr": lr}]


# ------------------------------------------------------------ stage functions


def vilm_logits(model, images, prefix_ids):
    return model.logits([images], prefix_ids)


def vilm_loss(model, batch):
    """``batch``: list of (views, concept ids)."""
    if not batch:
        raise ContractError("empty batch")
    return model.loss([v for v, _ in batch], [list(c) for _, c in batch])


def lm_logits(model, concept_ids, prefix_ids):
    return model.logits([list(concept_ids)], prefix_ids)


def lm_loss(model, batch):
    """``batch``: list of (concept ids, report ids)."""
    if not batch:
        raise ContractError("empty batch")
    return model.loss([list(c) for c, _ in batch], [list(r) for _, r in batch])


@dataclass
class Generation:
    concepts: list      # concept tokens (strings); empty for single-stage output
    report: list        # report tokens
    truncated: bool     # some stage hit max_len without EOS
    concept_ids: list = None
    report_ids: list = None


def context_ids(concept_ids, concept_vocab):
    """LM input for a decoded skeleton; an empty decode becomes the ``none`` token."""
    ids = [int(i) for i in concept_ids]
    return ids if ids else concept_vocab.encode([NONE_TOKEN])


def generate_progressive(views, vilm, lm, decode_cfg, concept_vocab, report_vocab, report_cfg=None):
    """Images -> skeleton -> report for one example; both stages returned."""
    c = decode(vilm.step_fn([views]), decode_cfg)
    src = context_ids(c.body, concept_vocab)
    r = decode(lm.step_fn([src]), report_cfg or decode_cfg)
    return Generation(concept_vocab.decode(c.body), report_vocab.decode(r.body),
                      c.truncated or r.truncated, list(c.body), list(r.body))


def generate_single_stage(views, vilm, decode_cfg, report_vocab):
    r = decode(vilm.step_fn([views]), decode_cfg)
    return Generation([], report_vocab.decode(r.body), r.truncated, None, list(r.body))


def default_decode(max_len=60, beam_size=1):
    return DecodeConfig(beam_size=beam_size, max_len=max_len)
