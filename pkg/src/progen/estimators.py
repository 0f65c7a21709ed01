"""scikit-learn style estimators around the two stages.

``ConceptExtractor`` turns reports into skeleton token lists,
``ImageToText`` and ``TextToText`` are trainable sequence generators, and
``ProgressiveReportGenerator`` chains them image -> skeleton -> report.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import check_views
from .concepts import NONE_TOKEN, SEP, Lexicon, build_context, extract_mentions
from .data import Vocab, tokenize
from .decoding import DecodeConfig, decode
from .exceptions import ContractError, DataError
from .models import LM, ViLM, context_ids
from .training import fit as fit_model
from .transformer import TransformerConfig


# ------------------------------------------------------------ input validation


def check_images(X, image_size):
    """List of examples, each a list of one or two square [0, 1] images."""
    if X is None or len(X) == 0:
        raise ContractError("no images given")
    out = []
    for views in X:
        if isinstance(views, np.ndarray) and views.ndim == 2:
            views = [views]
        out.append(check_views(list(views), image_size))
    return out


def check_token_lists(y, name="y"):
    if y is None or len(y) == 0:
        raise ContractError(f"{name} is empty")
    out = []
    for i, seq in enumerate(y):
        if isinstance(seq, str):
            seq = tokenize(seq)
        seq = list(seq)
        if not all(isinstance(t, str) for t in seq):
            raise ContractError(f"{name}[{i}] must be a string or a list of token strings")
        out.append(seq)
    return out


def check_same_length(a, b):
    if len(a) != len(b):
        raise ContractError(f"inconsistent numbers of samples: {len(a)} vs {len(b)}")


# ------------------------------------------------------------ estimators


class ConceptExtractor(BaseEstimator, TransformerMixin):
    """Reports -> serialised skeleton tokens (stateless)."""

    def __init__(self, lexicon=None):
        self.lexicon = lexicon

    def _lexicon(self):
        if self.lexicon is None:
            return Lexicon.default()
        if isinstance(self.lexicon, Lexicon):
            return self.lexicon
        return Lexicon.load(self.lexicon)

    def fit(self, X=None, y=None):
        self.lexicon_ = self._lexicon()
        return self

    def mentions(self, X):
        lex = getattr(self, "lexicon_", None) or self._lexicon()
        return [extract_mentions(r, lex) for r in X]

    def transform(self, X):
        return [build_context(m) for m in self.mentions(X)]


class _Seq2SeqEstimator(BaseEstimator):
    """Shared fit/predict logic; subclasses build the network and check sources."""

    def __init__(self, d_model=64, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=128,
                 memory_slots=8, mesh=True, dropout=0.0, batch_size=16, lr_visual=5e-4, lr=1e-3,
                 epochs=60, patience=20, seed=0, min_freq=3, max_len=60, beam_size=1,
                 verbose=False):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.d_ff = d_ff
        self.memory_slots = memory_slots
        self.mesh = mesh
        self.dropout = dropout
        self.batch_size = batch_size
        self.lr_visual = lr_visual
        self.lr = lr
        self.epochs = epochs
        self.patience = patience
        self.seed = seed
        self.min_freq = min_freq
        self.max_len = max_len
        self.beam_size = beam_size
        self.verbose = verbose

    def transformer_config(self, src_len):
        return TransformerConfig(self.d_model, self.n_heads, self.n_enc_layers, self.n_dec_layers,
                                 self.d_ff, self.memory_slots, self.mesh, self.dropout,
                                 max(self.max_len, src_len) + 2)

    def _encode_targets(self, y):
        ids = [self.vocab_.encode(t) for t in y]
        for i, t in enumerate(ids):
            if len(t) + 1 > self.max_len:
                raise DataError(f"target {i} has {len(t)} tokens; max_len is {self.max_len}")
        return ids

    def fit(self, X, y, X_val=None, y_val=None, log=None, vocab=None):
        X = self._check_sources(X, fitting=True)
        y = check_token_lists(y)
        check_same_length(X, y)
        self.vocab_ = vocab or Vocab.build(y, min_freq=self.min_freq)
        self.model_ = self._build()
        val = {}
        if X_val is not None:
            Xv = self._check_sources(X_val)
            yv = check_token_lists(y_val, "y_val")
            check_same_length(Xv, yv)
            val = dict(val_sources=Xv, val_targets=self._encode_targets(yv))
        self.history_ = fit_model(
            self.model_, X, self._encode_targets(y), self.vocab_,
            groups=self.model_.parameter_groups(self.lr_visual, self.lr),
            batch_size=self.batch_size, epochs=self.epochs, patience=self.patience, seed=self.seed,
            max_len=self.max_len, log=log, phase=self._phase, verbose=self.verbose, **val)
        self.best_epoch_ = self.model_.best_epoch
        return self

    def decode_config(self, beam_size=None):
        return DecodeConfig(beam_size=beam_size or self.beam_size, max_len=self.max_len)

    def generate(self, X, beam_size=None):
        """Decoded hypotheses (token ids, log-prob, finished flag) per source."""
        check_is_fitted(self, "model_")
        X = self._check_sources(X)
        cfg = self.decode_config(beam_size)
        return [decode(self.model_.step_fn([src]), cfg) for src in X]

    def predict(self, X, beam_size=None):
        return [self.vocab_.decode(h.body) for h in self.generate(X, beam_size)]

    def loss(self, X, y):
        check_is_fitted(self, "model_")
        return self.model_.loss(self._check_sources(X), self._encode_targets(check_token_lists(y))).item()

    def score(self, X, y):
        """Corpus BLEU-4 of greedy predictions."""
        from .training import corpus_bleu4

        return corpus_bleu4(self.predict(X, beam_size=1), check_token_lists(y))


class ImageToText(_Seq2SeqEstimator):
    """Images -> token sequence with the memory/mesh transformer (the ViLM)."""

    _phase = "vilm"

    def __init__(self, image_size=32, patch_size=8, d_feature=64, d_model=64, n_heads=4,
                 n_enc_layers=2, n_dec_layers=2, d_ff=128, memory_slots=8, mesh=True, dropout=0.0,
                 batch_size=16, lr_visual=5e-4, lr=1e-3, epochs=60, patience=20, seed=0,
                 min_freq=3, max_len=60, beam_size=1, verbose=False):
        super().__init__(d_model, n_heads, n_enc_layers, n_dec_layers, d_ff, memory_slots, mesh,
                         dropout, batch_size, lr_visual, lr, epochs, patience, seed, min_freq,
                         max_len, beam_size, verbose)
        self.image_size = image_size
        self.patch_size = patch_size
        self.d_feature = d_feature

    def _check_sources(self, X, fitting=False):
        return check_images(X, self.image_size)

    def _build(self):
        src_len = 2 * (self.image_size // self.patch_size) ** 2
        return ViLM(self.transformer_config(src_len), len(self.vocab_), self.image_size,
                    self.patch_size, self.d_feature, seed=self.seed)


class TextToText(_Seq2SeqEstimator):
    """Skeleton tokens -> report tokens (the LM)."""

    _phase = "lm"

    def __init__(self, d_model=64, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=128,
                 memory_slots=0, mesh=False, dropout=0.0, batch_size=16, lr=1e-3, epochs=60,
                 patience=20, seed=0, min_freq=3, max_len=100, src_max_len=60, beam_size=1,
                 verbose=False):
        super().__init__(d_model, n_heads, n_enc_layers, n_dec_layers, d_ff, memory_slots, mesh,
                         dropout, batch_size, lr, lr, epochs, patience, seed, min_freq, max_len,
                         beam_size, verbose)
        self.src_max_len = src_max_len

    def _check_sources(self, X, fitting=False):
        X = check_token_lists(X, "X")
        if fitting:
            # every context token is kept: the skeleton grammar must survive intact
            self.src_vocab_ = Vocab.build(X + [[NONE_TOKEN, SEP]], min_freq=1)
        ids = []
        for i, toks in enumerate(X):
            toks = toks or [NONE_TOKEN]
            if len(toks) > self.src_max_len:
                raise DataError(f"context {i} has {len(toks)} tokens; limit is {self.src_max_len}")
            ids.append(self.src_vocab_.encode(toks))
        return ids

    def _build(self):
        return LM(self.transformer_config(self.src_max_len), len(self.src_vocab_), len(self.vocab_),
                  seed=self.seed)


class ProgressiveReportGenerator(BaseEstimator):
    """Image -> skeleton -> report, each stage trained independently."""

    def __init__(self, concept_model=None, report_model=None, extractor=None):
        self.concept_model = concept_model
        self.report_model = report_model
        self.extractor = extractor

    def _parts(self):
        return (self.concept_model or ImageToText(),
                self.report_model or TextToText(),
                self.extractor or ConceptExtractor())

    def fit(self, X, y, X_val=None, y_val=None, log=None):
        vilm, lm, ext = self._parts()
        self.extractor_ = ext.fit()
        C = self.extractor_.transform(y)
        Cv = self.extractor_.transform(y_val) if y_val is not None else None
        self.concept_model_ = vilm.fit(X, C, X_val, Cv, log=log)
        self.report_model_ = lm.fit(C, y, Cv, y_val, log=log)
        return self

    def generate(self, X, beam_size=None):
        """Per example: (skeleton tokens, report tokens, truncated)."""
        check_is_fitted(self, "report_model_")
        out = []
        for hyp in self.concept_model_.generate(X, beam_size):
            skeleton = self.concept_model_.vocab_.decode(hyp.body)
            lm = self.report_model_
            src = context_ids(lm.src_vocab_.encode(skeleton), lm.src_vocab_)
            rep = decode(lm.model_.step_fn([src]), lm.decode_config(beam_size))
            out.append((skeleton, lm.vocab_.decode(rep.body), hyp.truncated or rep.truncated))
        return out

    def predict(self, X, beam_size=None):
        return [" ".join(r) for _, r, _ in self.generate(X, beam_size)]


# ------------------------------------------------------------ persistence


def save_estimator(est, path, extra=None):
    """Checkpoint a fitted ImageToText / TextToText (weights, vocabularies, settings)."""
    from .data import save_checkpoint

    check_is_fitted(est, "model_")
    config = {"kind": type(est).__name__, "params": est.get_params(),
              "vocab": est.vocab_.to_list(), "best_epoch": int(est.best_epoch_)}
    if isinstance(est, TextToText):
        config["src_vocab"] = est.src_vocab_.to_list()
    if extra:
        config["extra"] = extra
    save_checkpoint(est.model_.state_dict(), config, path)


def load_estimator(path):
    from .data import load_checkpoint
    from .exceptions import CheckpointError

    params, config = load_checkpoint(path)
    kinds = {"ImageToText": ImageToText, "TextToText": TextToText}
    if config.get("kind") not in kinds:
        raise CheckpointError(f"{path}: unknown model kind {config.get('kind')!r}")
    est = kinds[config["kind"]](**config["params"])
    est.vocab_ = Vocab.from_list(config["vocab"], min_freq=est.min_freq)
    if "src_vocab" in config:
        est.src_vocab_ = Vocab.from_list(config["src_vocab"], min_freq=1)
    est.model_ = est._build()
    try:
        est.model_.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: weights do not match the stored configuration: {exc}") from None
    est.model_.eval()
    est.best_epoch_ = config.get("best_epoch", 0)
    est.extra_ = config.get("extra", {})
    return est
