"""Mini-batch training with Adam parameter groups and BLEU-4 early stopping."""

from __future__ import annotations

import json
import math
import time

import numpy as np

from . import tensor as T
from .exceptions import ContractError, NumericError
from .metrics import bleu


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def corpus_bleu4(hyps, refs):
    """BLEU-4 of token lists; 0 when every hypothesis is empty."""
    if not any(hyps):
        return 0.0
    return bleu(hyps, refs)[3]


def validate(model, sources, targets, vocab, max_len, chunk=64):
    """(mean loss, BLEU-4 of greedy decodes) over a validation set."""
    hyps, losses, weights = [], [], []
    with T.no_grad():
        for i in range(0, len(sources), chunk):
            src, tgt = sources[i:i + chunk], targets[i:i + chunk]
            bodies, _ = model.greedy_batch(src, max_len)
            hyps.extend(vocab.decode(b) for b in bodies)
            losses.append(model.loss(src, tgt).item())
            weights.append(sum(len(t) + 1 for t in tgt))
    refs = [vocab.decode(t) for t in targets]
    loss = float(np.dot(losses, weights) / sum(weights))
    return loss, corpus_bleu4(hyps, refs)


def fit(model, sources, targets, vocab, *, groups, batch_size=16, epochs=60, patience=20, seed=0,
        val_sources=None, val_targets=None, max_len=60, log=None, phase="", verbose=False):
    """Train ``model`` in place and restore the best validation epoch.

    The best epoch has the highest validation BLEU-4, ties broken by lower
    validation loss. Without a validation set the last epoch is kept.
    Returns the list of per-epoch log records.
    """
    if len(sources) != len(targets) or not sources:
        raise ContractError("training needs equally many, and at least one, sources and targets")
    rng = np.random.default_rng(seed)
    params = [p for g in groups for p in g["params"]]
    opt = T.Adam(groups, lr=groups[-1]["lr"])
    history = []
    best_key, best_state, best_epoch, stale = None, None, 0, 0
    model.train()
    for epoch in range(1, epochs + 1):
        t0 = time.time()
        total, count = 0.0, 0
        for idx in _batches(len(sources), batch_size, rng):
            loss = model.loss([sources[i] for i in idx], [targets[i] for i in idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"{phase} loss became {value} at epoch {epoch}")
            loss.backward(params)
            opt.step()
            n = sum(len(targets[i]) + 1 for i in idx)
            total += value * n
            count += n
        rec = {"phase": phase, "epoch": epoch, "split": "train", "loss": total / count, "bleu4": None}
        history.append(rec)
        _emit(log, rec)
        if val_sources:
            model.eval()
            vloss, vbleu = validate(model, val_sources, val_targets, vocab, max_len)
            model.train()
            rec = {"phase": phase, "epoch": epoch, "split": "val", "loss": vloss, "bleu4": vbleu}
            history.append(rec)
            _emit(log, rec)
            key = (vbleu, -vloss)
            if best_key is None or key > best_key:
                best_key, best_state, best_epoch, stale = key, model.state_dict(), epoch, 0
            else:
                stale += 1
            if verbose:
                print(f"[{phase}] epoch {epoch} train {total / count:.4f} val {vloss:.4f} "
                      f"bleu4 {vbleu:.4f} ({time.time() - t0:.1f}s)", flush=True)
            if stale >= patience:
                break
        elif verbose:
            print(f"[{phase}] epoch {epoch} train {total / count:.4f}", flush=True)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    model.best_epoch = best_epoch or epoch
    return history


def _emit(log, rec):
    if log is None:
        return
    if callable(log):
        log(rec)
    else:
        log.write(json.dumps(rec) + "\n")
        log.flush()
