"""Greedy and beam-search decoding.

Decoders talk to the model through a small protocol so toy scorers can be
plugged in for exhaustive checks:

* ``model.bos_id`` / ``model.eos_id``
* ``model.start(frames) -> state``
* ``model.next_log_probs(state, prefixes) -> ndarray[n, V]`` (equal-length
  prefixes, each starting with BOS)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import autodiff as ad
from .model import Signformer, decoder_hidden, output_logits


@dataclass
class Hypothesis:
    tokens: List[int]  # includes the leading BOS
    log_prob: float = 0.0
    finished: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    def output(self, eos_id: int) -> List[int]:
        out = self.tokens[1:]
        return out[:out.index(eos_id)] if eos_id in out else out


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def score(h: Hypothesis, alpha: float) -> float:
    return h.log_prob / length_penalty(h.length, alpha)


def _top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, ties broken by lower index.

    Same result as ``np.argsort(-values, kind="stable")[:k]`` without sorting
    the whole array.
    """
    if k >= values.size:
        return np.argsort(-values, kind="stable")
    kth = np.partition(values, values.size - k)[values.size - k]
    cand = np.flatnonzero(values >= kth)
    return cand[np.argsort(-values[cand], kind="stable")][:k]


def greedy_decode(model, frames, max_len: int = 60) -> List[int]:
    """Arg-max decoding; ties go to the lowest token id. BOS/EOS stripped."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    state = model.start(frames)
    tokens = [model.bos_id]
    for _ in range(max_len):
        lp = model.next_log_probs(state, [tokens])[0]
        tok = int(np.argmax(lp))
        tokens.append(tok)
        if tok == model.eos_id:
            break
    return Hypothesis(tokens).output(model.eos_id)


def beam_search(model, frames, beam: int = 5, alpha: float = 1.0, max_len: int = 60,
                return_all: bool = False):
    """Length-normalised beam search.

    Each step expands every live hypothesis and keeps the ``beam`` best
    candidates by total log-probability (ties: earlier hypothesis, then lower
    token id). Candidates ending in EOS, or reaching ``max_len``, are
    finished. The result maximises ``log_prob / ((5 + L) / 6) ** alpha``.

    Returns:
        Best token ids (BOS/EOS stripped), or ``(best, finished)`` with the
        full list of finished :class:`Hypothesis` when ``return_all``.
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    state = model.start(frames)
    alive = [Hypothesis([model.bos_id])]
    finished: List[Hypothesis] = []
    for step in range(max_len):
        lp = np.asarray(model.next_log_probs(state, [h.tokens for h in alive]), dtype=np.float64)
        vocab = lp.shape[1]
        totals = np.array([h.log_prob for h in alive])[:, None] + lp
        flat = totals.reshape(-1)
        top = _top_k(flat, beam)
        last = step == max_len - 1
        nxt = []
        for idx in top:
            src, tok = divmod(int(idx), vocab)
            h = Hypothesis(alive[src].tokens + [tok], float(flat[idx]))
            if tok == model.eos_id or last:
                h.finished = True
                finished.append(h)
            else:
                nxt.append(h)
        alive = nxt
        if not alive:
            break
        if alpha == 0 and finished and max(f.log_prob for f in finished) >= max(a.log_prob for a in alive):
            break
    best = max(finished, key=lambda h: score(h, alpha))
    out = best.output(model.eos_id)
    return (out, finished) if return_all else out


def greedy_decode_batch(model: Signformer, frames: np.ndarray, pad_mask: np.ndarray,
                        max_len: int = 60) -> List[List[int]]:
    """Greedy decoding of a padded batch in lock step."""
    b = frames.shape[0]
    with ad.no_grad():
        enc = model.encode(frames, pad_mask)
        tokens = np.full((b, 1), model.bos_id, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            h = decoder_hidden(tokens, enc, model.params, model.cfg, pad_mask)
            logits = output_logits(h[:, -1:, :], model.params, model.cfg).data[:, 0, :]
            nxt = np.argmax(logits, axis=-1)
            nxt = np.where(done, model.eos_id, nxt)
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
            done |= nxt == model.eos_id
            if done.all():
                break
    return [Hypothesis(row.tolist()).output(model.eos_id) for row in tokens]


def translate_batch(model: Signformer, frames: np.ndarray, pad_mask: np.ndarray, beam: int = 1,
                    alpha: float = 1.0, max_len: int = 60) -> List[List[int]]:
    """Decode each sequence of a padded batch on its own (greedy when ``beam == 1``)."""
    lengths = pad_mask.sum(axis=1).astype(int)
    if beam == 1:
        return [greedy_decode(model, frames[i, :n], max_len) for i, n in enumerate(lengths)]
    return [beam_search(model, frames[i, :n], beam, alpha, max_len) for i, n in enumerate(lengths)]
