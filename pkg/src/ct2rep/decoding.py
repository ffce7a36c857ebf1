"""Auto-regressive report generation (greedy and length-normalised beam search)."""

from __future__ import annotations

import numpy as np

from .tensor import no_grad
from .textproc import BOS, EOS, MAX_TOKENS


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def greedy(model, h, context=None, max_tokens: int = MAX_TOKENS) -> list[int]:
    ids, memory = [BOS], []
    while len(ids) < max_tokens:
        logits, memory = model.decode_step(ids, h, memory, context)
        nxt = int(np.argmax(logits.data))  # first maximum -> lowest id on ties
        ids.append(nxt)
        if nxt == EOS:
            break
    return ids


def beam_search(model, h, beam_size: int, context=None, max_tokens: int = MAX_TOKENS) -> list[int]:
    """Beam search; hypotheses are ranked by summed log-prob / generated length."""
    if beam_size < 1:
        raise ValueError("beam size must be >= 1")
    beams = [(0.0, [BOS], [])]
    finished = []
    while beams and len(finished) < beam_size:
        candidates = []
        for rank, (score, ids, memory) in enumerate(beams):
            if len(ids) >= max_tokens:
                finished.append((score / (len(ids) - 1), score, ids))
                continue
            logits, new_memory = model.decode_step(ids, h, memory, context)
            logp = _log_softmax(logits.data)
            top = np.lexsort((np.arange(len(logp)), -logp))[:beam_size]
            for tok in top:
                candidates.append((score + float(logp[tok]), rank, int(tok), ids, new_memory))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        beams = []
        for score, _, tok, ids, memory in candidates[: beam_size - len(finished)]:
            new_ids = ids + [tok]
            if tok == EOS:
                finished.append((score / (len(new_ids) - 1), score, new_ids))
            else:
                beams.append((score, new_ids, memory))
    pool = finished or [(s / (len(i) - 1), s, i) for s, i, _ in beams]
    best = max(pool, key=lambda f: f[0])  # max keeps the earliest on ties
    return best[2]


def generate(model, volume, mode: str = "greedy", beam_size: int = 3, context=None,
             max_tokens: int | None = None) -> list[int]:
    """Token ids (starting with BOS) for one volume; total length never exceeds ``max_tokens``."""
    cap = min(max_tokens or model.cfg.max_tokens, MAX_TOKENS)
    with no_grad():
        h = model.encode(volume)
        if mode == "greedy":
            return greedy(model, h, context, cap)
        if mode == "beam":
            return beam_search(model, h, beam_size, context, cap)
    raise ValueError(f"unknown decode mode {mode!r}")
