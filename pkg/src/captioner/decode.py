"""Caption generation: greedy and beam search over decoder steps.

``model`` is anything with ``logits(ids, memory, memory_mask, training=False)``
returning ``[N, T, V]`` logits, so tests can plug in degenerate models.
``<PAD>`` and ``<SOS>`` are never generated.  Prefixes are re-run in full at
every step (no key/value cache).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from captioner import numerics as nx
from captioner.errors import ConfigError
from captioner.numerics import Tensor
from captioner.vocab import EOS, PAD, SOS

BANNED = (PAD, SOS)
LEN_NORMS = ("none", "mean")


@dataclass(frozen=True)
class Beam:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool

    def score(self, len_norm: str = "mean") -> float:
        if len_norm == "none" or not self.tokens:
            return self.log_prob
        return self.log_prob / len(self.tokens)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = logits.astype(np.float64)
    logits[..., list(BANNED)] = -np.inf
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _tile(memory: Tensor, memory_mask, n: int):
    mem = Tensor(np.broadcast_to(memory.data, (n,) + memory.shape[1:]))
    mask = None if memory_mask is None else np.broadcast_to(np.asarray(memory_mask), (n,) + np.shape(memory_mask)[1:])
    return mem, mask


def step_log_probs(model, prefixes: np.ndarray, memory: Tensor, memory_mask=None) -> np.ndarray:
    """Next-token log-probabilities ``[N, V]`` for ``N`` prefixes sharing one memory."""
    prefixes = np.asarray(prefixes, dtype=np.int64)
    mem, mask = _tile(memory, memory_mask, len(prefixes))
    with nx.no_grad():
        logits = model.logits(prefixes, mem, mask, training=False)
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return _log_softmax(data[:, -1, :])


def sequence_log_probs(model, tokens, memory: Tensor, memory_mask=None) -> np.ndarray:
    """Per-token log-probabilities of a whole sequence from one teacher-forced pass."""
    tokens = list(tokens)
    ids = np.asarray([[SOS] + tokens[:-1]], dtype=np.int64)
    with nx.no_grad():
        logits = model.logits(ids, memory, memory_mask, training=False)
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    logp = _log_softmax(data[0])
    return logp[np.arange(len(tokens)), tokens]


def greedy_decode(model, memory: Tensor, memory_mask=None, max_len: int = 24) -> list[int]:
    """Argmax at each step until ``<EOS>`` (kept in the output) or ``max_len`` tokens."""
    tokens: list[int] = []
    for _ in range(max_len):
        logp = step_log_probs(model, np.asarray([[SOS] + tokens]), memory, memory_mask)[0]
        tok = int(np.argmax(logp))
        tokens.append(tok)
        if tok == EOS:
            break
    return tokens


def beam_candidates(
    model, memory: Tensor, memory_mask=None, width: int = 3, max_len: int = 24
) -> list[Beam]:
    """Every beam retired during the search, in retirement order."""
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    live = [Beam((), 0.0, False)]
    finished: list[Beam] = []
    for step in range(max_len):
        prefixes = np.asarray([[SOS, *b.tokens] for b in live], dtype=np.int64)
        logp = step_log_probs(model, prefixes, memory, memory_mask)
        vocab = logp.shape[1]
        totals = (np.asarray([b.log_prob for b in live])[:, None] + logp).reshape(-1)
        order = np.argsort(-totals, kind="stable")
        order = order[np.isfinite(totals[order])][:width]
        next_live = []
        for flat in order:
            beam = live[flat // vocab]
            tok = int(flat % vocab)
            tokens = beam.tokens + (tok,)
            done = tok == EOS or len(tokens) >= max_len
            nb = Beam(tokens, float(totals[flat]), done)
            (finished if done else next_live).append(nb)
        live = next_live
        if not live:
            break
    return finished


def beam_search(
    model,
    memory: Tensor,
    memory_mask=None,
    width: int = 3,
    max_len: int = 24,
    len_norm: str = "mean",
) -> list[int]:
    """Best retired beam under ``len_norm`` (``mean`` = log-prob / length)."""
    if len_norm not in LEN_NORMS:
        raise ConfigError(f"decode.len_norm must be one of {LEN_NORMS}, got {len_norm!r}")
    pool = beam_candidates(model, memory, memory_mask, width, max_len)
    best = max(pool, key=lambda b: b.score(len_norm))
    return list(best.tokens)
