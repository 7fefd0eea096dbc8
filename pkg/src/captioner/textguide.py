"""Guiding text: pick tagger labels and embed their words for the encoder.

Training draws labels with nucleus (top-p) sampling from the tagger's
distribution; inference takes the most probable label.  The tagger itself is
fitted on caption/label pairs chosen by cosine similarity of externally
computed sentence embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from captioner import numerics as nx
from captioner.errors import ConfigError, InputError
from captioner.numerics import Module, Parameter, Tensor
from captioner.patchout import grid_size
from captioner.vocab import Vocabulary, tokenize

NUCLEUS_TOL = 1e-12


class LabelVocabulary:
    def __init__(self, labels: Sequence[str]):
        labels = [str(x) for x in labels]
        if not labels:
            raise InputError("label vocabulary is empty")
        if len(set(labels)) != len(labels):
            raise InputError("labels must be unique")
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> str:
        return self.labels[i]

    def word_ids(self, index: int, vocab: Vocabulary) -> list[int]:
        return vocab.word_ids(tokenize(self.labels[index]))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.labels) + "\n")

    @classmethod
    def load(cls, path) -> "LabelVocabulary":
        return cls([line for line in Path(path).read_text().splitlines() if line.strip()])


@dataclass
class SentenceEmbedding:
    text: str
    vector: np.ndarray


def read_embeddings(path) -> list[SentenceEmbedding]:
    """Lines of ``<text>\\t<v1> <v2> ... <vD>``."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            text, values = line.rsplit("\t", 1)
            vector = np.array([float(v) for v in values.split()])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: expected '<text>\\t<floats>'") from exc
        out.append(SentenceEmbedding(text, vector))
    return out


def write_embeddings(path, items: Sequence[SentenceEmbedding]) -> None:
    lines = [e.text + "\t" + " ".join(f"{v:.8g}" for v in e.vector) for e in items]
    Path(path).write_text("\n".join(lines) + "\n")


def normalize_scores(scores) -> np.ndarray:
    """Multi-label sigmoid scores -> a distribution summing to one."""
    scores = np.asarray(scores, dtype=np.float64)
    total = scores.sum()
    if np.any(scores < 0) or total <= 0:
        raise InputError("scores must be non-negative with positive mass")
    return scores / total


def _check_dist(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise InputError("distribution must be a non-empty vector")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise InputError("distribution has negative or non-finite entries")
    total = probs.sum()
    if total <= 0:
        raise InputError("distribution is all zero")
    if abs(total - 1.0) > 1e-6:
        raise InputError(f"distribution sums to {total}, not 1")
    return probs


def nucleus(probs, p: float) -> np.ndarray:
    """Label indices of the smallest descending-probability prefix with mass >= p.

    Equal probabilities keep their index order.
    """
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"top-p must lie in (0, 1], got {p}")
    probs = _check_dist(probs)
    order = np.argsort(-probs, kind="stable")
    order = order[probs[order] > 0]
    cum = np.cumsum(probs[order])
    size = int(np.searchsorted(cum, p - NUCLEUS_TOL, side="left")) + 1
    return order[: min(size, len(order))]


def nucleus_probs(probs, p: float) -> np.ndarray:
    """Full-length vector: renormalised inside the nucleus, exactly 0 outside."""
    probs = np.asarray(probs, dtype=np.float64)
    keep = nucleus(probs, p)
    out = np.zeros_like(probs)
    out[keep] = probs[keep] / probs[keep].sum()
    return out


def nucleus_sample(probs, p: float, rng: np.random.Generator) -> int:
    keep = nucleus(probs, p)
    weights = np.asarray(probs, dtype=np.float64)[keep]
    u = rng.random() * weights.sum()
    pos = int(np.searchsorted(np.cumsum(weights), u, side="right"))
    return int(keep[min(pos, len(keep) - 1)])


def argmax_label(probs) -> int:
    probs = np.asarray(probs)
    if probs.size == 0:
        raise InputError("empty distribution")
    return int(np.argmax(probs))


def sample_labels(probs, p: float, count: int, rng: np.random.Generator, training: bool = True) -> list[int]:
    """``count`` distinct labels: nucleus draws in training, top-``count`` otherwise.

    Each further draw removes the labels already taken and renormalises.
    """
    probs = _check_dist(probs)
    count = min(count, int((probs > 0).sum()))
    if not training:
        return [int(i) for i in np.argsort(-probs, kind="stable")[:count]]
    chosen: list[int] = []
    current = probs.copy()
    for _ in range(count):
        idx = nucleus_sample(current, p, rng)
        chosen.append(idx)
        current[idx] = 0.0
        if current.sum() <= 0:
            break
        current = current / current.sum()
    return chosen


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def pair_labels(
    captions: Sequence[SentenceEmbedding], labels: Sequence[SentenceEmbedding]
) -> list[tuple[int, int, float]]:
    """Most cosine-similar label for each caption, ties to the lowest label index."""
    if not captions or not labels:
        raise InputError("need at least one caption and one label embedding")
    dims = {e.vector.shape for e in captions} | {e.vector.shape for e in labels}
    if len(dims) != 1:
        raise InputError(f"embedding dimensions differ: {sorted(dims)}")
    for e in list(captions) + list(labels):
        if not np.linalg.norm(e.vector) > 0:
            raise InputError(f"zero-norm embedding for {e.text!r}")
    sims = cosine_matrix(np.stack([e.vector for e in captions]), np.stack([e.vector for e in labels]))
    best = np.argmax(sims, axis=1)
    return [(i, int(j), float(sims[i, j])) for i, j in enumerate(best)]


def bce_loss(logits: Tensor, target) -> Tensor:
    target = np.asarray(target)
    if target.shape != logits.shape:
        raise InputError(f"target shape {target.shape} != logits shape {logits.shape}")
    if not np.isin(target, (0, 1)).all():
        raise InputError("BCE targets must be 0 or 1")
    return nx.bce_with_logits(logits, target)


def embed_guiding_text(label_index: int, labels: LabelVocabulary, vocab: Vocabulary, table: Tensor) -> Tensor:
    """``[W, d]`` rows of ``table`` for the label's words, in order."""
    ids = labels.word_ids(label_index, vocab)
    return nx.embedding(table, np.asarray(ids))


def guide_token_ids(label_indices: Sequence[int], labels: LabelVocabulary, vocab: Vocabulary) -> list[int]:
    ids: list[int] = []
    for i in label_indices:
        ids.extend(labels.word_ids(i, vocab))
    return ids


class Tagger(Module):
    """Conv patches -> GELU -> mean pool -> linear label logits."""

    def __init__(self, n_labels: int, rng: np.random.Generator, dim: int = 32, kernel: int = 16, stride: int = 10):
        self.kernel = kernel
        self.stride = stride
        self.weight = Parameter(rng.normal(0.0, 1.0 / kernel, size=(dim, 1, kernel, kernel)))
        self.bias = Parameter(np.zeros(dim))
        self.head_w = Parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, n_labels)))
        self.head_b = Parameter(np.zeros(n_labels))

    @property
    def n_labels(self) -> int:
        return self.head_b.shape[0]

    def logits(self, mels) -> Tensor:
        x = Tensor(np.asarray(mels, dtype=self.weight.dtype))
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        grid_size(x.shape[1], self.kernel, self.stride)
        grid_size(x.shape[2], self.kernel, self.stride)
        fmap = nx.gelu(nx.conv2d_valid(x.reshape(x.shape[0], 1, *x.shape[1:]), self.weight, self.bias, self.stride))
        pooled = fmap.mean(axis=(2, 3))
        return pooled @ self.head_w + self.head_b

    def predict(self, mels) -> np.ndarray:
        """Per-clip sampling distributions, ``[B, n_labels]``."""
        with nx.no_grad():
            z = self.logits(mels).data.astype(np.float64)
        scores = 1.0 / (1.0 + np.exp(-z))
        return scores / scores.sum(axis=1, keepdims=True)


def train_tagger(
    tagger: Tagger,
    mels: Sequence[np.ndarray],
    targets: np.ndarray,
    rng: np.random.Generator,
    epochs: int = 1,
    lr: float = 1e-5,
    batch_size: int = 32,
) -> list[float]:
    """Fit with BCE on multi-hot targets; returns mean loss per epoch.

    All spectrograms in ``mels`` must share a shape.
    """
    data = np.stack(mels)
    state = nx.AdamState(lr=lr)
    params = dict(tagger.named_parameters())
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss = bce_loss(tagger.logits(data[idx]), targets[idx])
            nx.backward(loss)
            nx.adam_step(params, state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return history
