"""Caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from captioner.errors import ConfigError
from captioner.vocab import _strip_punctuation

Tokens = Sequence[str]


def normalize(caption: str) -> list[str]:
    """Training tokenization rules, but an empty caption yields ``[]``."""
    return _strip_punctuation(caption.lower()).split()


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def modified_precision(candidate: Tokens, references: Sequence[Tokens], n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-gram count) for one order."""
    cand = ngrams(candidate, n)
    max_ref: Counter = Counter()
    for ref in references:
        for gram, count in ngrams(ref, n).items():
            max_ref[gram] = max(max_ref[gram], count)
    matched = sum(min(count, max_ref[gram]) for gram, count in cand.items())
    return matched, sum(cand.values())


def _closest_ref_length(c: int, references: Sequence[Tokens]) -> int:
    return min((abs(len(r) - c), len(r)) for r in references)[1]


def corpus_bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], n: int = 4) -> float:
    """Corpus BLEU-n: pooled clipped precisions, uniform geometric mean, brevity penalty."""
    if not 1 <= n <= 4:
        raise ConfigError(f"BLEU order must be 1..4, got {n}")
    matched = np.zeros(n)
    total = np.zeros(n)
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        c_len += len(cand)
        if refs:
            r_len += _closest_ref_length(len(cand), refs)
        for k in range(1, n + 1):
            m, t = modified_precision(cand, refs, k)
            matched[k - 1] += m
            total[k - 1] += t
    if c_len == 0 or np.any(total == 0) or np.any(matched == 0):
        return 0.0
    log_p = np.log(matched / total).mean()
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return float(bp * math.exp(log_p))


def bleu_n(candidate: Tokens, references: Sequence[Tokens], n: int) -> float:
    return corpus_bleu([candidate], [references], n)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta: float = 1.2) -> float:
    """Best LCS F-measure over the references."""
    best = 0.0
    if not candidate:
        return best
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        best = max(best, (1 + beta**2) * p * r / (r + beta**2 * p))
    return best


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------


class CiderD:
    """CIDEr-D with document frequencies taken from a reference corpus.

    Weights are ``tf * (log N - log max(1, df))``.  A single-document corpus
    has no document-frequency information at all, so it uses unit idf.
    """

    def __init__(self, corpus: Sequence[Sequence[Tokens]], n: int = 4, sigma: float = 6.0):
        if not corpus:
            raise ConfigError("CIDEr needs a non-empty reference corpus")
        self.n = n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in corpus:
            self.df.update({g for ref in refs for k in range(1, n + 1) for g in ngrams(ref, k)})
        self.log_n = math.log(len(corpus))
        self.unit_idf = len(corpus) == 1

    def _vec(self, tokens: Tokens):
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            vec = {}
            for gram, tf in ngrams(tokens, k).items():
                weight = 1.0 if self.unit_idf else self.log_n - math.log(max(1.0, self.df[gram]))
                vec[gram] = tf * weight
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms, len(tokens)

    def _sim(self, hyp, ref) -> np.ndarray:
        (vh, nh, lh), (vr, nr, lr) = hyp, ref
        penalty = math.exp(-((lh - lr) ** 2) / (2 * self.sigma**2))
        out = np.zeros(self.n)
        for k in range(self.n):
            val = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
            if nh[k] != 0 and nr[k] != 0:
                val /= nh[k] * nr[k]
            out[k] = val * penalty
        return out

    def score(self, candidate: Tokens, references: Sequence[Tokens]) -> float:
        if not references:
            return 0.0
        hyp = self._vec(candidate)
        total = sum(self._sim(hyp, self._vec(ref)) for ref in references)
        return float(np.mean(total) / len(references) * 10.0)


def cider(
    candidates: Sequence[Tokens],
    references: Sequence[Sequence[Tokens]],
    corpus: Sequence[Sequence[Tokens]] | None = None,
) -> tuple[float, list[float]]:
    """Mean CIDEr-D and per-item scores; ``corpus`` defaults to ``references``."""
    scorer = CiderD(references if corpus is None else corpus)
    scores = [scorer.score(c, r) for c, r in zip(candidates, references)]
    return (float(np.mean(scores)) if scores else 0.0), scores


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def table(self) -> str:
        rows = [("BLEU-1", self.bleu1), ("BLEU-2", self.bleu2), ("BLEU-3", self.bleu3),
                ("BLEU-4", self.bleu4), ("ROUGE-L", self.rouge_l), ("CIDEr", self.cider)]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value:8.4f}" for name, value in rows)


def evaluate(predictions: Mapping[str, str], references: Mapping[str, Sequence[str]]) -> MetricReport:
    """Score predicted captions against reference sets keyed by the same ids."""
    missing = sorted(set(predictions) - set(references))
    if missing:
        raise ConfigError(f"no references for ids {missing[:5]}")
    ids = sorted(predictions)
    cands = [normalize(predictions[i]) for i in ids]
    refs = [[normalize(r) for r in references[i]] for i in ids]
    bleu = [corpus_bleu(cands, refs, n) for n in range(1, 5)]
    rouge = float(np.mean([rouge_l(c, r) for c, r in zip(cands, refs)])) if ids else 0.0
    cider_score = cider(cands, refs)[0] if ids else 0.0
    return MetricReport(*bleu, rouge, cider_score)
