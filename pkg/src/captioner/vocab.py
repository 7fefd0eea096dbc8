"""Caption tokenization and the word/id vocabulary."""

from __future__ import annotations

import unicodedata
from pathlib import Path
from typing import Iterable

from captioner.errors import InputError

PAD, SOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<PAD>", "<SOS>", "<EOS>", "<UNK>")


def _strip_punctuation(text: str) -> str:
    return "".join(" " if unicodedata.category(ch).startswith("P") else ch for ch in text)


def tokenize(caption: str) -> list[str]:
    """Lowercase, replace Unicode punctuation with spaces, split on whitespace."""
    tokens = _strip_punctuation(caption.lower()).split()
    if not tokens:
        raise InputError(f"caption {caption!r} is empty after normalisation")
    return tokens


class Vocabulary:
    """Ids 0..3 are always ``<PAD> <SOS> <EOS> <UNK>``; words follow in sorted order."""

    def __init__(self, words: Iterable[str]):
        self.itos: list[str] = list(RESERVED)
        for w in words:
            if w in RESERVED:
                continue
            self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise InputError("vocabulary words must be unique")

    @classmethod
    def build(cls, captions: Iterable[str]) -> "Vocabulary":
        words: set[str] = set()
        count = 0
        for caption in captions:
            words.update(tokenize(caption))
            count += 1
        if count == 0:
            raise InputError("cannot build a vocabulary from an empty corpus")
        return cls(sorted(words))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def word_ids(self, words: Iterable[str]) -> list[int]:
        return [self.stoi.get(w, UNK) for w in words]

    def encode(self, caption: str) -> list[int]:
        """``<SOS> ids... <EOS>``; unknown words become ``<UNK>``."""
        return [SOS] + self.word_ids(tokenize(caption)) + [EOS]

    def decode(self, ids: Iterable[int]) -> list[str]:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, SOS):
                continue
            words.append(self.itos[i])
        return words

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[len(RESERVED):]) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(line for line in Path(path).read_text().splitlines() if line)
