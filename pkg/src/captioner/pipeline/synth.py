"""Procedural toy corpus: tones with template captions.

Each clip is a steady, beeping or warbling sine at a low, medium or high
pitch, followed by silence, white noise or a train of clicks.  Captions read e.g. "a beeping high tone followed by
white noise".  Sentence embeddings for captions and labels come from a fixed
bag-of-words hash embedding, standing in for an external sentence encoder.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from captioner.frontend import AudioClip, write_wav
from captioner.pipeline.config import dump_config
from captioner.pipeline.data import ManifestEntry, write_manifest
from captioner.textguide import SentenceEmbedding, write_embeddings
from captioner.vocab import tokenize

PITCHES = {"low": 250.0, "medium": 1000.0, "high": 4000.0}
PATTERNS = ("steady", "beeping", "warbling")
ENDINGS = ("silence", "white noise", "clicks")
EXTRA_PATTERNS = ("pulsing",)
LABELS = ("low tone", "medium tone", "high tone", "beeping", "warbling", "white noise", "silence", "clicks")

DESK_CONFIG = {
    "seed": 0,
    "data.finetune": "train.jsonl",
    "data.pretrain": "train.jsonl",
    "data.labels": "labels.txt",
    "data.caption_emb": "captions.emb",
    "data.label_emb": "labels.emb",
    "data.vocab": "prepared/vocab.txt",
    "data.tagger": "prepared/tagger",
    "data.mel_dir": "prepared/mels",
    "out": "run",
    "patch.max_frames": 1875,
    "patchout.freq": 4,
    "train.batch_size": 10,
    "model.decoder_dropout": 0.1,
    "specaug.max_time_width": 10,
    "stage.pretrain_frozen.epochs": 80,
    "stage.pretrain_frozen.lr": 1e-4,
    "stage.pretrain_frozen.patchout.time": 2,
    "stage.pretrain_unfrozen.epochs": 30,
    "stage.pretrain_unfrozen.lr": 1e-5,
    "stage.pretrain_unfrozen.patchout.time": 2,
    "stage.finetune.epochs": 90,
    "stage.finetune.lr_start": 1e-5,
    "stage.finetune.lr_end": 1e-4,
    "stage.finetune.warmup_steps": 50,
    "stage.finetune.patchout.time": 3,
    "tagger.epochs": 100,
    "tagger.lr": 1e-2,
    "tagger.batch_size": 10,
}


@dataclass
class ClipSpec:
    pitch: str
    pattern: str
    ending: str

    @property
    def caption(self) -> str:
        return f"a {self.pattern} {self.pitch} tone followed by {self.ending}"


def render(spec: ClipSpec, rng: np.random.Generator, duration: float = 2.0, sample_rate: int = 32000) -> AudioClip:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    split = int(n * rng.uniform(0.55, 0.65))
    freq = PITCHES[spec.pitch] * rng.uniform(0.95, 1.05)
    if spec.pattern == "warbling":
        phase = 2 * np.pi * np.cumsum(freq * (1 + 0.1 * np.sin(2 * np.pi * 6 * t))) / sample_rate
        tone = np.sin(phase)
    else:
        tone = np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    if spec.pattern in ("beeping", "pulsing"):
        rate = 3.0 if spec.pattern == "beeping" else 8.0
        tone = tone * (np.sin(2 * np.pi * rate * t) > 0)
    out = np.zeros(n)
    out[:split] = rng.uniform(0.4, 0.6) * tone[:split]
    if spec.ending == "white noise":
        out[split:] = rng.uniform(0.2, 0.3) * rng.standard_normal(n - split)
    elif spec.ending == "clicks":
        period = int(sample_rate / rng.uniform(9.0, 11.0))
        out[split::period] = rng.uniform(0.6, 0.9)
    out += 1e-3 * rng.standard_normal(n)
    return AudioClip(np.clip(out, -1.0, 1.0), sample_rate)


def bag_of_words(text: str, dim: int = 32) -> np.ndarray:
    """Sum of per-word Gaussian vectors seeded by the word's CRC32."""
    vec = np.zeros(dim)
    for word in tokenize(text):
        vec += np.random.default_rng(zlib.crc32(word.encode())).standard_normal(dim)
    return vec


def all_specs(patterns=PATTERNS) -> list[ClipSpec]:
    return [ClipSpec(p, pat, e) for pat in patterns for p in PITCHES for e in ENDINGS]


def generate(out_dir, n: int = 50, seed: int = 0, duration: float = 2.0, extra: int = 0, emb_dim: int = 32) -> Path:
    """Write WAVs, ``train.jsonl``, label and embedding files, and ``run.toml``.

    With ``extra > 0`` a ``pretrain.jsonl`` adds clips whose captions use words
    missing from the base split.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    specs = all_specs()

    def make(prefix: str, count: int, pool: list[ClipSpec]) -> list[ManifestEntry]:
        entries = []
        for i in range(count):
            spec = pool[i % len(pool)] if i < len(pool) else pool[int(rng.integers(len(pool)))]
            name = f"{prefix}_{i:03d}"
            rel = f"audio/{name}.wav"
            write_wav(out / rel, render(spec, rng, duration))
            entries.append(ManifestEntry(id=name, clip=rel, captions=[spec.caption]))
        return entries

    base = make("clip", n, specs)
    write_manifest(out / "train.jsonl", base)
    config = dict(DESK_CONFIG)
    if extra:
        more = make("extra", extra, all_specs(EXTRA_PATTERNS) + specs)
        write_manifest(out / "pretrain.jsonl", base + more)
        config["data.pretrain"] = "pretrain.jsonl"
        captions = sorted({c for e in base + more for c in e.captions})
    else:
        captions = sorted({c for e in base for c in e.captions})
    (out / "labels.txt").write_text("\n".join(LABELS) + "\n")
    write_embeddings(out / "captions.emb", [SentenceEmbedding(c, bag_of_words(c, emb_dim)) for c in captions])
    write_embeddings(out / "labels.emb", [SentenceEmbedding(l, bag_of_words(l, emb_dim)) for l in LABELS])
    (out / "run.toml").write_text(dump_config(config))
    return out
