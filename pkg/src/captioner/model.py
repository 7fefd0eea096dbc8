"""Transformer encoder-decoder for captioning.

Encoder input is ``[CLS] ++ patch tokens ++ guiding-text tokens``.  Blocks are
pre-norm; the encoder has no dropout at all.  The encoder output passes
through a linear + GELU adapter into decoder width and feeds cross-attention
of a causal decoder with sinusoidal positions.
"""

from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields

import numpy as np

from captioner import numerics as nx
from captioner.errors import ConfigError, ContractError, DimensionError, InputError
from captioner.numerics import Module, Parameter, Tensor
from captioner.patchout import PatchEmbed, PatchSequence
from captioner.vocab import PAD


@dataclass
class ModelConfig:
    vocab_size: int = 16
    d: int = 64
    enc_blocks: int = 2
    enc_heads: int = 4
    enc_ffn_dim: int = 256
    dec_blocks: int = 2
    dec_heads: int = 4
    dec_dim: int = 64
    dec_ffn_dim: int = 256
    decoder_dropout: float = 0.2
    label_smoothing: float = 0.1
    max_caption_len: int = 24
    n_mels: int = 128
    max_frames: int = 1875
    kernel: int = 16
    stride: int = 10

    def __post_init__(self):
        if self.d % self.enc_heads:
            raise ConfigError(f"d={self.d} not divisible by enc_heads={self.enc_heads}")
        if self.dec_dim % self.dec_heads:
            raise ConfigError(f"dec_dim={self.dec_dim} not divisible by dec_heads={self.dec_heads}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if not 0.0 <= self.decoder_dropout < 1.0:
            raise ConfigError(f"decoder_dropout must be in [0, 1), got {self.decoder_dropout}")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the four reserved tokens plus one word")

    @classmethod
    def full_scale(cls, vocab_size: int) -> "ModelConfig":
        """Full-size dimensions (used for shape checks only)."""
        return cls(
            vocab_size=vocab_size,
            d=768,
            enc_blocks=12,
            enc_heads=12,
            enc_ffn_dim=3072,
            dec_blocks=6,
            dec_heads=8,
            dec_dim=512,
            dec_ffn_dim=2048,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# FLOP instrumentation
# ---------------------------------------------------------------------------


class FlopCounter:
    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, tag: str, flops: int) -> None:
        self.counts[tag] += int(flops)

    def __getitem__(self, tag: str) -> int:
        return self.counts.get(tag, 0)


_active_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops():
    """Collect attention FLOPs (multiply-add = 2) for code run inside the block."""
    counter = FlopCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _record(tag: str, flops: int) -> None:
    for c in _active_counters:
        c.add(tag, flops)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.w = Parameter(rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out)))
        self.b = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def causal_mask(length: int) -> np.ndarray:
    """``[length, length]`` keep-mask: position t sees positions <= t."""
    return np.tril(np.ones((length, length), dtype=bool))


def attention_bias(mask: np.ndarray, dtype) -> np.ndarray:
    """Keep-mask -> additive logits bias (0 where kept, -inf where masked)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("attention mask leaves a query with no visible key")
    return np.where(mask, 0.0, -np.inf).astype(dtype)


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    heads: int,
    mask: np.ndarray | None = None,
    tag: str = "attention",
) -> Tensor:
    """Scaled dot-product attention on already projected ``[B, T, D]`` inputs.

    ``mask`` is a boolean keep-mask broadcastable to ``[B, heads, Tq, Tk]``.
    Returns the concatenated heads, ``[B, Tq, D]``.
    """
    if query.shape[-1] != key.shape[-1] or key.shape[-1] != value.shape[-1]:
        raise ContractError(f"attention widths differ: {query.shape}, {key.shape}, {value.shape}")
    if key.shape[1] != value.shape[1]:
        raise ContractError("key and value lengths differ")
    width = query.shape[-1]
    if width % heads:
        raise ContractError(f"width {width} not divisible by {heads} heads")
    q, k, v = (_split_heads(t, heads) for t in (query, key, value))
    b, h, tq, dh = q.shape
    tk = k.shape[2]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    _record(f"{tag}.scores", 2 * b * h * tq * tk * dh)
    if mask is not None:
        scores = scores + attention_bias(np.broadcast_to(mask, (b, h, tq, tk)), scores.dtype)
    weights = nx.softmax(scores, axis=-1)
    _record(f"{tag}.values", 2 * b * h * tq * tk * dh)
    return _merge_heads(weights @ v)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, tag: str = "attention", kv_dim: int | None = None):
        kv_dim = kv_dim or dim
        self.heads = heads
        self.tag = tag
        self.q = Linear(dim, dim, rng)
        self.k = Linear(kv_dim, dim, rng)
        self.v = Linear(kv_dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, context: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        context = x if context is None else context
        attended = multi_head_attention(self.q(x), self.k(context), self.v(context), self.heads, mask, self.tag)
        return self.out(attended)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, tag="encoder.self")
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.ffn(self.norm2(x))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [EncoderBlock(cfg.d, cfg.enc_heads, cfg.enc_ffn_dim, rng) for _ in range(cfg.enc_blocks)]
        self.norm = LayerNorm(cfg.d)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, training: bool = False) -> Tensor:
        # ``training`` is accepted for symmetry only: the encoder never drops out.
        mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x)


class Adapter(Module):
    """Linear d -> dec_dim followed by GELU."""

    def __init__(self, d: int, dec_dim: int, rng: np.random.Generator):
        self.proj = Linear(d, dec_dim, rng)

    def __call__(self, hidden: Tensor) -> Tensor:
        return nx.gelu(self.proj(hidden))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates)[:, : dim // 2]
    return table


class DecoderBlock(Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng, tag="decoder.self")
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, tag="decoder.cross")
        self.norm3 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)

    def __call__(self, x, memory, self_mask, cross_mask, rate, rng):
        def drop(t):
            return nx.dropout(t, rate, rng) if rate > 0 else t

        x = x + drop(self.self_attn(self.norm1(x), mask=self_mask))
        x = x + drop(self.cross_attn(self.norm2(x), context=memory, mask=cross_mask))
        return x + drop(self.ffn(self.norm3(x)))


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.vocab_size = cfg.vocab_size
        self.dim = cfg.dec_dim
        self.rate = cfg.decoder_dropout
        self.embed = Parameter(rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.dec_dim)))
        self.blocks = [DecoderBlock(cfg.dec_dim, cfg.dec_heads, cfg.dec_ffn_dim, rng) for _ in range(cfg.dec_blocks)]
        self.norm = LayerNorm(cfg.dec_dim)
        self.head = Linear(cfg.dec_dim, cfg.vocab_size, rng)

    def embed_ids(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise InputError(f"caption ids must lie in [0, {self.vocab_size})")
        return nx.embedding(self.embed, ids)

    def forward_embedded(
        self,
        emb: Tensor,
        memory: Tensor,
        memory_mask: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Logits ``[B, T, vocab]`` from already embedded inputs ``[B, T, dec_dim]``."""
        b, t, _ = emb.shape
        rate = self.rate if training else 0.0
        if rate > 0 and rng is None:
            raise ContractError("decoder dropout in training mode needs an rng")
        x = emb + sinusoidal_positions(t, self.dim).astype(emb.dtype)
        if rate > 0:
            x = nx.dropout(x, rate, rng)
        self_mask = causal_mask(t)[None, None]
        cross_mask = None if memory_mask is None else np.asarray(memory_mask, dtype=bool)[:, None, None, :]
        for block in self.blocks:
            x = block(x, memory, self_mask, cross_mask, rate, rng)
        return self.head(self.norm(x))

    def __call__(self, ids, memory, memory_mask=None, training=False, rng=None) -> Tensor:
        return self.forward_embedded(self.embed_ids(ids), memory, memory_mask, training, rng)

    def load_word_vectors(self, vocab, vectors) -> int:
        """Overwrite embedding rows of words listed in ``vectors`` (text -> array); returns rows set."""
        count = 0
        for word, vec in vectors.items():
            vec = np.asarray(vec, dtype=self.embed.dtype)
            if vec.shape != (self.dim,):
                raise ConfigError(f"word vector for {word!r} has shape {vec.shape}, decoder expects ({self.dim},)")
            if word in vocab:
                self.embed.data[vocab.stoi[word]] = vec
                count += 1
        return count


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def ce_loss(logits: Tensor, targets, smoothing: float = 0.0, weights=None) -> Tensor:
    """Label-smoothed token cross-entropy averaged over non-``<PAD>`` targets.

    Smoothed target: ``(1 - eps) * onehot + eps / V``.  ``weights`` scales each
    row (``[B]``) or position (``[B, T]``); the divisor stays the non-pad count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape}")
    keep = targets != PAD
    n = int(keep.sum())
    if n == 0:
        raise InputError("every target position is padding")
    vocab = logits.shape[-1]
    q = np.full(logits.shape, smoothing / vocab, dtype=logits.dtype)
    np.put_along_axis(q, targets[..., None], (1.0 - smoothing) + smoothing / vocab, axis=-1)
    q *= keep[..., None]
    if weights is not None:
        w = np.asarray(weights, dtype=logits.dtype)
        if w.ndim == 1:
            w = w[:, None]
        q *= np.broadcast_to(w, targets.shape)[..., None]
    logp = nx.log_softmax(logits, axis=-1)
    return -(logp * q).sum() * (1.0 / n)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


ENCODER_PREFIXES = ("patch.", "cls", "encoder.")


class Captioner(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.patch = PatchEmbed(cfg.d, cfg.n_mels, cfg.max_frames, rng, cfg.kernel, cfg.stride)
        self.cls = Parameter(rng.normal(0.0, 0.02, size=(1, 1, cfg.d)))
        self.guide_embed = Parameter(rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d)))
        self.encoder = Encoder(cfg, rng)
        self.adapter = Adapter(cfg.d, cfg.dec_dim, rng)
        self.decoder = Decoder(cfg, rng)

    def encoder_parameters(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.named_parameters() if n.startswith(ENCODER_PREFIXES)}

    def embed_guide(self, guide_ids) -> Tensor:
        """Guide ids ``[B, W]`` -> ``[B, W, d]`` through the trainable guide table."""
        return nx.embedding(self.guide_embed, np.asarray(guide_ids, dtype=np.int64))

    def build_encoder_input(
        self, patches: PatchSequence, guide: Tensor | None = None, guide_mask: np.ndarray | None = None
    ) -> tuple[Tensor, np.ndarray]:
        b, length, d = patches.tokens.shape
        parts = [self.cls * np.ones((b, 1, 1), dtype=patches.tokens.dtype), patches.tokens]
        mask = [np.ones((b, 1 + length), dtype=bool)]
        if guide is not None and guide.shape[1] > 0:
            parts.append(guide)
            mask.append(np.ones(guide.shape[:2], dtype=bool) if guide_mask is None else np.asarray(guide_mask, dtype=bool))
        return nx.concat(parts, axis=1), np.concatenate(mask, axis=1)

    def encode(
        self,
        mel,
        guide_ids=None,
        guide_emb: Tensor | None = None,
        guide_mask: np.ndarray | None = None,
        p_f: int = 0,
        p_t: int = 0,
        rng: np.random.Generator | None = None,
        training: bool = False,
    ) -> tuple[Tensor, np.ndarray]:
        """Spectrogram batch ``[B, F, T]`` + guide -> (adapted memory, memory keep-mask)."""
        patches = self.patch(mel, p_f, p_t, rng, training)
        if guide_emb is None and guide_ids is not None:
            guide_ids = np.asarray(guide_ids, dtype=np.int64)
            if guide_ids.ndim == 1:
                guide_ids = guide_ids[None]
            guide_emb = self.embed_guide(guide_ids)
            if guide_mask is None:
                guide_mask = guide_ids != PAD
        seq, mask = self.build_encoder_input(patches, guide_emb, guide_mask)
        hidden = self.encoder(seq, mask, training)
        return self.adapter(hidden), mask

    def logits(self, ids, memory, memory_mask=None, training=False, rng=None) -> Tensor:
        return self.decoder(ids, memory, memory_mask, training, rng)
