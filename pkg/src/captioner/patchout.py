"""Patch extraction: conv feature map, decoupled positional embeddings,
structured Patchout, and flattening to the encoder token sequence.

Feature maps are batched, ``[B, d, F_m, T_m]``.  Token order after flattening
is frequency-major, time-minor: ``(f0,t0), (f0,t1), ..., (f1,t0), ...``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from captioner import numerics as nx
from captioner.errors import ConfigError, DimensionError, InputError
from captioner.numerics import Module, Parameter, Tensor


@dataclass
class PatchoutConfig:
    kernel: int = 16
    stride: int = 10
    embed_dim: int = 64
    p_f: int = 0
    p_t: int = 0
    training: bool = False

    def __post_init__(self):
        if self.kernel <= 0 or self.stride <= 0 or self.embed_dim <= 0:
            raise ConfigError("kernel, stride and embed_dim must be positive")
        if self.p_f < 0 or self.p_t < 0:
            raise ConfigError("Patchout counts must be non-negative")


def grid_size(extent: int, kernel: int = 16, stride: int = 10) -> int:
    """Number of valid conv positions along one axis."""
    if extent < kernel:
        raise InputError(f"extent {extent} smaller than kernel {kernel}")
    return (extent - kernel) // stride + 1


@dataclass
class FeatureMap:
    values: Tensor  # [B, d, F_m, T_m]

    @property
    def n_freq(self) -> int:
        return self.values.shape[2]

    @property
    def n_time(self) -> int:
        return self.values.shape[3]


@dataclass
class PatchSequence:
    tokens: Tensor  # [B, L, d]
    kept_freq: np.ndarray
    kept_time: np.ndarray

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


class PositionalEmbeddings(Module):
    """Learnable frequency ``[d, F_max, 1]`` and time ``[d, 1, T_max]`` tables."""

    def __init__(self, dim: int, max_freq: int, max_time: int, rng: np.random.Generator, std: float = 0.02):
        self.freq = Parameter(rng.normal(0.0, std, size=(dim, max_freq, 1)))
        self.time = Parameter(rng.normal(0.0, std, size=(dim, 1, max_time)))

    @property
    def max_freq(self) -> int:
        return self.freq.shape[1]

    @property
    def max_time(self) -> int:
        return self.time.shape[2]


def extract_feature_map(mel, weight: Tensor, bias: Tensor | None, cfg: PatchoutConfig) -> FeatureMap:
    """``mel`` is ``[F, T]`` or ``[B, F, T]`` (array or tensor)."""
    x = mel if isinstance(mel, Tensor) else Tensor(np.asarray(mel, dtype=weight.dtype))
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3:
        raise DimensionError(f"expected [B, F, T] spectrogram batch, got {x.shape}")
    if x.shape[1] < cfg.kernel or x.shape[2] < cfg.kernel:
        raise InputError(f"spectrogram {x.shape[1]}x{x.shape[2]} is smaller than the {cfg.kernel}x{cfg.kernel} kernel")
    x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
    return FeatureMap(nx.conv2d_valid(x, weight, bias, stride=cfg.stride))


def add_positional(fmap: FeatureMap, pos: PositionalEmbeddings) -> FeatureMap:
    f, t = fmap.n_freq, fmap.n_time
    if f > pos.max_freq or t > pos.max_time:
        raise ConfigError(
            f"feature grid {f}x{t} exceeds positional tables {pos.max_freq}x{pos.max_time}"
        )
    freq = pos.freq[:, :f, :]
    time = pos.time[:, :, :t]
    return FeatureMap(fmap.values + freq + time)


def _flatten(values: Tensor, kept_freq: np.ndarray, kept_time: np.ndarray) -> PatchSequence:
    b, d = values.shape[:2]
    if len(kept_freq) != values.shape[2] or len(kept_time) != values.shape[3]:
        values = values[:, :, kept_freq[:, None], kept_time[None, :]]
    tokens = values.transpose(0, 2, 3, 1).reshape(b, len(kept_freq) * len(kept_time), d)
    return PatchSequence(tokens, kept_freq, kept_time)


def choose_kept(n: int, drop: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices surviving the removal of ``drop`` distinct positions."""
    if not 0 <= drop < n:
        raise ConfigError(f"cannot drop {drop} of {n} positions")
    if drop == 0:
        return np.arange(n)
    removed = rng.choice(n, size=drop, replace=False)
    return np.setdiff1d(np.arange(n), removed)


def apply_patchout(fmap: FeatureMap, p_f: int, p_t: int, rng: np.random.Generator) -> PatchSequence:
    """Delete ``p_f`` whole frequency rows and ``p_t`` whole time columns.

    The same rows and columns are dropped for every item in the batch.
    """
    if p_f >= fmap.n_freq or p_t >= fmap.n_time:
        raise ConfigError(
            f"Patchout ({p_f}, {p_t}) must leave at least one row and column of {fmap.n_freq}x{fmap.n_time}"
        )
    kept_freq = choose_kept(fmap.n_freq, p_f, rng)
    kept_time = choose_kept(fmap.n_time, p_t, rng)
    return _flatten(fmap.values, kept_freq, kept_time)


def flatten_eval(fmap: FeatureMap) -> PatchSequence:
    return _flatten(fmap.values, np.arange(fmap.n_freq), np.arange(fmap.n_time))


def unflatten(seq: PatchSequence, n_freq: int, n_time: int, fill: float = 0.0) -> np.ndarray:
    """Scatter tokens back to a ``[B, d, n_freq, n_time]`` grid (dropped cells = ``fill``)."""
    tokens = seq.tokens.data
    b, _, d = tokens.shape
    grid = np.full((b, d, n_freq, n_time), fill, dtype=tokens.dtype)
    block = tokens.reshape(b, len(seq.kept_freq), len(seq.kept_time), d).transpose(0, 3, 1, 2)
    grid[:, :, seq.kept_freq[:, None], seq.kept_time[None, :]] = block
    return grid


class PatchEmbed(Module):
    """Conv patch extractor with its positional tables."""

    def __init__(self, dim: int, n_mels: int, max_frames: int, rng: np.random.Generator, kernel: int = 16, stride: int = 10):
        self.kernel = kernel
        self.stride = stride
        fan_in = kernel * kernel
        self.weight = Parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(dim, 1, kernel, kernel)))
        self.bias = Parameter(np.zeros(dim))
        self.pos = PositionalEmbeddings(dim, grid_size(n_mels, kernel, stride), grid_size(max_frames, kernel, stride), rng)

    def config(self, p_f: int = 0, p_t: int = 0, training: bool = False) -> PatchoutConfig:
        return PatchoutConfig(self.kernel, self.stride, self.weight.shape[0], p_f, p_t, training)

    def __call__(self, mel, p_f: int = 0, p_t: int = 0, rng: np.random.Generator | None = None, training: bool = False) -> PatchSequence:
        cfg = self.config(p_f, p_t, training)
        fmap = add_positional(extract_feature_map(mel, self.weight, self.bias, cfg), self.pos)
        if training and (p_f or p_t):
            if rng is None:
                raise ConfigError("Patchout in training mode needs an rng")
            return apply_patchout(fmap, p_f, p_t, rng)
        return flatten_eval(fmap)
