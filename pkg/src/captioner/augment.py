"""Training-time augmentation: embedding-space Mixup and SpecAugment masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from captioner.errors import ConfigError, InputError

MIXUP_LOSSES = ("dominant", "both_weighted")


@dataclass
class MixupConfig:
    alpha: float = 0.3
    enabled: bool = True
    loss: str = "dominant"
    per_sample: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"mixup alpha must be positive, got {self.alpha}")
        if self.loss not in MIXUP_LOSSES:
            raise ConfigError(f"mixup.loss must be one of {MIXUP_LOSSES}, got {self.loss!r}")


@dataclass
class SpecAugmentConfig:
    n_freq_masks: int = 2
    max_freq_width: int = 8
    n_time_masks: int = 2
    max_time_width: int = 40


def sample_lambda(cfg: MixupConfig, rng: np.random.Generator, size: int | None = None):
    """Draws from ``Beta(alpha, alpha)``: a float, or ``size`` of them."""
    if size is None:
        return float(rng.beta(cfg.alpha, cfg.alpha))
    return rng.beta(cfg.alpha, cfg.alpha, size=size)


def _shape(x) -> tuple[int, ...]:
    return tuple(x.shape)


def mix(a, b, lam):
    """``lam * a + (1 - lam) * b`` for arrays or tensors.

    ``lam`` is a scalar or one weight per row of the leading (batch) axis.
    """
    if _shape(a) != _shape(b):
        raise InputError(f"cannot mix shapes {_shape(a)} and {_shape(b)}")
    lam_arr = np.asarray(lam, dtype=np.float64)
    if not ((lam_arr >= 0.0) & (lam_arr <= 1.0)).all():
        raise InputError(f"lambda must lie in [0, 1], got {lam}")
    if lam_arr.ndim == 0:
        if lam == 1.0:
            return a
        if lam == 0.0:
            return b
        return lam * a + (1.0 - lam) * b
    if lam_arr.ndim != 1 or lam_arr.shape[0] != _shape(a)[0]:
        raise InputError(f"per-row lambda of shape {lam_arr.shape} does not fit batch of {_shape(a)[0]}")
    dtype = getattr(a, "dtype", np.float64)
    w = lam_arr.reshape((-1,) + (1,) * (len(_shape(a)) - 1)).astype(dtype)
    return a * w + b * (1.0 - w)


@dataclass
class MixedPair:
    x: object
    caption_emb: object
    guide_emb: object
    targets_i: np.ndarray | None = None
    targets_j: np.ndarray | None = None
    lam: float | np.ndarray = 1.0

    def loss_targets(self, mode: str = "dominant") -> list[tuple[float | np.ndarray, np.ndarray]]:
        """(weight, unmixed target ids) pairs that enter the loss.

        Weights are scalars, or per-row arrays when ``lam`` is per-row.
        """
        lam = np.asarray(self.lam)
        if mode == "dominant":
            if lam.ndim == 0:
                return [(1.0, self.targets_i if self.lam >= 0.5 else self.targets_j)]
            return [(1.0, np.where((lam >= 0.5)[:, None], self.targets_i, self.targets_j))]
        if mode == "both_weighted":
            if lam.ndim == 0:
                return [(self.lam, self.targets_i), (1.0 - self.lam, self.targets_j)]
            return [(lam, self.targets_i), (1.0 - lam, self.targets_j)]
        raise ConfigError(f"unknown mixup loss mode {mode!r}")


def mixup_pair(x_i, x_j, y_i, y_j, g_i, g_j, lam, targets_i=None, targets_j=None) -> MixedPair:
    """Convex combination of spectrograms, caption embeddings and guide embeddings.

    The token ids in ``targets_*`` are carried through untouched for the loss.
    """
    return MixedPair(
        mix(x_i, x_j, lam),
        mix(y_i, y_j, lam),
        None if g_i is None else mix(g_i, g_j, lam),
        None if targets_i is None else np.asarray(targets_i),
        None if targets_j is None else np.asarray(targets_j),
        lam,
    )


def pad_to(ids: np.ndarray, length: int, pad: int = 0) -> np.ndarray:
    """Right-pad the last axis of an int array to ``length``."""
    ids = np.asarray(ids)
    if ids.shape[-1] > length:
        raise InputError(f"sequence of length {ids.shape[-1]} longer than {length}")
    width = [(0, 0)] * (ids.ndim - 1) + [(0, length - ids.shape[-1])]
    return np.pad(ids, width, constant_values=pad)


def _bands(shape, cfg: SpecAugmentConfig, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    n_freq, n_time = shape
    if cfg.n_freq_masks and cfg.max_freq_width >= n_freq:
        raise ConfigError(f"freq mask width {cfg.max_freq_width} must be below {n_freq}")
    if cfg.n_time_masks and cfg.max_time_width >= n_time:
        raise ConfigError(f"time mask width {cfg.max_time_width} must be below {n_time}")
    bands = []
    plan = (
        (0, cfg.n_freq_masks, cfg.max_freq_width, n_freq),
        (1, cfg.n_time_masks, cfg.max_time_width, n_time),
    )
    for axis, count, max_width, extent in plan:
        if max_width < 1:
            continue
        for _ in range(count):
            width = int(rng.integers(1, max_width + 1))
            start = int(rng.integers(0, extent - width + 1))
            bands.append((axis, start, width))
    return bands


def spec_augment_mask(shape, cfg: SpecAugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Cells overwritten by :func:`spec_augment` for the same rng state."""
    mask = np.zeros(shape, dtype=bool)
    for axis, start, width in _bands(shape, cfg, rng):
        if axis == 0:
            mask[start : start + width, :] = True
        else:
            mask[:, start : start + width] = True
    return mask


def spec_augment(values: np.ndarray, cfg: SpecAugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Bands of width ``1..max`` at random offsets set to the clip mean; bands may overlap."""
    values = np.asarray(values)
    mask = spec_augment_mask(values.shape, cfg, rng)
    out = values.copy()
    out[mask] = values.mean()
    return out
