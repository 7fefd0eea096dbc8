"""Raw audio to log-mel spectrogram.

Defaults: 32 kHz audio, 1024-point periodic Hann window, hop 512 (50%
overlap), 128 HTK-scale mel bands over 0-16 kHz, power spectrum,
``log(x + 1e-10)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window

from captioner.errors import ConfigError, InputError


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [mel_bins, frames]
    frame_hop: int = 512

    @property
    def mel_bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass
class FrontendConfig:
    sample_rate: int = 32000
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 16000.0
    floor_eps: float = 1e-10


def read_wav(path) -> AudioClip:
    """16-bit PCM or 32-bit float WAV; multichannel input is averaged to mono."""
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, OSError) as exc:
        raise InputError(f"{path}: cannot read WAV ({exc})") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InputError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip, pcm16: bool = True) -> None:
    samples = np.clip(clip.samples, -1.0, 1.0)
    if pcm16:
        data = np.round(samples * 32767.0).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(str(path), clip.sample_rate, data)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resampling to ``round(len * target / source)`` samples."""
    if target_rate <= 0:
        raise ConfigError(f"target rate must be positive, got {target_rate}")
    n = len(clip.samples)
    if n == 0:
        raise InputError("cannot resample an empty clip")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    n_out = int(round(n * target_rate / clip.sample_rate))
    positions = np.arange(n_out) * (clip.sample_rate / target_rate)
    out = np.interp(positions, np.arange(n), clip.samples)
    return AudioClip(out, target_rate)


def stft_mag(samples: np.ndarray, n_fft: int = 1024, hop: int = 512) -> np.ndarray:
    """Hann-windowed magnitude spectrogram, ``[n_fft // 2 + 1, frames]``, no padding."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < n_fft:
        raise InputError(f"clip has {len(samples)} samples, shorter than one {n_fft}-point window")
    frames = sliding_window_view(samples, n_fft)[::hop]
    window = get_window("hann", n_fft, fftbins=True)
    return np.abs(np.fft.rfft(frames * window, axis=1)).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = 128,
    n_fft: int = 1024,
    sample_rate: int = 32000,
    f_min: float = 0.0,
    f_max: float = 16000.0,
) -> np.ndarray:
    """Triangular HTK filters, ``[n_mels, n_fft // 2 + 1]``, peak weight 1."""
    if n_mels < 1:
        raise ConfigError(f"n_mels must be >= 1, got {n_mels}")
    if not 0.0 <= f_min < f_max <= sample_rate / 2:
        raise ConfigError(f"need 0 <= f_min < f_max <= {sample_rate / 2}, got {f_min}, {f_max}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (centre - lower)
    falling = (upper - bins) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_centres(n_mels: int = 128, f_min: float = 0.0, f_max: float = 16000.0) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


def log_mel(
    spec: np.ndarray,
    n_mels: int = 128,
    f_min: float = 0.0,
    f_max: float = 16000.0,
    sample_rate: int = 32000,
    floor_eps: float = 1e-10,
    hop: int = 512,
) -> MelSpectrogram:
    spec = np.asarray(spec, dtype=np.float64)
    n_fft = 2 * (spec.shape[0] - 1)
    bank = mel_filterbank(n_mels, n_fft, sample_rate, f_min, f_max)
    return MelSpectrogram(np.log(bank @ (spec * spec) + floor_eps), frame_hop=hop)


def featurize(clip: AudioClip, cfg: FrontendConfig | None = None) -> MelSpectrogram:
    cfg = cfg or FrontendConfig()
    if clip.sample_rate != cfg.sample_rate:
        clip = resample(clip, cfg.sample_rate)
    spec = stft_mag(clip.samples, cfg.n_fft, cfg.hop)
    return log_mel(spec, cfg.n_mels, cfg.f_min, cfg.f_max, cfg.sample_rate, cfg.floor_eps, cfg.hop)


def featurize_file(path, cfg: FrontendConfig | None = None) -> MelSpectrogram:
    return featurize(read_wav(Path(path)), cfg)


def standardize(values: np.ndarray) -> np.ndarray:
    """Per-clip zero mean / unit variance; a constant clip maps to zeros."""
    values = np.asarray(values, dtype=np.float64)
    std = values.std()
    return (values - values.mean()) / (std if std > 0 else 1.0)
