"""Flat dotted-key run configuration.

Config files are TOML with dotted keys (``patch.dim = 64``); nested tables are
flattened back to dotted keys.  ``CAPTIONER_SEED`` overrides ``seed``.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from captioner.errors import ConfigError

STAGES = ("pretrain_frozen", "pretrain_unfrozen", "finetune")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "audio.sample_rate": 32000,
    "audio.n_fft": 1024,
    "audio.hop": 512,
    "audio.n_mels": 128,
    "audio.f_min": 0.0,
    "audio.f_max": 16000.0,
    "audio.floor_eps": 1e-10,
    "patch.kernel": 16,
    "patch.stride": 10,
    "patch.dim": 64,
    "patch.max_frames": 1875,
    "patchout.freq": 4,
    "patchout.time": 0,
    "model.enc_blocks": 2,
    "model.enc_heads": 4,
    "model.enc_ffn_dim": 256,
    "model.dec_blocks": 2,
    "model.dec_heads": 4,
    "model.dec_dim": 64,
    "model.dec_ffn_dim": 256,
    "model.decoder_dropout": 0.2,
    "model.label_smoothing": 0.1,
    "model.max_caption_len": 24,
    "mixup.enabled": True,
    "mixup.alpha": 0.3,
    "mixup.loss": "dominant",
    "mixup.per_sample": True,
    "specaug.enabled": True,
    "specaug.n_freq_masks": 2,
    "specaug.max_freq_width": 8,
    "specaug.n_time_masks": 2,
    "specaug.max_time_width": 40,
    "guide.enabled": True,
    "guide.top_p": 0.9,
    "guide.count": 1,
    "decode.beam": 3,
    "decode.len_norm": "mean",
    "train.batch_size": 32,
    "stage.pretrain_frozen.epochs": 1,
    "stage.pretrain_frozen.lr": 1e-4,
    "stage.pretrain_frozen.patchout.time": 80,
    "stage.pretrain_unfrozen.epochs": 1,
    "stage.pretrain_unfrozen.lr": 1e-5,
    "stage.pretrain_unfrozen.patchout.time": 80,
    "stage.finetune.epochs": 1,
    "stage.finetune.lr_start": 1e-5,
    "stage.finetune.lr_end": 1e-4,
    "stage.finetune.warmup_steps": 100,
    "stage.finetune.patchout.time": 120,
    "tagger.dim": 32,
    "tagger.epochs": 1,
    "tagger.lr": 1e-5,
    "tagger.batch_size": 32,
    "data.pretrain": "",
    "data.finetune": "",
    "data.valid": "",
    "data.vocab": "",
    "data.labels": "",
    "data.tagger": "",
    "data.caption_emb": "",
    "data.label_emb": "",
    "data.word_emb": "",
    "data.mel_dir": "mels",
    "out": "runs/default",
}


def flatten(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, path + "."))
        else:
            flat[path] = value
    return flat


class Config(dict):
    """Defaults overlaid with file values; unknown keys are rejected."""

    def __init__(self, values: Mapping[str, Any] | None = None, base_dir: Path | None = None):
        super().__init__(DEFAULTS)
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            default = DEFAULTS[key]
            if isinstance(default, bool) and not isinstance(value, bool):
                raise ConfigError(f"{key} must be true/false, got {value!r}")
            if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if type(default) is not type(value) and not (isinstance(default, int) and isinstance(value, int)):
                raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r}")
            self[key] = value
        env_seed = os.environ.get("CAPTIONER_SEED")
        if env_seed:
            try:
                self["seed"] = int(env_seed)
            except ValueError as exc:
                raise ConfigError(f"CAPTIONER_SEED must be an integer, got {env_seed!r}") from exc

    def path(self, key: str) -> Path | None:
        value = self[key]
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


def load_config(path, overrides: Mapping[str, Any] | None = None) -> Config:
    path = Path(path)
    try:
        tree = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config file not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = flatten(tree)
    values.update(overrides or {})
    return Config(values, base_dir=path.parent)


def dump_config(values: Mapping[str, Any]) -> str:
    """Render as dotted-key TOML lines that :func:`load_config` reads back."""
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
