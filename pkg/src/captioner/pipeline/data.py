"""JSON-lines dataset manifests and feature loading.

One object per line::

    {"id": "clip_000", "clip": "audio/clip_000.wav", "captions": ["..."],
     "mel": "mels/clip_000.mel", "guide": [3], "guide_probs": [...]}

``mel``, ``guide`` and ``guide_probs`` are optional; relative paths resolve
against the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from captioner import frontend
from captioner.errors import InputError
from captioner.numerics import load_tensors, save_tensors


@dataclass
class ManifestEntry:
    id: str
    clip: str
    captions: list[str]
    mel: str | None = None
    guide: list[int] | None = None
    guide_probs: list[float] | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"id": self.id, "clip": self.clip, "captions": self.captions}
        if self.mel is not None:
            out["mel"] = self.mel
        if self.guide is not None:
            out["guide"] = self.guide
        if self.guide_probs is not None:
            out["guide_probs"] = self.guide_probs
        out.update(self.extra)
        return out


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path
    split: str = "train"

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def captions(self) -> Iterable[str]:
        for e in self.entries:
            yield from e.captions


_KNOWN = {"id", "clip", "captions", "mel", "guide", "guide_probs"}


def read_manifest(path, split: str | None = None, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError as exc:
        raise InputError(f"{path}: manifest not found") from exc
    entries = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entry = ManifestEntry(
                id=str(obj.get("id", f"{path.stem}_{lineno}")),
                clip=obj["clip"],
                captions=list(obj["captions"]),
                mel=obj.get("mel"),
                guide=obj.get("guide"),
                guide_probs=obj.get("guide_probs"),
                extra={k: v for k, v in obj.items() if k not in _KNOWN},
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
        if not entry.captions:
            raise InputError(f"{path}:{lineno}: entry {entry.id} has no captions")
        entries.append(entry)
    if not entries:
        raise InputError(f"{path}: manifest is empty")
    manifest = Manifest(entries, path.parent, split or path.stem)
    if check_files:
        for e in manifest:
            source = manifest.resolve(e.mel) if e.mel else manifest.resolve(e.clip)
            if not source.exists():
                raise InputError(f"{path}: entry {e.id} points at missing file {source}")
    return manifest


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    Path(path).write_text("".join(json.dumps(e.to_json()) + "\n" for e in entries))


def save_mel(path, mel: frontend.MelSpectrogram) -> None:
    save_tensors(path, {"mel": mel.values}, meta={"frame_hop": mel.frame_hop})


def load_mel(path) -> frontend.MelSpectrogram:
    tensors, meta = load_tensors(path)
    if "mel" not in tensors:
        raise InputError(f"{path}: no tensor named 'mel'")
    return frontend.MelSpectrogram(tensors["mel"].astype(np.float64), int(meta.get("frame_hop", 512)))


def entry_features(manifest: Manifest, entry: ManifestEntry, cfg: frontend.FrontendConfig) -> np.ndarray:
    """Standardised log-mel values for one entry (cached ``.mel`` if present)."""
    try:
        if entry.mel:
            mel = load_mel(manifest.resolve(entry.mel))
        else:
            mel = frontend.featurize_file(manifest.resolve(entry.clip), cfg)
    except InputError as exc:
        raise InputError(f"entry {entry.id}: {exc}") from exc
    return frontend.standardize(mel.values)


def stack_features(features: list[np.ndarray]) -> np.ndarray:
    """Right-pad to the longest clip with each clip's minimum value, ``[B, F, T]``."""
    frames = max(f.shape[1] for f in features)
    out = []
    for f in features:
        if f.shape[1] < frames:
            f = np.pad(f, ((0, 0), (0, frames - f.shape[1])), constant_values=f.min())
        out.append(f)
    return np.stack(out)
