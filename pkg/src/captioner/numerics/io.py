"""Tensor directory format: ``manifest.json`` plus ``weights.bin``.

``weights.bin`` holds little-endian float32 values for every tensor,
concatenated in manifest order.  The manifest records names, shapes and byte
offsets, an optional free-form ``meta`` object, and a format version.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from captioner.errors import CheckpointError

FORMAT_NAME = "captioner-tensors"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
_DTYPE = np.dtype("<f4")


def save_tensors(directory, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value), dtype=_DTYPE)
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "tensors": entries,
        "meta": meta or {},
    }
    # weights first, manifest last: a crash mid-write leaves no valid manifest
    with tempfile.NamedTemporaryFile("wb", dir=directory, prefix=WEIGHTS, suffix=".tmp", delete=False) as fh:
        for blob in blobs:
            fh.write(blob)
    os.replace(fh.name, directory / WEIGHTS)
    with tempfile.NamedTemporaryFile("w", dir=directory, prefix=MANIFEST, suffix=".tmp", delete=False) as fh:
        fh.write(json.dumps(manifest, indent=1))
    os.replace(fh.name, directory / MANIFEST)
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: missing manifest") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path}: not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.get('version')!r}, this build reads {FORMAT_VERSION}"
        )
    if manifest.get("dtype") != "float32" or manifest.get("byte_order") != "little":
        raise CheckpointError(f"{path}: unsupported dtype/byte order")
    return manifest


def load_tensors(directory) -> tuple[dict[str, np.ndarray], dict]:
    """Read everything back; raises ``CheckpointError`` without partial results."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    try:
        raw = (directory / WEIGHTS).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"{directory / WEIGHTS}: missing weights") from exc
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for entry in manifest.get("tensors", []):
        try:
            name, shape = entry["name"], tuple(int(n) for n in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{directory}: malformed tensor entry {entry!r}") from exc
        if offset != expected:
            raise CheckpointError(f"{directory}: tensor {name} starts at {offset}, expected {expected}")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize:
            raise CheckpointError(f"{directory}: tensor {name} byte count does not match shape {shape}")
        if offset + nbytes > len(raw):
            raise CheckpointError(
                f"{directory / WEIGHTS}: truncated ({len(raw)} bytes, tensor {name} needs {offset + nbytes})"
            )
        if name in tensors:
            raise CheckpointError(f"{directory}: duplicate tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype=_DTYPE, count=nbytes // 4, offset=offset).reshape(shape).copy()
        expected = offset + nbytes
    if expected != len(raw):
        raise CheckpointError(f"{directory / WEIGHTS}: {len(raw) - expected} trailing bytes")
    return tensors, manifest.get("meta", {})
