"""Model checkpoints on top of the tensor directory format.

Tensor names are ``model.<param>`` and, when a tagger is bundled,
``tagger.<param>``.  ``meta`` records the model config, vocabulary, label list,
frontend settings and a free-form ``extra`` dict.  Freeze flags are schedule
state and are never stored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from captioner.errors import CheckpointError, ConfigError
from captioner.frontend import FrontendConfig
from captioner.model import Captioner, ModelConfig
from captioner.numerics import load_tensors, save_tensors
from captioner.textguide import LabelVocabulary, Tagger
from captioner.vocab import RESERVED, Vocabulary


@dataclass
class Bundle:
    model: Captioner
    vocab: Vocabulary
    labels: LabelVocabulary | None = None
    tagger: Tagger | None = None
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, bundle: Bundle) -> Path:
    tensors = {f"model.{k}": v for k, v in bundle.model.state_dict().items()}
    meta = {
        "kind": "captioner",
        "model": bundle.model.cfg.to_dict(),
        "vocab": bundle.vocab.itos[len(RESERVED):],
        "labels": None if bundle.labels is None else bundle.labels.labels,
        "frontend": asdict(bundle.frontend),
        "extra": bundle.extra,
    }
    if bundle.tagger is not None:
        tensors.update({f"tagger.{k}": v for k, v in bundle.tagger.state_dict().items()})
        meta["tagger"] = {"dim": bundle.tagger.weight.shape[0], "kernel": bundle.tagger.kernel, "stride": bundle.tagger.stride}
    return save_tensors(path, tensors, meta)


def load_checkpoint(path) -> Bundle:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "captioner":
        raise CheckpointError(f"{path}: not a captioner checkpoint")
    try:
        cfg = ModelConfig.from_dict(meta["model"])
        vocab = Vocabulary(meta["vocab"])
        labels = LabelVocabulary(meta["labels"]) if meta.get("labels") else None
        front = FrontendConfig(**meta.get("frontend", {}))
    except (KeyError, TypeError, ConfigError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad checkpoint metadata ({exc})") from exc
    if len(vocab) != cfg.vocab_size:
        raise CheckpointError(f"{path}: vocabulary has {len(vocab)} entries, model expects {cfg.vocab_size}")
    model = Captioner(cfg, np.random.default_rng(0))
    try:
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        tagger = None
        if "tagger" in meta:
            if labels is None:
                raise CheckpointError(f"{path}: tagger stored without labels")
            t = meta["tagger"]
            tagger = Tagger(len(labels), np.random.default_rng(0), t["dim"], t["kernel"], t["stride"])
            tagger.load_state_dict({k[7:]: v for k, v in tensors.items() if k.startswith("tagger.")})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config ({exc})") from exc
    return Bundle(model, vocab, labels, tagger, front, meta.get("extra", {}))


def save_tagger(path, tagger: Tagger, labels: LabelVocabulary) -> Path:
    meta = {"kind": "tagger", "labels": labels.labels, "dim": tagger.weight.shape[0], "kernel": tagger.kernel, "stride": tagger.stride}
    return save_tensors(path, tagger.state_dict(), meta)


def load_tagger(path) -> tuple[Tagger, LabelVocabulary]:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "tagger":
        raise CheckpointError(f"{path}: not a tagger checkpoint")
    labels = LabelVocabulary(meta["labels"])
    tagger = Tagger(len(labels), np.random.default_rng(0), meta["dim"], meta["kernel"], meta["stride"])
    try:
        tagger.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return tagger, labels
