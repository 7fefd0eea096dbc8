"""Config-driven entry points: ``prepare``, ``train`` and ``caption``.

``prepare`` builds the vocabulary from the base (fine-tune) split, caches mel
spectrograms, pairs captions to labels by embedding cosine, fits the tagger on
the resulting multi-hot targets, and writes ``mel``, ``guide`` and
``guide_probs`` back into every manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from captioner import decode, frontend
from captioner import numerics as nx
from captioner.errors import ConfigError, InputError
from captioner.model import Captioner, ModelConfig
from captioner.pipeline.checkpoint import Bundle, load_tagger, save_checkpoint, save_tagger
from captioner.pipeline.config import Config
from captioner.pipeline.data import Manifest, entry_features, read_manifest, save_mel, write_manifest
from captioner.pipeline.train import CaptionDataset, Stage, TrainLog, TrainOptions, TrainSchedule, run_schedule
from captioner.textguide import LabelVocabulary, Tagger, argmax_label, guide_token_ids, pair_labels, read_embeddings, train_tagger
from captioner.vocab import Vocabulary

Log = Callable[[str], None]


def frontend_config(cfg: Config) -> frontend.FrontendConfig:
    return frontend.FrontendConfig(
        cfg["audio.sample_rate"], cfg["audio.n_fft"], cfg["audio.hop"], cfg["audio.n_mels"],
        cfg["audio.f_min"], cfg["audio.f_max"], cfg["audio.floor_eps"],
    )


def model_config(cfg: Config, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        d=cfg["patch.dim"],
        enc_blocks=cfg["model.enc_blocks"],
        enc_heads=cfg["model.enc_heads"],
        enc_ffn_dim=cfg["model.enc_ffn_dim"],
        dec_blocks=cfg["model.dec_blocks"],
        dec_heads=cfg["model.dec_heads"],
        dec_dim=cfg["model.dec_dim"],
        dec_ffn_dim=cfg["model.dec_ffn_dim"],
        decoder_dropout=cfg["model.decoder_dropout"],
        label_smoothing=cfg["model.label_smoothing"],
        max_caption_len=cfg["model.max_caption_len"],
        n_mels=cfg["audio.n_mels"],
        max_frames=cfg["patch.max_frames"],
        kernel=cfg["patch.kernel"],
        stride=cfg["patch.stride"],
    )


def _required(cfg: Config, key: str) -> Path:
    path = cfg.path(key)
    if path is None:
        raise ConfigError(f"config key {key} must be set")
    return path


def _manifests(cfg: Config, check_files: bool = True) -> dict[str, Manifest]:
    found = {}
    for split in ("finetune", "pretrain", "valid"):
        path = cfg.path(f"data.{split}")
        if path is not None:
            found[split] = read_manifest(path, split, check_files)
    if "finetune" not in found:
        raise ConfigError("config key data.finetune must be set")
    return found


def caption_targets(manifest: Manifest, cfg: Config, labels: LabelVocabulary) -> np.ndarray:
    """Multi-hot ``[clips, labels]``: each caption contributes its most similar label."""
    caps = {e.text: e for e in read_embeddings(_required(cfg, "data.caption_emb"))}
    label_emb = {e.text: e for e in read_embeddings(_required(cfg, "data.label_emb"))}
    missing = [l for l in labels.labels if l not in label_emb]
    if missing:
        raise InputError(f"no embedding for labels {missing}")
    ordered = [label_emb[l] for l in labels.labels]
    targets = np.zeros((len(manifest), len(labels)))
    for i, entry in enumerate(manifest):
        absent = [c for c in entry.captions if c not in caps]
        if absent:
            raise InputError(f"entry {entry.id}: no embedding for caption {absent[0]!r}")
        for _, j, _ in pair_labels([caps[c] for c in entry.captions], ordered):
            targets[i, j] = 1.0
    return targets


def prepare(cfg: Config, log: Log = print) -> dict[str, Path]:
    front = frontend_config(cfg)
    manifests = _manifests(cfg)
    base = manifests["finetune"]
    vocab = Vocabulary.build(base.captions())
    vocab_path = _required(cfg, "data.vocab")
    vocab_path.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(vocab_path)
    log(f"vocabulary: {len(vocab)} entries -> {vocab_path}")

    mel_dir = _required(cfg, "data.mel_dir")
    cached: dict[str, tuple[Path, np.ndarray]] = {}
    for manifest in manifests.values():
        for entry in manifest:
            source = manifest.resolve(entry.clip)
            key = str(source.resolve())
            if key not in cached:
                mel = frontend.featurize_file(source, front)
                path = mel_dir / f"{Path(entry.clip).stem}.mel"
                save_mel(path, mel)
                cached[key] = (path, frontend.standardize(mel.values))
            entry.mel = os.path.relpath(cached[key][0], manifest.root)
    log(f"cached {len(cached)} spectrograms -> {mel_dir}")

    labels = LabelVocabulary.load(_required(cfg, "data.labels"))
    targets = caption_targets(base, cfg, labels)
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 1]))
    feats = [cached[str(base.resolve(e.clip).resolve())][1] for e in base]
    shapes = {f.shape for f in feats}
    if len(shapes) != 1:
        raise InputError(f"tagger training needs equal-length clips, got shapes {sorted(shapes)}")
    tagger = Tagger(len(labels), rng, cfg["tagger.dim"], cfg["patch.kernel"], cfg["patch.stride"])
    history = train_tagger(tagger, feats, targets, rng, cfg["tagger.epochs"], cfg["tagger.lr"], cfg["tagger.batch_size"])
    tagger_path = _required(cfg, "data.tagger")
    save_tagger(tagger_path, tagger, labels)
    log(f"tagger: BCE {history[0]:.4f} -> {history[-1]:.4f} over {len(history)} epochs -> {tagger_path}")

    for split, manifest in manifests.items():
        for entry in manifest:
            probs = tagger.predict(cached[str(manifest.resolve(entry.clip).resolve())][1])[0]
            entry.guide_probs = [float(p) for p in probs]
            entry.guide = [argmax_label(probs)]
        write_manifest(cfg.path(f"data.{split}"), manifest.entries)
    return {"vocab": vocab_path, "tagger": tagger_path, "mels": mel_dir}


@dataclass
class TrainResult:
    bundle: Bundle
    log: TrainLog
    out: Path
    datasets: dict[str, CaptionDataset]


def train(cfg: Config, log: Log = print, write: bool = True) -> TrainResult:
    """Run the three-stage schedule; checkpoints land in ``out/<stage>`` and ``out/final``."""
    front = frontend_config(cfg)
    vocab = Vocabulary.load(_required(cfg, "data.vocab"))
    tagger, labels = (None, None)
    if cfg.path("data.tagger") is not None and cfg.path("data.tagger").exists():
        tagger, labels = load_tagger(cfg.path("data.tagger"))
    elif cfg["guide.enabled"] and cfg.path("data.labels") is not None:
        labels = LabelVocabulary.load(cfg.path("data.labels"))
    manifests = _manifests(cfg)
    datasets = {split: CaptionDataset(m, vocab, labels, front) for split, m in manifests.items()}
    valid = datasets.pop("valid", None)

    seeds = np.random.SeedSequence(cfg["seed"]).spawn(2)
    model = Captioner(model_config(cfg, len(vocab)), np.random.default_rng(seeds[0]))
    if cfg.path("data.word_emb") is not None:
        words = {e.text: e.vector for e in read_embeddings(cfg.path("data.word_emb"))}
        log(f"word vectors: {model.decoder.load_word_vectors(vocab, words)} of {len(vocab)} rows loaded")
    out = _required(cfg, "out")
    bundle = Bundle(model, vocab, labels, tagger, front, {"top_p": cfg["guide.top_p"], "guide_count": cfg["guide.count"],
                                                          "guide": cfg["guide.enabled"]})

    def on_stage_end(stage: Stage, m: Captioner, _):
        if not write:
            return None
        path = save_checkpoint(out / stage.name, bundle)
        (out / "train_log.tsv").write_text(result_log.to_tsv())
        log(f"stage {stage.name} done -> {path}")
        return path

    def on_epoch(row):
        result_log.rows.append(row)
        log(f"{row.stage} epoch {row.epoch:3d}  loss {row.loss:.4f}  ce {row.ce:.4f}  lr {row.lr:.2e}"
            + ("" if row.valid is None else f"  valid {row.valid:.4f}"))

    result_log = TrainLog()
    schedule = TrainSchedule.from_config(cfg)
    trained = run_schedule(model, datasets, schedule, TrainOptions.from_config(cfg), np.random.default_rng(seeds[1]),
                           valid, on_stage_end, on_epoch)
    if write:
        save_checkpoint(out / "final", bundle)
        (out / "train_log.tsv").write_text(trained.to_tsv())
    return TrainResult(bundle, trained, out, datasets)


def guide_for(bundle: Bundle, features: np.ndarray, guide_probs=None) -> list[int]:
    """Argmax guide label word ids for one clip (empty without tagger or labels)."""
    if not bundle.extra.get("guide", True) or bundle.labels is None:
        return []
    if guide_probs is None:
        if bundle.tagger is None:
            return []
        guide_probs = bundle.tagger.predict(features)[0]
    count = int(bundle.extra.get("guide_count", 1))
    top = np.argsort(-np.asarray(guide_probs), kind="stable")[:count]
    return guide_token_ids([int(i) for i in top], bundle.labels, bundle.vocab)


def caption(bundle: Bundle, features: np.ndarray, beam: int = 3, len_norm: str = "mean", guide_probs=None) -> str:
    """Standardised log-mel ``[F, T]`` -> caption text."""
    model = bundle.model
    guide = guide_for(bundle, features, guide_probs)
    max_len = model.cfg.max_caption_len
    with nx.no_grad():
        memory, mask = model.encode(features[None].astype(model.cls.dtype), guide_ids=np.asarray([guide]) if guide else None)
        if beam <= 1:
            tokens = decode.greedy_decode(model, memory, mask, max_len)
        else:
            tokens = decode.beam_search(model, memory, mask, beam, max_len, len_norm)
    return " ".join(bundle.vocab.decode(tokens))


def caption_manifest(bundle: Bundle, manifest: Manifest, beam: int = 1, len_norm: str = "mean") -> dict[str, str]:
    preds = {}
    for e in manifest:
        feats = entry_features(manifest, e, bundle.frontend)
        preds[e.id] = caption(bundle, feats, beam, len_norm, e.guide_probs)
    return preds
