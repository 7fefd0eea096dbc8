"""Three-stage training schedule.

1. ``pretrain_frozen``: encoder frozen, constant lr (1e-4 by default), enlarged set.
2. ``pretrain_unfrozen``: everything trainable, constant lr (1e-5).
3. ``finetune``: base set, linear warmup 1e-5 -> 1e-4 over ``warmup_steps``
   updates, then held.

Each step applies SpecAugment, nucleus-sampled guide labels (re-drawn every
epoch), batch Mixup in embedding space and per-stage Patchout, then takes one
Adam update on the label-smoothed cross-entropy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from captioner import numerics as nx
from captioner.augment import MixupConfig, SpecAugmentConfig, mixup_pair, sample_lambda, spec_augment
from captioner.errors import ConfigError, InputError
from captioner.frontend import FrontendConfig
from captioner.model import Captioner, ce_loss
from captioner.pipeline.config import Config
from captioner.pipeline.data import Manifest, entry_features, stack_features
from captioner.textguide import LabelVocabulary, guide_token_ids, sample_labels
from captioner.vocab import PAD, Vocabulary


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass
class Stage:
    name: str
    epochs: int
    lr_start: float
    lr_end: float | None = None
    warmup_steps: int = 0
    p_f: int = 4
    p_t: int = 0
    freeze_encoder: bool = False
    data: str = "pretrain"

    def __post_init__(self):
        if self.lr_start <= 0 or (self.lr_end is not None and self.lr_end <= 0):
            raise ConfigError(f"stage {self.name}: learning rates must be positive")
        if self.epochs < 0:
            raise ConfigError(f"stage {self.name}: negative epoch count")

    def lr(self, step: int) -> float:
        """Learning rate for the update with 0-based index ``step``."""
        if self.lr_end is None or self.warmup_steps <= 0:
            return self.lr_start if self.lr_end is None else self.lr_end
        frac = min(step, self.warmup_steps) / self.warmup_steps
        return self.lr_start + (self.lr_end - self.lr_start) * frac


@dataclass
class TrainSchedule:
    stages: list[Stage]
    batch_size: int = 32

    @classmethod
    def full_scale(cls, warmup_steps: int = 100, epochs: tuple[int, int, int] = (1, 1, 1)) -> "TrainSchedule":
        return cls(
            [
                Stage("pretrain_frozen", epochs[0], 1e-4, p_f=4, p_t=80, freeze_encoder=True, data="pretrain"),
                Stage("pretrain_unfrozen", epochs[1], 1e-5, p_f=4, p_t=80, data="pretrain"),
                Stage("finetune", epochs[2], 1e-5, 1e-4, warmup_steps, p_f=4, p_t=120, data="finetune"),
            ],
            batch_size=32,
        )

    @classmethod
    def from_config(cls, cfg: Config) -> "TrainSchedule":
        p_f = cfg["patchout.freq"]
        s = "stage."
        return cls(
            [
                Stage("pretrain_frozen", cfg[s + "pretrain_frozen.epochs"], cfg[s + "pretrain_frozen.lr"],
                      p_f=p_f, p_t=cfg[s + "pretrain_frozen.patchout.time"], freeze_encoder=True, data="pretrain"),
                Stage("pretrain_unfrozen", cfg[s + "pretrain_unfrozen.epochs"], cfg[s + "pretrain_unfrozen.lr"],
                      p_f=p_f, p_t=cfg[s + "pretrain_unfrozen.patchout.time"], data="pretrain"),
                Stage("finetune", cfg[s + "finetune.epochs"], cfg[s + "finetune.lr_start"], cfg[s + "finetune.lr_end"],
                      cfg[s + "finetune.warmup_steps"], p_f=p_f, p_t=cfg[s + "finetune.patchout.time"], data="finetune"),
            ],
            batch_size=cfg["train.batch_size"],
        )


@dataclass
class TrainOptions:
    mixup: MixupConfig | None = field(default_factory=MixupConfig)
    specaug: SpecAugmentConfig | None = field(default_factory=SpecAugmentConfig)
    guide: bool = True
    top_p: float = 0.9
    guide_count: int = 1

    @classmethod
    def from_config(cls, cfg: Config) -> "TrainOptions":
        mixup = MixupConfig(cfg["mixup.alpha"], True, cfg["mixup.loss"], cfg["mixup.per_sample"]) if cfg["mixup.enabled"] else None
        specaug = (
            SpecAugmentConfig(cfg["specaug.n_freq_masks"], cfg["specaug.max_freq_width"],
                              cfg["specaug.n_time_masks"], cfg["specaug.max_time_width"])
            if cfg["specaug.enabled"] else None
        )
        return cls(mixup, specaug, cfg["guide.enabled"], cfg["guide.top_p"], cfg["guide.count"])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Example:
    clip: int
    caption_ids: list[int]


class CaptionDataset:
    """Every (clip, caption) pair of a manifest, with features held in memory."""

    def __init__(self, manifest: Manifest, vocab: Vocabulary, labels: LabelVocabulary | None = None,
                 frontend: FrontendConfig | None = None, features: list[np.ndarray] | None = None):
        self.manifest = manifest
        self.vocab = vocab
        self.labels = labels
        frontend = frontend or FrontendConfig()
        self.features = features if features is not None else [entry_features(manifest, e, frontend) for e in manifest]
        self.examples = [Example(i, vocab.encode(c)) for i, e in enumerate(manifest) for c in e.captions]
        for e in manifest:
            if e.guide_probs is not None and labels is not None and len(e.guide_probs) != len(labels):
                raise InputError(f"entry {e.id}: {len(e.guide_probs)} guide scores for {len(labels)} labels")

    def __len__(self) -> int:
        return len(self.examples)

    def guide_labels(self, clip: int, opts: TrainOptions, rng: np.random.Generator, training: bool) -> list[int]:
        entry = self.manifest.entries[clip]
        if not opts.guide or self.labels is None:
            return []
        if entry.guide_probs is not None:
            return sample_labels(entry.guide_probs, opts.top_p, opts.guide_count, rng, training)
        return list(entry.guide or [])


@dataclass
class Batch:
    mel: np.ndarray  # [B, F, T]
    captions: np.ndarray  # [B, Tc] ids with <SOS> ... <EOS> <PAD>...
    guide: np.ndarray  # [B, W] ids, <PAD>-filled; W may be 0
    clips: np.ndarray


def _pad_rows(rows: list[list[int]]) -> np.ndarray:
    width = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_batch(ds: CaptionDataset, indices, opts: TrainOptions, rng: np.random.Generator, training: bool = True) -> Batch:
    examples = [ds.examples[i] for i in indices]
    mels = []
    for ex in examples:
        f = ds.features[ex.clip]
        if training and opts.specaug is not None:
            f = spec_augment(f, opts.specaug, rng)
        mels.append(f)
    guides = [
        guide_token_ids(ds.guide_labels(ex.clip, opts, rng, training), ds.labels, ds.vocab) if ds.labels else []
        for ex in examples
    ]
    return Batch(stack_features(mels), _pad_rows([ex.caption_ids for ex in examples]), _pad_rows(guides),
                 np.asarray([ex.clip for ex in examples]))


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def train_step(
    model: Captioner,
    batch: Batch,
    stage: Stage,
    opts: TrainOptions,
    rng: np.random.Generator,
    trace: dict | None = None,
) -> tuple[nx.Tensor, float]:
    """Forward one batch; returns (objective, unsmoothed CE against the loss targets)."""
    dtype = model.cls.dtype
    ids_in, targets = batch.captions[:, :-1], batch.captions[:, 1:]
    mel = batch.mel.astype(dtype)
    cap_emb = model.decoder.embed_ids(ids_in)
    has_guide = batch.guide.shape[1] > 0
    guide_emb = model.embed_guide(batch.guide) if has_guide else None
    guide_mask = batch.guide != PAD

    if opts.mixup is not None:
        perm = rng.permutation(len(ids_in))
        lam = sample_lambda(opts.mixup, rng, len(ids_in) if opts.mixup.per_sample else None)
        pair = mixup_pair(
            mel, mel[perm], cap_emb, cap_emb[perm],
            guide_emb, None if guide_emb is None else guide_emb[perm],
            lam, targets, targets[perm],
        )
        weighted = pair.loss_targets(opts.mixup.loss)
        mel, cap_emb, guide_emb = pair.x, pair.caption_emb, pair.guide_emb
        guide_mask = guide_mask | guide_mask[perm]
    else:
        perm, lam = None, 1.0
        weighted = [(1.0, targets)]

    memory, mem_mask = model.encode(
        mel, guide_emb=guide_emb, guide_mask=guide_mask if has_guide else None,
        p_f=stage.p_f, p_t=stage.p_t, rng=rng, training=True,
    )
    logits = model.decoder.forward_embedded(cap_emb, memory, mem_mask, training=True, rng=rng)
    smoothing = model.cfg.label_smoothing
    loss = None
    plain = 0.0
    for weight, tgt in weighted:
        term = ce_loss(logits, tgt, smoothing, weights=np.broadcast_to(weight, len(tgt)))
        loss = term if loss is None else loss + term
        with nx.no_grad():
            plain += ce_loss(nx.Tensor(logits.data), tgt, 0.0, weights=np.broadcast_to(weight, len(tgt))).item()
    if trace is not None:
        trace.update(perm=perm, lam=lam, decoder_input=cap_emb.data.copy(), loss_targets=[t for _, t in weighted],
                     loss_weights=[w for w, _ in weighted], mel=np.asarray(mel).copy(), captions=batch.captions.copy())
    return loss, plain


def eval_loss(model: Captioner, ds: CaptionDataset, opts: TrainOptions, batch_size: int = 32) -> float:
    """Mean unsmoothed CE in eval mode (no augmentation, argmax guide)."""
    rng = np.random.default_rng(0)
    total, count = 0.0, 0
    with nx.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            b = make_batch(ds, idx, opts, rng, training=False)
            memory, mask = model.encode(b.mel.astype(model.cls.dtype), guide_ids=b.guide if b.guide.shape[1] else None)
            logits = model.logits(b.captions[:, :-1], memory, mask)
            total += ce_loss(logits, b.captions[:, 1:], 0.0).item() * len(idx)
            count += len(idx)
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# schedule runner
# ---------------------------------------------------------------------------


@dataclass
class LogRow:
    stage: str
    epoch: int
    global_epoch: int
    loss: float
    ce: float
    lr: float
    steps: int
    seconds: float
    valid: float | None = None


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)
    checkpoints: dict[str, Path] = field(default_factory=dict)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rows])

    def to_tsv(self) -> str:
        head = "stage\tepoch\tglobal_epoch\tloss\tce\tlr\tsteps\tseconds\tvalid"
        lines = [head]
        for r in self.rows:
            valid = "" if r.valid is None else f"{r.valid:.6f}"
            lines.append(f"{r.stage}\t{r.epoch}\t{r.global_epoch}\t{r.loss:.6f}\t{r.ce:.6f}\t{r.lr:.3g}\t{r.steps}\t{r.seconds:.2f}\t{valid}")
        return "\n".join(lines) + "\n"


def _set_freeze(model: Captioner, frozen: bool) -> None:
    model.set_requires_grad(True)
    if frozen:
        for p in model.encoder_parameters().values():
            p.requires_grad = False


def run_schedule(
    model: Captioner,
    datasets: dict[str, CaptionDataset],
    schedule: TrainSchedule,
    opts: TrainOptions,
    rng: np.random.Generator,
    valid: CaptionDataset | None = None,
    on_stage_end: Callable[[Stage, Captioner, Path | None], Path | None] | None = None,
    on_epoch: Callable[[LogRow], None] | None = None,
) -> TrainLog:
    """Run every stage in order; ``on_stage_end`` may persist a checkpoint and return its path."""
    for stage in schedule.stages:
        if stage.data not in datasets:
            if stage.data == "pretrain" and "finetune" in datasets:
                continue
            raise ConfigError(f"stage {stage.name} needs a {stage.data!r} dataset")
    vocab_sizes = {len(ds.vocab) for ds in datasets.values()}
    if vocab_sizes != {model.cfg.vocab_size}:
        raise InputError(f"dataset vocabularies {sorted(vocab_sizes)} do not match model vocab_size {model.cfg.vocab_size}")

    log = TrainLog()
    global_epoch = 0
    try:
        for stage in schedule.stages:
            ds = datasets.get(stage.data) or datasets["finetune"]
            _set_freeze(model, stage.freeze_encoder)
            trainable = {n: p for n, p in model.named_parameters() if p.requires_grad}
            state = nx.AdamState(lr=stage.lr(0))
            step = 0
            best_valid = None
            for epoch in range(stage.epochs):
                start = time.perf_counter()
                order = rng.permutation(len(ds))
                losses, ces = [], []
                for s in range(0, len(order), schedule.batch_size):
                    batch = make_batch(ds, order[s : s + schedule.batch_size], opts, rng, training=True)
                    state.lr = stage.lr(step)
                    loss, ce = train_step(model, batch, stage, opts, rng)
                    nx.backward(loss)
                    nx.adam_step({n: p for n, p in trainable.items() if p.grad is not None}, state)
                    losses.append(loss.item())
                    ces.append(ce)
                    step += 1
                global_epoch += 1
                row = LogRow(stage.name, epoch + 1, global_epoch, float(np.mean(losses)), float(np.mean(ces)),
                             state.lr, step, time.perf_counter() - start)
                if valid is not None:
                    row.valid = eval_loss(model, valid, opts, schedule.batch_size)
                    if best_valid is None or row.valid < best_valid[0]:
                        best_valid = (row.valid, model.state_dict())
                log.rows.append(row)
                if on_epoch is not None:
                    on_epoch(row)
            if best_valid is not None:
                model.load_state_dict(best_valid[1])
            if on_stage_end is not None:
                path = on_stage_end(stage, model, None)
                if path is not None:
                    log.checkpoints[stage.name] = path
    finally:
        model.set_requires_grad(True)
        model.zero_grad()
    return log
