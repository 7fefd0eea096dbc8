import json

import numpy as np
import pytest

from captioner import frontend
from captioner import numerics as nx
from captioner.cli import main
from captioner.errors import CheckpointError, ConfigError, InputError
from captioner.model import Captioner, ModelConfig
from captioner.pipeline import checkpoint, config, data, report, runner, synth
from captioner.pipeline.train import (
    CaptionDataset,
    LogRow,
    Stage,
    TrainLog,
    TrainOptions,
    TrainSchedule,
    make_batch,
    run_schedule,
)
from captioner.vocab import UNK, Vocabulary
from conftest import TINY, quiet, tiny_config


class TestConfig:
    def test_defaults_and_file_values(self, tmp_path):
        (tmp_path / "run.toml").write_text('seed = 7\n"patch.dim" = 32\n[model]\ndec_dim = 32\n')
        cfg = config.load_config(tmp_path / "run.toml")
        assert cfg["seed"] == 7 and cfg["model.dec_dim"] == 32 and cfg["patch.dim"] == 32
        assert cfg["guide.top_p"] == 0.9 and cfg["model.label_smoothing"] == 0.1
        assert cfg.base_dir == tmp_path

    def test_rejects_bad_values(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown"):
            config.Config({"model.dimension": 3})
        with pytest.raises(ConfigError):
            config.Config({"patch.dim": "big"})
        with pytest.raises(ConfigError):
            config.Config({"mixup.enabled": 1})
        assert config.Config({"guide.top_p": 1})["guide.top_p"] == 1.0
        with pytest.raises(ConfigError):
            config.load_config(tmp_path / "missing.toml")
        (tmp_path / "bad.toml").write_text("seed = = 1")
        with pytest.raises(ConfigError):
            config.load_config(tmp_path / "bad.toml")

    def test_seed_from_environment(self, monkeypatch):
        monkeypatch.setenv("CAPTIONER_SEED", "42")
        assert config.Config({"seed": 1})["seed"] == 42
        monkeypatch.setenv("CAPTIONER_SEED", "x")
        with pytest.raises(ConfigError):
            config.Config()

    def test_dump_round_trip(self, tmp_path):
        values = {"seed": 3, "out": 'runs/"q"', "mixup.enabled": False, "guide.top_p": 0.75}
        (tmp_path / "c.toml").write_text(config.dump_config(values))
        cfg = config.load_config(tmp_path / "c.toml")
        assert {k: cfg[k] for k in values} == values

    def test_relative_paths(self, tmp_path):
        cfg = config.Config({"data.vocab": "v.txt", "out": "/abs/run"}, base_dir=tmp_path)
        assert cfg.path("data.vocab") == tmp_path / "v.txt"
        assert str(cfg.path("out")) == "/abs/run"
        assert cfg.path("data.valid") is None


class TestManifest:
    def test_round_trip(self, tmp_path):
        (tmp_path / "a.wav").write_bytes(b"")
        entries = [data.ManifestEntry("x", "a.wav", ["one", "two"], guide=[1], extra={"src": "k"})]
        data.write_manifest(tmp_path / "m.jsonl", entries)
        m = data.read_manifest(tmp_path / "m.jsonl")
        assert m.entries == entries and m.split == "m" and list(m.captions()) == ["one", "two"]

    def test_errors_name_the_file(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"id": "x", "clip": "gone.wav", "captions": ["a"]}\n')
        with pytest.raises(InputError, match="gone.wav"):
            data.read_manifest(tmp_path / "m.jsonl")
        (tmp_path / "b.jsonl").write_text("{broken\n")
        with pytest.raises(InputError, match="b.jsonl:1"):
            data.read_manifest(tmp_path / "b.jsonl")
        (tmp_path / "c.jsonl").write_text('{"id": "x", "clip": "a.wav", "captions": []}\n')
        with pytest.raises(InputError):
            data.read_manifest(tmp_path / "c.jsonl", check_files=False)
        with pytest.raises(InputError):
            data.read_manifest(tmp_path / "nothing.jsonl")

    def test_stack_pads_with_clip_minimum(self):
        out = data.stack_features([np.ones((2, 3)), np.array([[5.0, -1.0], [2.0, 2.0]])])
        assert out.shape == (2, 2, 3)
        np.testing.assert_array_equal(out[1, :, 2], [-1.0, -1.0])

    def test_mel_file(self, tmp_path):
        mel = frontend.MelSpectrogram(np.arange(6.0).reshape(2, 3))
        data.save_mel(tmp_path / "x.mel", mel)
        np.testing.assert_array_equal(data.load_mel(tmp_path / "x.mel").values, mel.values)
        manifest = json.loads((tmp_path / "x.mel" / "manifest.json").read_text())
        assert [t["name"] for t in manifest["tensors"]] == ["mel"]


class TestSchedule:
    def test_warmup_closed_form(self):
        stage = TrainSchedule.full_scale(warmup_steps=50).stages[2]
        assert stage.lr(0) == pytest.approx(1e-5)
        assert stage.lr(50) == pytest.approx(1e-4)
        for s in range(0, 60):
            assert stage.lr(s) == pytest.approx(1e-5 + (1e-4 - 1e-5) * min(s, 50) / 50, rel=1e-12)

    def test_full_scale_stages(self):
        frozen, unfrozen, fine = TrainSchedule.full_scale().stages
        assert (frozen.lr(0), frozen.lr(10 ** 6), frozen.freeze_encoder) == (1e-4, 1e-4, True)
        assert (unfrozen.lr(0), unfrozen.freeze_encoder) == (1e-5, False)
        assert [(s.p_f, s.p_t) for s in (frozen, unfrozen, fine)] == [(4, 80), (4, 80), (4, 120)]
        assert TrainSchedule.full_scale().batch_size == 32

    def test_from_config(self):
        stages = TrainSchedule.from_config(config.Config(synth.DESK_CONFIG)).stages
        assert [s.name for s in stages] == list(config.STAGES)
        assert [s.data for s in stages] == ["pretrain", "pretrain", "finetune"]

    def test_validation(self):
        with pytest.raises(ConfigError):
            Stage("x", 1, 0.0)
        with pytest.raises(ConfigError):
            Stage("x", -1, 1e-3)

    def test_logged_lr_matches_closed_form(self, corpus):
        cfg = tiny_config(corpus, **{"stage.finetune.epochs": 3})
        result = runner.train(cfg, log=quiet, write=False)
        fine = TrainSchedule.from_config(cfg).stages[2]
        for row in result.log.rows:
            if row.stage == "finetune":
                assert row.lr == pytest.approx(fine.lr(row.steps - 1), rel=1e-12)


def dataset(root, cfg):
    vocab = Vocabulary.load(cfg.path("data.vocab"))
    tagger, labels = checkpoint.load_tagger(cfg.path("data.tagger"))
    return CaptionDataset(data.read_manifest(root / "train.jsonl"), vocab, labels), labels


def little_model(vocab_size, seed=0):
    cfg = runner.model_config(config.Config(TINY), vocab_size)
    return Captioner(cfg, np.random.default_rng(seed))


class TestRunSchedule:
    def test_freeze_contract(self, corpus):
        cfg = tiny_config(corpus)
        ds, _ = dataset(corpus, cfg)
        model = little_model(len(ds.vocab))
        before = model.state_dict()
        stage = Stage("pretrain_frozen", 2, 1e-3, p_t=1, freeze_encoder=True, data="finetune")
        run_schedule(model, {"finetune": ds}, TrainSchedule([stage], 4), TrainOptions(), np.random.default_rng(0))
        after = model.state_dict()
        enc = set(model.encoder_parameters())
        assert enc and all(after[k].tobytes() == before[k].tobytes() for k in enc)
        for name in ("guide_embed", "decoder.embed", "adapter.proj.w"):
            assert not np.array_equal(after[name], before[name]), name
        assert all(p.requires_grad for p in model.parameters())

    def test_unfrozen_moves_encoder(self, corpus):
        cfg = tiny_config(corpus)
        ds, _ = dataset(corpus, cfg)
        model = little_model(len(ds.vocab))
        before = model.state_dict()
        stage = Stage("pretrain_unfrozen", 1, 1e-3, p_t=1, data="finetune")
        run_schedule(model, {"finetune": ds}, TrainSchedule([stage], 4), TrainOptions(), np.random.default_rng(0))
        assert not np.array_equal(model.state_dict()["encoder.blocks.0.attn.q.w"], before["encoder.blocks.0.attn.q.w"])

    def test_vocab_mismatch(self, corpus):
        cfg = tiny_config(corpus)
        ds, _ = dataset(corpus, cfg)
        model = little_model(len(ds.vocab) + 1)
        with pytest.raises(InputError):
            run_schedule(model, {"finetune": ds}, TrainSchedule.full_scale(), TrainOptions(), np.random.default_rng(0))

    def test_reproducible(self, corpus):
        cfg = tiny_config(corpus)
        a = runner.train(cfg, log=quiet, write=False).log.losses()
        b = runner.train(cfg, log=quiet, write=False).log.losses()
        np.testing.assert_array_equal(a, b)
        c = runner.train(tiny_config(corpus, seed=1), log=quiet, write=False).log.losses()
        assert not np.array_equal(a, c)

    def test_unknown_words_become_unk(self, corpus):
        cfg = tiny_config(corpus)
        vocab = Vocabulary.load(cfg.path("data.vocab"))
        pre = data.read_manifest(corpus / "pretrain.jsonl")
        ids = [i for c in pre.captions() for i in vocab.encode(c)]
        assert max(ids) < len(vocab)
        assert UNK in ids  # the extra clips use a pattern word absent from the base split

    def test_batches(self, corpus):
        cfg = tiny_config(corpus)
        ds, labels = dataset(corpus, cfg)
        b = make_batch(ds, [0, 1, 2], TrainOptions(), np.random.default_rng(0), training=False)
        assert b.mel.shape[0] == 3 and b.captions[:, 0].tolist() == [1, 1, 1]
        expected = [runner.guide_for(checkpoint.Bundle(None, ds.vocab, labels), None, ds.manifest.entries[c].guide_probs)
                    for c in b.clips]
        assert [list(row[row > 0]) for row in b.guide] == expected

    def test_valid_selection(self, corpus):
        cfg = tiny_config(corpus, **{"data.valid": "train.jsonl", "stage.finetune.epochs": 2})
        result = runner.train(cfg, log=quiet, write=False)
        assert all(r.valid is not None for r in result.log.rows)

    def test_thirty_clip_overfit(self, tmp_path):
        # The logged objective includes label smoothing, whose floor (~0.57 nats here) sits
        # above 0.1x the initial loss, so the bound is checked on the unsmoothed CE column.
        root = synth.generate(tmp_path / "c30", n=30, seed=0)
        cfg = config.load_config(root / "run.toml")
        runner.prepare(cfg, log=quiet)
        log = runner.train(cfg, log=quiet, write=False).log
        assert len(log.rows) == 200
        ce = np.array([r.ce for r in log.rows])
        assert ce[-1] < 0.1 * ce[0]


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, corpus, tmp_path):
        result = runner.train(tiny_config(corpus, out=str(tmp_path / "run")), log=quiet)
        assert (tmp_path / "run" / "final" / "weights.bin").exists()
        for stage in config.STAGES:
            assert (tmp_path / "run" / stage / "manifest.json").exists()
        loaded = checkpoint.load_checkpoint(tmp_path / "run" / "final")
        original = result.bundle.model.state_dict()
        for k, v in loaded.model.state_dict().items():
            assert v.tobytes() == original[k].tobytes()
        manifest = data.read_manifest(corpus / "train.jsonl")
        assert runner.caption_manifest(loaded, manifest, 2) == runner.caption_manifest(result.bundle, manifest, 2)
        assert loaded.labels.labels == result.bundle.labels.labels and loaded.tagger is not None

    def test_frozen_stage_checkpoint_loads_trainable(self, corpus, tmp_path):
        runner.train(tiny_config(corpus, out=str(tmp_path / "run")), log=quiet)
        bundle = checkpoint.load_checkpoint(tmp_path / "run" / "pretrain_frozen")
        assert all(p.requires_grad for p in bundle.model.parameters())

    def test_corruption(self, tmp_path):
        model = Captioner(ModelConfig(vocab_size=6, d=8, enc_heads=2, dec_dim=8, dec_heads=2, n_mels=32, max_frames=40))
        bundle = checkpoint.Bundle(model, Vocabulary(["a", "b"]))
        checkpoint.save_checkpoint(tmp_path / "ck", bundle)
        (tmp_path / "ck" / "manifest.json").write_text("{")
        with pytest.raises(CheckpointError):
            checkpoint.load_checkpoint(tmp_path / "ck")
        checkpoint.save_checkpoint(tmp_path / "ck2", bundle)
        meta = json.loads((tmp_path / "ck2" / "manifest.json").read_text())
        meta["meta"]["vocab"] = ["a"]
        (tmp_path / "ck2" / "manifest.json").write_text(json.dumps(meta))
        with pytest.raises(CheckpointError, match="vocabulary"):
            checkpoint.load_checkpoint(tmp_path / "ck2")
        nx.save_tensors(tmp_path / "other", {"x": np.zeros(2)})
        with pytest.raises(CheckpointError):
            checkpoint.load_checkpoint(tmp_path / "other")


class TestReport:
    def test_figures(self, tmp_path):
        log = TrainLog([LogRow("a", 1, 1, 2.0, 2.0, 1e-3, 1, 0.1), LogRow("b", 1, 2, 1.0, 1.0, 1e-3, 2, 0.1, 1.5)])
        for path in (report.plot_losses(log, tmp_path / "l.png"), report.plot_metrics({"bleu1": 0.5}, tmp_path / "m.png")):
            assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert log.to_tsv().splitlines()[0].split("\t")[:4] == ["stage", "epoch", "global_epoch", "loss"]


def sets(overrides):
    out = []
    for k, v in overrides.items():
        out += ["--set", f"{k}={v}"]
    return out


class TestCli:
    def test_end_to_end(self, tmp_path, capsys):
        root = tmp_path / "c"
        assert main(["synth-corpus", "--n", "6", "--out", str(root), "--duration", "1.0", "--seed", "1"]) == 0
        assert (root / "run.toml").exists() and len(list((root / "audio").glob("*.wav"))) == 6
        cfg_args = ["--config", str(root / "run.toml")] + sets(TINY)
        assert main(["prepare"] + cfg_args) == 0
        capsys.readouterr()
        assert main(["train"] + cfg_args) == 0
        tsv = capsys.readouterr().out.splitlines()
        assert tsv[0].startswith("stage\tepoch") and len(tsv) == 4
        assert (root / "run" / "loss.png").exists()

        preds = tmp_path / "preds.jsonl"
        assert main(["infer", "--ckpt", str(root / "run" / "final"), "--manifest", str(root / "train.jsonl"),
                     "--out", str(preds), "--beam", "2"]) == 0
        rows = [json.loads(line) for line in preds.read_text().splitlines()]
        assert len(rows) == 6 and all("caption" in r for r in rows)

        refs = tmp_path / "refs.jsonl"
        refs.write_text("".join(json.dumps({"id": e.id, "captions": e.captions}) + "\n"
                                for e in data.read_manifest(root / "train.jsonl")))
        assert main(["eval", "--pred", str(preds), "--refs", str(refs), "--out", str(tmp_path / "ev")]) == 0
        assert "BLEU-1" in capsys.readouterr().out
        metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
        assert set(metrics) == {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"}
        assert (tmp_path / "ev" / "metrics.png").exists()

        assert main(["infer", "--ckpt", str(root / "run" / "final"), "--in", str(root / "audio" / "clip_000.wav")]) == 0
        assert capsys.readouterr().out.strip()

    def test_featurize_and_pairing(self, tmp_path, capsys):
        clip = frontend.AudioClip(np.sin(np.arange(16000) * 0.3) * 0.5, 16000)
        frontend.write_wav(tmp_path / "a.wav", clip)
        assert main(["featurize", "--in", str(tmp_path / "a.wav"), "--out", str(tmp_path / "a.mel")]) == 0
        assert data.load_mel(tmp_path / "a.mel").values.shape == (128, 61)
        (tmp_path / "c.emb").write_text("x\t1 0\ny\t0 2\n")
        (tmp_path / "l.emb").write_text("p\t0 1\nq\t1 0.1\n")
        capsys.readouterr()
        assert main(["pair-labels", "--captions", str(tmp_path / "c.emb"), "--labels", str(tmp_path / "l.emb")]) == 0
        lines = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
        assert [(c, l) for c, l, _ in lines] == [("0", "1"), ("1", "0")]

    def test_errors_exit_2(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "none.toml")]) == 2
        assert "error" in capsys.readouterr().err
        assert main(["infer", "--ckpt", str(tmp_path)]) == 2
        (tmp_path / "r.toml").write_text("")
        assert main(["train", "--config", str(tmp_path / "r.toml"), "--set", "nonsense"]) == 2
