import shutil

import pytest

from captioner.pipeline import config, runner, synth

# Small enough that a full prepare + three-stage run takes a few seconds.
TINY = {
    "patch.dim": 16,
    "model.enc_blocks": 1,
    "model.enc_heads": 2,
    "model.enc_ffn_dim": 32,
    "model.dec_blocks": 1,
    "model.dec_heads": 2,
    "model.dec_dim": 16,
    "model.dec_ffn_dim": 32,
    "patch.max_frames": 200,
    "specaug.max_time_width": 4,
    "stage.pretrain_frozen.epochs": 1,
    "stage.pretrain_unfrozen.epochs": 1,
    "stage.finetune.epochs": 1,
    "stage.pretrain_frozen.patchout.time": 1,
    "stage.pretrain_unfrozen.patchout.time": 1,
    "stage.finetune.patchout.time": 1,
    "stage.finetune.warmup_steps": 2,
    "train.batch_size": 4,
    "tagger.epochs": 3,
    "tagger.batch_size": 4,
    "tagger.dim": 8,
}


def quiet(_msg):
    pass


@pytest.fixture(scope="session")
def prepared_corpus(tmp_path_factory):
    """An 8-clip, 1 s corpus with an enlarged pre-training split, already prepared."""
    root = tmp_path_factory.mktemp("corpus")
    synth.generate(root, n=8, seed=3, duration=1.0, extra=4)
    runner.prepare(config.load_config(root / "run.toml", TINY), log=quiet)
    return root


@pytest.fixture
def corpus(prepared_corpus, tmp_path):
    """A private copy of the prepared corpus (tests may write runs into it)."""
    dest = tmp_path / "corpus"
    shutil.copytree(prepared_corpus, dest)
    return dest


def tiny_config(root, **overrides):
    return config.load_config(root / "run.toml", {**TINY, **overrides})


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
