import math

import numpy as np
import pytest

from captioner import numerics as nx
from captioner.errors import ConfigError, ContractError, DimensionError, InputError
from captioner.model import (
    Adapter,
    Captioner,
    Encoder,
    ModelConfig,
    causal_mask,
    ce_loss,
    count_flops,
    multi_head_attention,
)
from captioner.numerics import Parameter, Tensor
from captioner.vocab import EOS, PAD, SOS


def micro_cfg(**kw):
    base = dict(vocab_size=12, d=8, enc_blocks=1, enc_heads=2, enc_ffn_dim=16, dec_blocks=1, dec_heads=2,
                dec_dim=8, dec_ffn_dim=16, n_mels=32, max_frames=40, max_caption_len=6, decoder_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def f64():
    with nx.default_dtype(np.float64):
        yield


class TestConfig:
    def test_validation(self):
        for bad in (dict(d=10, enc_heads=4), dict(dec_dim=10, dec_heads=4), dict(label_smoothing=1.0),
                    dict(decoder_dropout=-0.1), dict(vocab_size=4)):
            with pytest.raises(ConfigError):
                ModelConfig(**bad)

    def test_dict_round_trip(self):
        cfg = micro_cfg()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})

    def test_full_scale_dimensions(self):
        cfg = ModelConfig.full_scale(5000)
        assert (cfg.d, cfg.enc_blocks, cfg.enc_heads) == (768, 12, 12)
        assert (cfg.dec_dim, cfg.dec_blocks, cfg.dec_heads, cfg.dec_ffn_dim) == (512, 6, 8, 2048)
        assert (cfg.label_smoothing, cfg.decoder_dropout) == (0.1, 0.2)


class TestAttention:
    def test_single_key_returns_value(self):
        rng = np.random.default_rng(0)
        q, k, v = (Tensor(rng.normal(size=(1, 1, 4))) for _ in range(3))
        np.testing.assert_allclose(multi_head_attention(q, k, v, 2).data, v.data)

    def test_causal_first_row(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(1, 3, 4)))
        out = multi_head_attention(x, x, x, 1, causal_mask(3)[None, None])
        np.testing.assert_allclose(out.data[0, 0], x.data[0, 0])

    def test_hand_computed(self):
        q = np.array([[[1.0, 0.0], [0.0, 2.0]]])
        k = np.array([[[1.0, 1.0], [2.0, -1.0]]])
        v = np.array([[[3.0, 0.0], [0.0, 1.0]]])
        # query 0 scores: [1, 2] / sqrt(2); query 1 scores: [2, -2] / sqrt(2)
        w0 = np.exp([1 / math.sqrt(2), 2 / math.sqrt(2)])
        w1 = np.exp([2 / math.sqrt(2), -2 / math.sqrt(2)])
        w0, w1 = w0 / w0.sum(), w1 / w1.sum()
        expected = np.stack([w0 @ v[0], w1 @ v[0]])
        out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), 1).data[0]
        np.testing.assert_allclose(out, expected, atol=1e-6)
        assert w0[0] == pytest.approx(0.330238, abs=1e-6)  # 1 / (1 + e^(1/sqrt 2))

    def test_masked_keys_get_zero_weight(self):
        rng = np.random.default_rng(2)
        q, k, v = Tensor(rng.normal(size=(1, 2, 4))), Tensor(rng.normal(size=(1, 3, 4))), Tensor(rng.normal(size=(1, 3, 4)))
        mask = np.array([True, True, False])[None, None, None, :]
        v2 = Tensor(v.data.copy())
        v2.data[0, 2] = 1e6
        np.testing.assert_allclose(multi_head_attention(q, k, v, 2, mask).data, multi_head_attention(q, k, v2, 2, mask).data)

    def test_contract_errors(self):
        x = Tensor(np.zeros((1, 2, 4)))
        with pytest.raises(ContractError):
            multi_head_attention(x, Tensor(np.zeros((1, 2, 6))), x, 2)
        with pytest.raises(ContractError):
            multi_head_attention(x, x, x, 3)
        with pytest.raises(ContractError):
            multi_head_attention(x, x, x, 1, np.zeros((1, 1, 2, 2), dtype=bool))

    def test_gradient(self, f64):
        rng = np.random.default_rng(3)
        q, k, v = (Parameter(rng.normal(size=(2, 3, 4))) for _ in range(3))
        w = rng.normal(size=(2, 3, 4))
        errors = nx.check_gradients(lambda: (multi_head_attention(q, k, v, 2, causal_mask(3)[None, None]) * w).sum(),
                                    {"q": q, "k": k, "v": v})
        assert max(errors.values()) < 1e-4


class TestEncoder:
    def test_zero_projections_are_normed_identity(self, f64):
        cfg = micro_cfg()
        enc = Encoder(cfg, np.random.default_rng(4))
        for block in enc.blocks:
            block.attn.out.w.data[:] = 0
            block.ffn.fc2.w.data[:] = 0
        x = np.random.default_rng(5).normal(size=(2, 5, 8))
        expected = enc.norm(Tensor(x)).data
        np.testing.assert_allclose(enc(Tensor(x)).data, expected, atol=1e-12)

    def test_shape_and_no_dropout(self):
        enc = Encoder(micro_cfg(), np.random.default_rng(6))
        for length in (1, 4, 9):
            x = Tensor(np.random.default_rng(length).normal(size=(1, length, 8)).astype(np.float32))
            a, b = enc(x, training=True).data, enc(x, training=False).data
            assert a.shape == (1, length, 8)
            np.testing.assert_array_equal(a, b)

    def test_permutation_equivariance(self, f64):
        enc = Encoder(micro_cfg(), np.random.default_rng(7))
        x = np.random.default_rng(8).normal(size=(1, 3, 8))
        swapped = x[:, [0, 2, 1]]
        np.testing.assert_allclose(enc(Tensor(swapped)).data, enc(Tensor(x)).data[:, [0, 2, 1]], atol=1e-12)


class TestAdapter:
    def test_zero_weights(self):
        adapter = Adapter(8, 4, np.random.default_rng(0))
        adapter.proj.w.data[:] = 0
        assert not adapter(Tensor(np.ones((1, 3, 8), np.float32))).data.any()

    def test_full_scale_shape(self):
        adapter = Adapter(768, 512, np.random.default_rng(0))
        assert adapter(Tensor(np.zeros((1, 5, 768), np.float32))).shape == (1, 5, 512)

    def test_gradient(self, f64):
        rng = np.random.default_rng(9)
        adapter = Adapter(6, 4, rng)
        x = Parameter(rng.normal(size=(2, 3, 6)))
        w = rng.normal(size=(2, 3, 4))
        errors = nx.check_gradients(lambda: (adapter(x) * w).sum(), {"x": x, "w": adapter.proj.w, "b": adapter.proj.b})
        assert max(errors.values()) < 1e-4


class TestDecoder:
    def setup_method(self):
        self.model = Captioner(micro_cfg(), np.random.default_rng(10))
        self.memory = Tensor(np.random.default_rng(11).normal(size=(2, 5, 8)).astype(np.float32))

    def test_causality(self):
        ids = np.array([[SOS, 5, 6, 7, 8], [SOS, 9, 10, 11, 4]])
        base = self.model.logits(ids, self.memory).data
        for t in range(1, 5):
            changed = ids.copy()
            changed[:, t] = 4 if ids[0, t] != 4 else 5
            out = self.model.logits(changed, self.memory).data
            np.testing.assert_array_equal(out[:, :t], base[:, :t])
            assert not np.array_equal(out[:, t:], base[:, t:])

    def test_sos_only_shape(self):
        assert self.model.logits(np.array([[SOS], [SOS]]), self.memory).shape == (2, 1, 12)

    def test_zero_cross_values_ignore_memory(self):
        for block in self.model.decoder.blocks:
            block.cross_attn.v.w.data[:] = 0
            block.cross_attn.v.b.data[:] = 0
        ids = np.array([[SOS, 5, 6], [SOS, 7, 8]])
        other = Tensor(np.random.default_rng(12).normal(size=(2, 5, 8)).astype(np.float32))
        np.testing.assert_allclose(self.model.logits(ids, self.memory).data, self.model.logits(ids, other).data, atol=1e-6)

    def test_id_out_of_range(self):
        with pytest.raises(InputError):
            self.model.logits(np.array([[SOS, 12]]), self.memory[:1])

    def test_dropout_only_in_training(self):
        self.model.decoder.rate = 0.5
        ids = np.array([[SOS, 5, 6], [SOS, 7, 8]])
        a = self.model.logits(ids, self.memory).data
        np.testing.assert_array_equal(a, self.model.logits(ids, self.memory).data)
        b = self.model.logits(ids, self.memory, training=True, rng=np.random.default_rng(0)).data
        assert not np.allclose(a, b)
        with pytest.raises(ContractError):
            self.model.logits(ids, self.memory, training=True)

    def test_word_vectors(self):
        from captioner.vocab import Vocabulary

        vocab = Vocabulary([f"w{i}" for i in range(8)])
        vec = np.arange(8.0)
        assert self.model.decoder.load_word_vectors(vocab, {"w3": vec, "unseen": vec}) == 1
        np.testing.assert_array_equal(self.model.decoder.embed.data[vocab.stoi["w3"]], vec)
        with pytest.raises(ConfigError):
            self.model.decoder.load_word_vectors(vocab, {"w1": np.ones(3)})


class TestCaptioner:
    def test_encoder_input_layout(self):
        model = Captioner(micro_cfg(), np.random.default_rng(13))
        mel = np.random.default_rng(14).normal(size=(2, 32, 40))
        patches = model.patch(mel)
        guide = model.embed_guide(np.array([[5, 6], [7, PAD]]))
        seq, mask = model.build_encoder_input(patches, guide, np.array([[1, 1], [1, 0]], bool))
        assert patches.length == 2 * 3
        assert seq.shape == (2, 1 + 6 + 2, 8)
        np.testing.assert_array_equal(seq.data[:, 0], np.repeat(model.cls.data[0], 2, axis=0))
        np.testing.assert_array_equal(seq.data[:, 7:], guide.data)
        np.testing.assert_array_equal(mask[1], [1] * 8 + [0])

    def test_encode_masks_padded_guide(self):
        model = Captioner(micro_cfg(), np.random.default_rng(15))
        mel = np.random.default_rng(16).normal(size=(1, 32, 40))
        a, m = model.encode(mel, guide_ids=np.array([[5, PAD]]))
        b, _ = model.encode(mel, guide_ids=np.array([[5, 9]]))
        assert m.tolist() == [[True] * 8 + [False]]
        assert not np.allclose(a.data, b.data)

    def test_guide_changes_memory(self):
        model = Captioner(micro_cfg(), np.random.default_rng(17))
        mel = np.random.default_rng(18).normal(size=(1, 32, 40))
        without, _ = model.encode(mel)
        with_guide, _ = model.encode(mel, guide_ids=[5])
        assert with_guide.shape[1] == without.shape[1] + 1

    def test_flop_counter(self):
        model = Captioner(micro_cfg(n_mels=128, max_frames=400), np.random.default_rng(19))
        mel = np.zeros((1, 128, 166), np.float32)
        with count_flops() as full:
            model.encode(mel)
        with count_flops() as cut:
            model.encode(mel, p_f=4, p_t=8, rng=np.random.default_rng(0), training=True)
        heads, dh = 2, 4
        assert full["encoder.self.scores"] == 2 * heads * (1 + 12 * 16) ** 2 * dh
        assert cut["encoder.self.scores"] == 2 * heads * (1 + 8 * 8) ** 2 * dh


class TestCeLoss:
    @pytest.mark.parametrize("eps", [0.0, 0.1])
    def test_uniform_logits(self, eps):
        loss = ce_loss(Tensor(np.zeros((2, 3, 10))), np.array([[4, 5, EOS], [6, EOS, PAD]]), eps)
        assert loss.item() == pytest.approx(math.log(10), rel=1e-6)

    def test_confident_limit(self):
        logits = np.full((1, 2, 6), -50.0)
        logits[0, 0, 4] = logits[0, 1, EOS] = 50.0
        assert ce_loss(Tensor(logits), np.array([[4, EOS]])).item() < 1e-12

    def test_equals_explicit_gather(self):
        rng = np.random.default_rng(20)
        logits = rng.normal(size=(3, 4, 7))
        targets = np.array([[4, 5, 2, 0], [6, 2, 0, 0], [4, 4, 4, 2]])
        logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        terms = [-logp[b, t, targets[b, t]] for b in range(3) for t in range(4) if targets[b, t] != PAD]
        assert ce_loss(Tensor(logits), targets).item() == pytest.approx(np.mean(terms), abs=1e-6)

    def test_smoothing_formula(self):
        rng = np.random.default_rng(21)
        logits = rng.normal(size=(1, 2, 5))
        targets = np.array([[4, 2]])
        logp = logits[0] - np.log(np.exp(logits[0]).sum(-1, keepdims=True))
        q = np.full((2, 5), 0.1 / 5)
        q[0, 4] += 0.9
        q[1, 2] += 0.9
        assert ce_loss(Tensor(logits), targets, 0.1).item() == pytest.approx(-(q * logp).sum() / 2, rel=1e-12)

    def test_row_weights(self):
        rng = np.random.default_rng(22)
        logits = Tensor(rng.normal(size=(2, 3, 6)))
        targets = np.array([[4, 5, 2], [5, 2, 0]])
        full = ce_loss(logits, targets).item()
        parts = ce_loss(logits, targets, weights=[0.3, 0.0]).item() + ce_loss(logits, targets, weights=[0.7, 1.0]).item()
        assert parts == pytest.approx(full, rel=1e-6)

    def test_errors(self):
        with pytest.raises(InputError):
            ce_loss(Tensor(np.zeros((1, 2, 5))), np.zeros((1, 2), int))
        with pytest.raises(DimensionError):
            ce_loss(Tensor(np.zeros((1, 2, 5))), np.zeros((1, 3), int))

    def test_gradient(self, f64):
        rng = np.random.default_rng(23)
        logits = Parameter(rng.normal(size=(2, 3, 6)))
        targets = np.array([[4, 5, 2], [5, 2, 0]])
        assert nx.check_gradients(lambda: ce_loss(logits, targets, 0.1), {"logits": logits})["logits"] < 1e-5
