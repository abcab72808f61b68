import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from exgen.checkpoint import (CheckpointCorruptError, CheckpointVersionError,
                              checkpoint_load, checkpoint_save)
from exgen.model import (LengthOverflowError, ModelConfig, SamplerConfig,
                         TinyLM, derive_seed, lora_apply, sample, sample_batch)
from exgen.vocab import build_vocab


class TestTokenizer:
    def test_empty_round_trip(self, tiny_vocab):
        assert tiny_vocab.tokenize("") == []
        assert tiny_vocab.detokenize([]) == ""

    def test_in_vocab_round_trip(self, tiny_vocab, tiny_corpus):
        text = tiny_corpus["triplets"][0].reference
        ids = tiny_vocab.tokenize(text)
        assert tiny_vocab.detokenize(ids) == " ".join(text.split())

    def test_unknown_word_byte_fallback(self, tiny_vocab):
        ids = tiny_vocab.tokenize("zyqqx")
        assert all(4 <= i < 260 for i in ids)
        assert tiny_vocab.detokenize(ids) == "zyqqx"

    def test_adjacent_unknown_words_stay_separate(self, tiny_vocab):
        assert tiny_vocab.detokenize(tiny_vocab.tokenize("zyq qxv")) == "zyq qxv"

    def test_specials_cannot_be_smuggled(self, tiny_vocab):
        ids = tiny_vocab.tokenize("<eos>")
        assert tiny_vocab.eos_id not in ids

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.sampled_from(["the", "crew", "zebra-x", "模型", "a.b"]),
                    min_size=0, max_size=8))
    def test_round_trip_property(self, tiny_vocab, words):
        text = " ".join(words)
        assert tiny_vocab.detokenize(tiny_vocab.tokenize(text)) == text

    def test_vocab_ids_dense_and_bijective(self, tiny_vocab):
        assert len(set(tiny_vocab.tokens)) == len(tiny_vocab)
        for i, tok in enumerate(tiny_vocab.tokens):
            assert tiny_vocab.lookup(tok) == i

    def test_build_vocab_caps_size(self):
        texts = [f"word{i}" for i in range(100)]
        vocab = build_vocab(texts, max_size=270)
        assert len(vocab) == 270


class TestForward:
    def test_causality(self, tiny_model, tiny_vocab):
        rng = np.random.default_rng(0)
        ids = rng.integers(260, len(tiny_vocab), size=16).tolist()
        with torch.no_grad():
            base = tiny_model.forward(torch.tensor([ids]))
        edited = list(ids)
        edited[10:] = reversed(edited[10:])
        with torch.no_grad():
            after = tiny_model.forward(torch.tensor([edited]))
        assert torch.equal(base[0, :10], after[0, :10])
        assert not torch.equal(base[0, 10:], after[0, 10:])

    def test_zero_adapter_matches_no_adapter(self, tiny_vocab):
        base_cfg = dict(vocab_size=len(tiny_vocab), context_length=64,
                        embed_dim=32, num_layers=2, num_heads=2)
        with_adapter = TinyLM(ModelConfig(**base_cfg, adapter_rank=4), tiny_vocab, seed=5)
        without = TinyLM(ModelConfig(**base_cfg, adapter_rank=0), tiny_vocab, seed=5)
        ids = torch.tensor([[261, 262, 263, 264]])
        with torch.no_grad():
            assert torch.equal(with_adapter.forward(ids), without.forward(ids))

    def test_nonzero_adapter_changes_logits(self, tiny_vocab):
        cfg = ModelConfig(vocab_size=len(tiny_vocab), context_length=64,
                          embed_dim=32, num_layers=2, num_heads=2, adapter_rank=4)
        model = TinyLM(cfg, tiny_vocab, seed=5)
        ids = torch.tensor([[261, 262, 263, 264]])
        with torch.no_grad():
            before = model.forward(ids).clone()
            model.blocks[0].adapter_b_v.fill_(0.3)
            changed = model.forward(ids)
            model.blocks[0].adapter_b_v.zero_()
            restored = model.forward(ids)
        assert not torch.equal(before, changed)
        assert torch.equal(before, restored)

    def test_rows_normalize(self, tiny_model):
        ids = torch.tensor([[300, 301, 302, 303, 304]])
        with torch.no_grad():
            probs = torch.softmax(tiny_model.forward(ids), dim=-1)
        assert torch.allclose(probs.sum(-1), torch.ones_like(probs.sum(-1)),
                              atol=1e-9)

    def test_context_overflow(self, tiny_model):
        too_long = torch.zeros((1, tiny_model.config.context_length + 1),
                               dtype=torch.long)
        with pytest.raises(LengthOverflowError):
            tiny_model.forward(too_long)


class TestSequenceLogProb:
    def test_uniform_model_gives_log_vocab(self, tiny_vocab):
        cfg = ModelConfig(vocab_size=len(tiny_vocab), context_length=64,
                          embed_dim=32, num_layers=1, num_heads=2, adapter_rank=0)
        model = TinyLM(cfg, tiny_vocab, seed=1)
        with torch.no_grad():
            model.lm_head.zero_()
            lps = model.sequence_log_prob([261, 262], [263, 264, 265])
        expected = -np.log(len(tiny_vocab))
        assert np.allclose(lps.numpy(), expected, atol=1e-12)

    def test_empty_response(self, tiny_model):
        lps = tiny_model.sequence_log_prob([261, 262], [])
        assert lps.shape == (0,)
        assert float(lps.sum()) == 0.0

    def test_matches_forward_softmax_oracle(self, tiny_model, tiny_vocab):
        prompt, response = [261, 280, 300], [305, 310, 261, 330]
        with torch.no_grad():
            lps = tiny_model.sequence_log_prob(prompt, response)
            full = [tiny_vocab.bos_id, *prompt, *response]
            logits = tiny_model.forward(torch.tensor([full]))[0]
        for t, tok in enumerate(response):
            row = logits[len(prompt) + t]
            oracle = float(torch.log(torch.softmax(row, -1)[tok]))
            assert abs(float(lps[t]) - oracle) < 1e-9

    def test_all_values_nonpositive(self, tiny_model):
        with torch.no_grad():
            lps = tiny_model.sequence_log_prob([261], [262, 263, 264])
        assert (lps <= 0).all()


class TestSample:
    def test_seed_determinism(self, tiny_model):
        cfg = SamplerConfig(temperature=1.0, max_new_tokens=16, seed=42)
        assert sample(tiny_model, [261, 262], cfg) == sample(tiny_model, [261, 262], cfg)

    def test_identity_hook_neutral(self, tiny_model):
        cfg = SamplerConfig(temperature=1.0, max_new_tokens=16, seed=7)
        plain = sample(tiny_model, [261], cfg)
        hooked = sample(tiny_model, [261], cfg, logit_transform=lambda row: row)
        assert plain == hooked

    def test_greedy_ignores_seed(self, tiny_model):
        a = sample(tiny_model, [261], SamplerConfig(temperature=0.0,
                                                    max_new_tokens=12, seed=1))
        b = sample(tiny_model, [261], SamplerConfig(temperature=0.0,
                                                    max_new_tokens=12, seed=999))
        assert a == b
        with torch.no_grad():
            row = tiny_model.forward(torch.tensor([[tiny_model.vocab.bos_id, 261]]))[0, -1]
        assert a[0] == int(torch.argmax(row))

    def test_prompt_overflow_raises(self, tiny_model):
        prompt = [261] * tiny_model.config.context_length
        with pytest.raises(LengthOverflowError):
            sample(tiny_model, prompt, SamplerConfig(max_new_tokens=4, seed=0))

    def test_batch_rows_match_solo_seeds(self, tiny_model):
        cfg = SamplerConfig(temperature=1.0, max_new_tokens=10, seed=0)
        seeds = [derive_seed(5, "variant", i) for i in range(3)]
        rows = sample_batch(tiny_model, [261, 262], seeds, cfg)
        assert len(rows) == 3
        assert len({tuple(r) for r in rows}) > 1  # independent streams

    def test_max_new_tokens_respected(self, tiny_model):
        out = sample(tiny_model, [261], SamplerConfig(temperature=1.0,
                                                      max_new_tokens=5, seed=3))
        assert len(out) <= 5

    def test_top_k_restricts_support(self, tiny_model):
        with torch.no_grad():
            row = tiny_model.forward(
                torch.tensor([[tiny_model.vocab.bos_id, 261]]))[0, -1].numpy()
        allowed = set(np.argsort(-row)[:2].tolist())
        cfg = SamplerConfig(temperature=1.0, top_k=2, max_new_tokens=1, seed=0)
        outs = {sample(tiny_model, [261], SamplerConfig(temperature=1.0, top_k=2,
                                                        max_new_tokens=1, seed=s))[0]
                for s in range(25)}
        assert outs <= allowed | {tiny_model.vocab.eos_id}

    def test_sampler_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(temperature=-1.0)
        with pytest.raises(ValueError):
            SamplerConfig(max_new_tokens=0)
        with pytest.raises(ValueError):
            SamplerConfig(top_k=-2)


class TestLoraApply:
    def test_zero_b_is_identity(self):
        w = torch.randn(4, 4, dtype=torch.float64)
        a = torch.randn(2, 4, dtype=torch.float64)
        b = torch.zeros(4, 2, dtype=torch.float64)
        assert torch.equal(lora_apply(w, (a, b), 1.5), w)

    def test_zero_scale_is_identity(self):
        w = torch.randn(4, 4, dtype=torch.float64)
        a = torch.randn(2, 4, dtype=torch.float64)
        b = torch.randn(4, 2, dtype=torch.float64)
        assert torch.equal(lora_apply(w, (a, b), 0.0), w)

    def test_rank_one_hand_case(self):
        # W + 2 * (B @ A) with B = [[1], [2]], A = [[3, 4]]:
        # B @ A = [[3, 4], [6, 8]]
        w = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        a = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
        b = torch.tensor([[1.0], [2.0]], dtype=torch.float64)
        expected = torch.tensor([[7.0, 8.0], [12.0, 17.0]], dtype=torch.float64)
        assert torch.equal(lora_apply(w, (a, b), 2.0), expected)

    def test_shape_mismatch(self):
        w = torch.zeros(4, 4, dtype=torch.float64)
        a = torch.zeros(2, 3, dtype=torch.float64)
        b = torch.zeros(4, 2, dtype=torch.float64)
        with pytest.raises(ValueError):
            lora_apply(w, (a, b), 1.0)


class TestCheckpoint:
    def _model(self, vocab, *, heads=False) -> TinyLM:
        cfg = ModelConfig(vocab_size=len(vocab), context_length=64,
                          embed_dim=32, num_layers=2, num_heads=2,
                          adapter_rank=4)
        model = TinyLM(cfg, vocab, seed=11)
        if heads:
            model.add_reward_head(seed=1)
            model.add_value_head(seed=2)
        return model

    def test_round_trip_identical_logits(self, tiny_vocab, tmp_path):
        model = self._model(tiny_vocab, heads=True)
        with torch.no_grad():
            model.blocks[0].adapter_b_q.normal_(0, 0.1,
                                                generator=torch.Generator().manual_seed(3))
        path = tmp_path / "model.rceg"
        checkpoint_save(model, path)
        loaded = checkpoint_load(path)
        ids = torch.tensor([[261, 300, 310, 320]])
        with torch.no_grad():
            assert torch.equal(model.forward(ids), loaded.forward(ids))
        assert loaded.has_reward_head and loaded.has_value_head
        assert torch.equal(loaded.reward_w, model.reward_w)

    def test_round_trip_bit_exact_bytes(self, tiny_vocab, tmp_path):
        model = self._model(tiny_vocab)
        path_a, path_b = tmp_path / "a.rceg", tmp_path / "b.rceg"
        checkpoint_save(model, path_a)
        checkpoint_save(checkpoint_load(path_a), path_b)
        assert path_a.read_bytes() == path_b.read_bytes()

    def test_truncated_file_is_corrupt(self, tiny_vocab, tmp_path):
        model = self._model(tiny_vocab)
        path = tmp_path / "model.rceg"
        checkpoint_save(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:-1])
        with pytest.raises(CheckpointCorruptError):
            checkpoint_load(path)

    def test_flipped_byte_is_corrupt(self, tiny_vocab, tmp_path):
        model = self._model(tiny_vocab)
        path = tmp_path / "model.rceg"
        checkpoint_save(model, path)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointCorruptError):
            checkpoint_load(path)

    def test_future_version_rejected(self, tiny_vocab, tmp_path):
        import hashlib
        import struct

        model = self._model(tiny_vocab)
        path = tmp_path / "model.rceg"
        checkpoint_save(model, path)
        data = bytearray(path.read_bytes())[:-32]
        data[4:8] = struct.pack("<I", 99)
        payload = bytes(data)
        path.write_bytes(payload + hashlib.sha256(payload).digest())
        with pytest.raises(CheckpointVersionError):
            checkpoint_load(path)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, embed_dim=30, num_heads=4)
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, context_length=1)
