import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalearn_lab import tensor as T
from scalearn_lab.backbone import (
    BackboneConfig,
    BackboneParams,
    WarmupSpec,
    _layer_pre,
    encode_prefix,
    encoder_forward,
    init_backbone,
    masked_token_accuracy,
    pad_tokens,
    pool_first,
)
from scalearn_lab.errors import ConfigError, DataError
from scalearn_lab.taskgen import corpus
from scalearn_lab.tensor import Tensor

from conftest import TINY

SEQS = [[0, 5, 9, 3], [0, 7, 7, 12, 30, 2], [0, 4]]


class TestInit:
    def test_same_seed_bit_identical(self):
        assert init_backbone(TINY, 3).snapshot() == init_backbone(TINY, 3).snapshot()

    def test_frozen_after_init(self, tiny_backbone):
        assert tiny_backbone.frozen
        assert not any(t.requires_grad for t in tiny_backbone.tensors.values())

    def test_null_warmup_matches_plain_init(self, tiny_benchmark):
        spec = WarmupSpec(corpus(tiny_benchmark), steps=1, lr=0.0)
        assert init_backbone(TINY, 0, spec).snapshot() == init_backbone(TINY, 0).snapshot()

    def test_warmup_beats_uniform_guessing(self, tiny_benchmark):
        seqs = corpus(tiny_benchmark)
        bb = init_backbone(TINY, 0, WarmupSpec(seqs, steps=200, lr=3e-3))
        acc = masked_token_accuracy(bb, seqs[:256])
        assert acc > 1.0 / TINY.vocab_size
        assert bb.meta["warmup"]["last_loss"] < bb.meta["warmup"]["first_loss"]

    def test_warmup_rejects_out_of_vocabulary(self):
        with pytest.raises(DataError, match="outside vocab_size"):
            init_backbone(TINY, 0, WarmupSpec([[0, 3, TINY.vocab_size]], steps=1))

    @pytest.mark.parametrize("bad", [dict(d_model=15), dict(n_layers=0), dict(vocab_size=2),
                                     dict(dropout_p=1.0)])
    def test_config_validation(self, bad):
        with pytest.raises(ConfigError):
            BackboneConfig(**{**TINY.__dict__, **bad})

    def test_checkpoint_round_trip(self, tiny_backbone, tmp_path):
        tiny_backbone.save(tmp_path / "bb")
        loaded = BackboneParams.load(tmp_path / "bb")
        assert loaded.snapshot() == tiny_backbone.snapshot()
        assert loaded.config == tiny_backbone.config and loaded.frozen


class TestEncoderForward:
    def test_single_sequence_shapes(self, tiny_backbone):
        hidden, pooled = encoder_forward(SEQS[0], tiny_backbone)
        assert hidden.shape == (4, TINY.d_model) and pooled.shape == (TINY.d_model,)

    def test_batch_shapes(self, tiny_backbone):
        hidden, pooled = encoder_forward(SEQS, tiny_backbone)
        assert hidden.shape == (3, 6, TINY.d_model) and pooled.shape == (3, TINY.d_model)

    def test_identity_plugin_is_transparent(self, tiny_backbone):
        _, plain = encoder_forward(SEQS, tiny_backbone)
        _, plugged = encoder_forward(SEQS, tiny_backbone, lambda l, f: f)
        assert plain.data.tobytes() == plugged.data.tobytes()

    def test_zero_plugin_matches_manual_composition(self):
        bb = init_backbone(TINY, 5)
        ids, _ = pad_tokens([SEQS[1]])
        t = bb.tensors
        x = T.embedding(ids, t["tok_emb"]) + t["pos_emb"][: ids.shape[1]]
        for l in range(TINY.n_layers):
            h, _ = _layer_pre(x, bb, l, None, 0.0, None, False)
            x = h
        manual = T.layer_norm(x, t["lnf_g"], t["lnf_b"]).data[:, 0, :]
        _, pooled = encoder_forward([SEQS[1]], bb, lambda l, f: T.scale(f, 0.0))
        np.testing.assert_allclose(pooled.data, manual, rtol=1e-6, atol=1e-7)

    def test_different_seeds_differ(self):
        _, a = encoder_forward(SEQS[0], init_backbone(TINY, 0))
        _, b = encoder_forward(SEQS[0], init_backbone(TINY, 1))
        assert not np.array_equal(a.data, b.data)

    def test_eval_mode_deterministic(self):
        bb = init_backbone(BackboneConfig(**{**TINY.__dict__, "dropout_p": 0.2}), 0)
        first = encoder_forward(SEQS, bb, train=False)[1].data
        assert first.tobytes() == encoder_forward(SEQS, bb, train=False)[1].data.tobytes()

    def test_over_length_is_an_error(self, tiny_backbone):
        with pytest.raises(DataError, match="exceeds max_seq_len"):
            encoder_forward(list(range(2, 2 + TINY.max_seq_len + 1)), tiny_backbone)

    def test_padding_does_not_leak(self, tiny_backbone):
        _, alone = encoder_forward([SEQS[2]], tiny_backbone)
        _, batched = encoder_forward(SEQS, tiny_backbone)
        np.testing.assert_allclose(batched.data[2], alone.data[0], rtol=1e-5, atol=1e-6)

    def test_cached_prefix_matches(self, tiny_backbone):
        ids, mask = pad_tokens(SEQS)
        prefix = encode_prefix(ids, tiny_backbone, mask)
        plug = lambda l, f: T.scale(f, 0.5)  # noqa: E731
        _, direct = encoder_forward(ids, tiny_backbone, plug, mask=mask)
        _, cached = encoder_forward(ids, tiny_backbone, plug, mask=mask, prefix=prefix)
        assert direct.data.tobytes() == cached.data.tobytes()

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.integers(2, TINY.vocab_size - 1), min_size=1, max_size=TINY.max_seq_len))
    def test_output_is_finite(self, tiny_backbone, tokens):
        _, pooled = encoder_forward(tokens, tiny_backbone)
        assert np.isfinite(pooled.data).all()


class TestPoolFirst:
    def test_unit_row(self):
        hidden = Tensor(np.vstack([np.eye(4)[0], np.ones((2, 4))]))
        np.testing.assert_array_equal(pool_first(hidden).data, np.eye(4)[0])

    def test_single_row(self):
        np.testing.assert_array_equal(pool_first(Tensor([[3.0, 4.0]])).data, [3.0, 4.0])

    def test_random_first_row(self, rng):
        h = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(pool_first(Tensor(h)).data, h[0].astype(np.float32))

    def test_empty_sequence(self):
        with pytest.raises(DataError):
            pool_first(T.zeros((0, 4)))
