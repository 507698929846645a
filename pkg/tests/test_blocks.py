"""ViT constituents: patch embedding geometry, class token placement,
positional embeddings, attention against a dense oracle, encoder block
semantics, stochastic depth statistics."""

import numpy as np
import pytest

from sctfusion import autograd as ag
from sctfusion.autograd import Tensor
from sctfusion.blocks import (
    AttentionParams,
    BlockParams,
    add_positional_embedding,
    append_class_token,
    encoder_block,
    extract_patches,
    multi_head_self_attention,
    patch_embed,
    stochastic_depth,
)
from sctfusion.configs import ModalitySpec
from sctfusion.errors import ShapeError


def make_attention_params(d: int, rng, dtype=np.float64) -> AttentionParams:
    def w():
        return Tensor(rng.standard_normal((d, d)) * 0.3, requires_grad=True, dtype=dtype)

    def b():
        return Tensor(rng.standard_normal(d) * 0.1, requires_grad=True, dtype=dtype)

    return AttentionParams(wq=w(), bq=b(), wk=w(), wv=w(), bv=b(), wo=w(), bo=b())


def make_block_params(d: int, hidden: int, rng, dtype=np.float64) -> BlockParams:
    def t(shape, scale=0.3):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=dtype)

    return BlockParams(
        ln1_gamma=Tensor(np.ones(d), requires_grad=True, dtype=dtype),
        ln1_beta=Tensor(np.zeros(d), requires_grad=True, dtype=dtype),
        attn=make_attention_params(d, rng, dtype),
        ln2_gamma=Tensor(np.ones(d), requires_grad=True, dtype=dtype),
        ln2_beta=Tensor(np.zeros(d), requires_grad=True, dtype=dtype),
        mlp_w1=t((d, hidden)),
        mlp_b1=t((hidden,), 0.1),
        mlp_w2=t((hidden, d)),
        mlp_b2=t((d,), 0.1),
    )


class TestPatchEmbed:
    def test_token_count_120x120_p15(self):
        spec = ModalitySpec(name="m", height=120, width=120, channels=1, patch_size=15)
        assert spec.num_patches == 64
        w = Tensor(np.zeros((spec.patch_dim, 4)))
        b = Tensor(np.zeros(4))
        tokens = patch_embed(np.zeros((120, 120, 1), dtype=np.float32), spec, w, b)
        assert tokens.shape == (64, 4)

    def test_token_count_30x30_p15(self):
        spec = ModalitySpec(name="m", height=30, width=30, channels=2, patch_size=15)
        assert spec.num_patches == 4

    def test_zero_image_zero_bias_gives_zero_tokens(self):
        spec = ModalitySpec(name="m", height=8, width=8, channels=2, patch_size=4)
        rng = np.random.default_rng(0)
        w = Tensor(rng.standard_normal((spec.patch_dim, 5)), dtype=np.float64)
        b = Tensor(np.zeros(5), dtype=np.float64)
        tokens = patch_embed(np.zeros((8, 8, 2)), spec, w, b)
        np.testing.assert_array_equal(tokens.data, 0.0)

    def test_patch_flattening_is_row_major(self):
        """Grid row-major over patches; (rows, cols, channels) inside one."""
        h = w = 4
        p = 2
        image = np.arange(h * w * 1, dtype=np.float64).reshape(h, w, 1)
        patches = extract_patches(image[None], p)[0]
        np.testing.assert_array_equal(patches[0], [0, 1, 4, 5])  # top-left patch
        np.testing.assert_array_equal(patches[1], [2, 3, 6, 7])  # top-right next
        np.testing.assert_array_equal(patches[2], [8, 9, 12, 13])

    def test_channel_interleaving_inside_patch(self):
        image = np.zeros((2, 2, 2))
        image[0, 0, 0] = 1.0
        image[0, 0, 1] = 2.0
        patches = extract_patches(image[None], 2)[0]
        np.testing.assert_array_equal(patches[0][:2], [1.0, 2.0])

    def test_mismatched_image_rejected(self):
        spec = ModalitySpec(name="m", height=8, width=8, channels=1, patch_size=4)
        with pytest.raises(ShapeError, match="'m'"):
            patch_embed(
                np.zeros((8, 6, 1)), spec, Tensor(np.zeros((16, 4))), Tensor(np.zeros(4))
            )


class TestClassToken:
    def test_lengths(self):
        cls = Tensor(np.arange(4.0))
        for k in (64, 4):
            tokens = Tensor(np.zeros((k, 4)))
            assert append_class_token(tokens, cls).shape == (k + 1, 4)

    def test_class_token_is_last_and_verbatim(self):
        cls = Tensor(np.array([1.0, 2.0, 3.0]))
        seq = append_class_token(Tensor(np.zeros((5, 3))), cls)
        np.testing.assert_array_equal(seq.data[-1], cls.data)

    def test_batched_broadcast(self):
        cls = Tensor(np.array([1.0, 2.0]))
        seq = append_class_token(Tensor(np.zeros((3, 4, 2))), cls)
        assert seq.shape == (3, 5, 2)
        for i in range(3):
            np.testing.assert_array_equal(seq.data[i, -1], cls.data)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            append_class_token(Tensor(np.zeros((4, 3))), Tensor(np.zeros(2)))


class TestPositionalEmbedding:
    def test_zero_table_is_identity(self):
        rng = np.random.default_rng(1)
        seq = Tensor(rng.standard_normal((2, 5, 3)), dtype=np.float64)
        out = add_positional_embedding(seq, Tensor(np.zeros((5, 3)), dtype=np.float64), True)
        np.testing.assert_array_equal(out.data, seq.data)

    def test_disabled_is_identity_regardless(self):
        rng = np.random.default_rng(2)
        seq = Tensor(rng.standard_normal((5, 3)))
        pos = Tensor(rng.standard_normal((5, 3)))
        out = add_positional_embedding(seq, pos, False)
        np.testing.assert_array_equal(out.data, seq.data)

    def test_enabled_adds_elementwise(self):
        rng = np.random.default_rng(3)
        seq = Tensor(rng.standard_normal((2, 5, 3)), dtype=np.float64)
        pos = Tensor(rng.standard_normal((5, 3)), dtype=np.float64)
        out = add_positional_embedding(seq, pos, True)
        np.testing.assert_allclose(out.data, seq.data + pos.data, atol=0)


def dense_attention_oracle(x: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Single-head attention written out longhand in float64."""
    q = x @ p.wq.data + p.bq.data
    k = x @ p.wk.data
    v = x @ p.wv.data + p.bv.data
    d = x.shape[-1]
    scores = q @ k.T / np.sqrt(d)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)
    return (probs @ v) @ p.wo.data + p.bo.data


class TestMultiHeadSelfAttention:
    def test_single_token_weight_is_one(self):
        rng = np.random.default_rng(4)
        params = make_attention_params(4, rng)
        x = rng.standard_normal((1, 4))
        weights = []
        out = multi_head_self_attention(Tensor(x, dtype=np.float64), params, heads=2,
                                        weights_out=weights)
        for w in weights:
            np.testing.assert_allclose(w, 1.0)
        v = x @ params.wv.data + params.bv.data
        expected = v @ params.wo.data + params.bo.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_identical_tokens_identical_rows(self):
        rng = np.random.default_rng(5)
        params = make_attention_params(6, rng)
        row = rng.standard_normal(6)
        x = np.tile(row, (2, 1))
        out = multi_head_self_attention(Tensor(x, dtype=np.float64), params, heads=3)
        np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-12)

    def test_matches_dense_oracle_single_head(self):
        rng = np.random.default_rng(6)
        params = make_attention_params(4, rng)
        x = rng.standard_normal((3, 4))
        out = multi_head_self_attention(Tensor(x, dtype=np.float64), params, heads=1)
        np.testing.assert_allclose(out.data, dense_attention_oracle(x, params), atol=1e-10)

    def test_attention_rows_stochastic(self):
        rng = np.random.default_rng(7)
        params = make_attention_params(8, rng)
        x = rng.standard_normal((2, 6, 8))
        weights = []
        multi_head_self_attention(Tensor(x, dtype=np.float64), params, heads=4,
                                  weights_out=weights)
        assert len(weights) == 4
        for w in weights:
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)

    def test_head_split_matches_column_slicing(self):
        """Multi-head output equals running each head on its own column block
        and concatenating — the reshape/permute path is exactly that."""
        rng = np.random.default_rng(8)
        d, heads = 6, 3
        params = make_attention_params(d, rng)
        x = rng.standard_normal((4, d))
        out = multi_head_self_attention(Tensor(x, dtype=np.float64), params, heads=heads)

        hd = d // heads
        q = x @ params.wq.data + params.bq.data
        k = x @ params.wk.data
        v = x @ params.wv.data + params.bv.data
        merged = np.zeros_like(x)
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            scores = q[:, sl] @ k[:, sl].T / np.sqrt(hd)
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            probs = e / e.sum(axis=-1, keepdims=True)
            merged[:, sl] = probs @ v[:, sl]
        expected = merged @ params.wo.data + params.bo.data
        np.testing.assert_allclose(out.data, expected, atol=1e-10)


class TestStochasticDepth:
    def test_rate_zero_identity_both_modes(self):
        x = Tensor(np.ones((3, 2, 2)))
        rng = np.random.default_rng(0)
        for training in (False, True):
            out = stochastic_depth(x, 0.0, training, rng)
            np.testing.assert_array_equal(out.data, x.data)

    def test_eval_identity_any_rate(self):
        x = Tensor(np.full((4, 2, 2), 7.0))
        out = stochastic_depth(x, 0.25, training=False, rng=None)
        np.testing.assert_array_equal(out.data, x.data)

    def test_invalid_rate(self):
        x = Tensor(np.ones((2, 2, 2)))
        for rate in (-0.1, 1.0, 1.5):
            with pytest.raises(ShapeError):
                stochastic_depth(x, rate, True, np.random.default_rng(0))

    def test_drop_frequency_and_compensation(self):
        """Monte-Carlo: drop rate 0.25 +- 0.01 over 1e5 samples, and the
        surviving branches are rescaled so the mean is preserved."""
        n = 100_000
        rate = 0.25
        x = Tensor(np.ones((n, 1, 1)))
        rng = np.random.default_rng(123)
        out = stochastic_depth(x, rate, training=True, rng=rng)
        flat = out.data.reshape(-1)
        dropped = np.mean(flat == 0.0)
        assert abs(dropped - rate) < 0.01
        assert abs(flat.mean() - 1.0) < 0.01
        kept = flat[flat != 0]
        np.testing.assert_allclose(kept, 1.0 / (1.0 - rate))

    def test_masks_drawn_per_sample(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.ones((64, 2, 3)))
        out = stochastic_depth(x, 0.5, training=True, rng=rng)
        per_sample = out.data.reshape(64, -1)
        for row in per_sample:
            assert np.all(row == row[0])
        assert len(np.unique(per_sample[:, 0])) == 2


class TestEncoderBlock:
    def test_drop_rate_zero_training_equals_eval(self):
        rng = np.random.default_rng(9)
        params = make_block_params(4, 16, rng)
        x = Tensor(rng.standard_normal((2, 5, 4)), dtype=np.float64)
        out_train = encoder_block(x, params, heads=2, drop_rate=0.0, training=True,
                                  rng=np.random.default_rng(0))
        out_eval = encoder_block(x, params, heads=2, drop_rate=0.0, training=False, rng=None)
        np.testing.assert_array_equal(out_train.data, out_eval.data)

    def test_eval_is_pure_function(self):
        rng = np.random.default_rng(10)
        params = make_block_params(4, 16, rng)
        x = Tensor(rng.standard_normal((2, 5, 4)), dtype=np.float64)
        a = encoder_block(x, params, heads=2, drop_rate=0.4, training=False, rng=None)
        b = encoder_block(x, params, heads=2, drop_rate=0.4, training=False, rng=None)
        np.testing.assert_array_equal(a.data, b.data)

    def test_training_reproducible_under_fixed_seed(self):
        rng = np.random.default_rng(11)
        params = make_block_params(4, 16, rng)
        x = Tensor(rng.standard_normal((8, 5, 4)), dtype=np.float64)
        a = encoder_block(x, params, heads=2, drop_rate=0.25, training=True,
                          rng=np.random.default_rng(42))
        b = encoder_block(x, params, heads=2, drop_rate=0.25, training=True,
                          rng=np.random.default_rng(42))
        np.testing.assert_array_equal(a.data, b.data)

    def test_preserves_shape(self):
        rng = np.random.default_rng(12)
        params = make_block_params(6, 24, rng)
        for shape in [(1, 3, 6), (4, 9, 6)]:
            x = Tensor(rng.standard_normal(shape), dtype=np.float64)
            out = encoder_block(x, params, heads=2, drop_rate=0.0, training=False, rng=None)
            assert out.shape == shape

    def test_permuting_tokens_permutes_outputs(self):
        """Self-attention is permutation-equivariant; with no positional
        information the block commutes with any token permutation."""
        rng = np.random.default_rng(13)
        params = make_block_params(4, 16, rng)
        x = rng.standard_normal((7, 4))
        perm = rng.permutation(7)
        out = encoder_block(Tensor(x, dtype=np.float64), params, heads=2,
                            drop_rate=0.0, training=False, rng=None)
        out_perm = encoder_block(Tensor(x[perm], dtype=np.float64), params, heads=2,
                                 drop_rate=0.0, training=False, rng=None)
        np.testing.assert_allclose(out.data[perm], out_perm.data, atol=1e-10)
