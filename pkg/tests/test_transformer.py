"""Tests for attention, positional embeddings and transformer layers.
"""
import numpy as np
import pytest
from rego.base import DimensionError
from rego.tensor import Tensor, backward
from rego.transformer import DecoderLayer, EncoderLayer, MultiHeadAttention, attention
from rego.transformer import multi_head_attention, positional_embedding


@pytest.fixture
def attn(rng):
    return MultiHeadAttention(8, 2, rng)


class TestAttention:
    """Tests for scaled dot-product multi-head attention.
    """

    def test_shapes_and_normalization(self, attn, rng):
        """Verify output shape and that each head's weights sum to one per query.
        """
        out, weights = attention(attn, Tensor(rng.normal(size=(3, 8))),
                                 Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(5, 8))))
        assert out.shape == (3, 8)
        assert weights.shape == (2, 3, 5)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0)

    def test_module_call_keeps_weights(self, attn, rng):
        """Verify the module stores the last attention weights.
        """
        attn(Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(4, 8))))
        assert attn.weights.shape == (2, 2, 4)

    def test_self_attention_helper(self, attn, rng):
        """Verify keys and values default to the memory tensor.
        """
        x, mem = Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(4, 8)))
        out, _ = multi_head_attention(attn, x, mem)
        expected, _ = attention(attn, x, mem, mem)
        np.testing.assert_array_equal(out.data, expected.data)

    def test_single_key(self, attn, rng):
        """Verify one key gives weight one to every query.
        """
        _, weights = attention(attn, Tensor(rng.normal(size=(3, 8))),
                               Tensor(rng.normal(size=(1, 8))), Tensor(rng.normal(size=(1, 8))))
        np.testing.assert_allclose(weights, 1.0)

    def test_empty_memory(self, attn, rng):
        """Verify attention onto an empty sequence is rejected.
        """
        with pytest.raises(DimensionError, match='empty'):
            attention(attn, Tensor(rng.normal(size=(3, 8))), Tensor(np.zeros((0, 8))),
                      Tensor(np.zeros((0, 8))))

    def test_width_mismatch(self, attn, rng):
        """Verify inputs must have the model width.
        """
        with pytest.raises(DimensionError, match='width 8'):
            attention(attn, Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(2, 8))),
                      Tensor(rng.normal(size=(2, 8))))


    def test_identity_projections(self):
        """Verify one head with identity projections weighs keys by softmax of scaled dot products.
        """
        attn = MultiHeadAttention(2, 1)
        for lin in (attn.w_q, attn.w_k, attn.w_v, attn.w_a):
            lin.weight.data[...] = np.eye(2)
        out, weights = attention(attn, Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), Tensor(np.eye(2)))
        np.testing.assert_allclose(weights[0, 0], [0.6698, 0.3302], atol=1e-4)
        np.testing.assert_allclose(out.data[0], [0.6698, 0.3302], atol=1e-4)
        e = np.exp(1 / np.sqrt(2))
        assert weights[0, 0, 0] == pytest.approx(e / (e + 1), abs=1e-12)

    def test_matches_head_by_head(self, attn, rng):
        """Verify the output equals per-head attention on column blocks, concatenated then projected.
        """
        xq, xk, xv = (rng.normal(size=(n, 8)) for n in (3, 5, 5))
        for lin in (attn.w_q, attn.w_k, attn.w_v, attn.w_a):
            lin.bias.data[...] = rng.normal(size=8)
        out, weights = attention(attn, Tensor(xq), Tensor(xk), Tensor(xv))

        def project(lin, x):
            return x @ lin.weight.data + lin.bias.data

        q, k, v = project(attn.w_q, xq), project(attn.w_k, xk), project(attn.w_v, xv)
        heads = []
        for i in range(2):
            cols = slice(4 * i, 4 * (i + 1))
            scores = q[:, cols] @ k[:, cols].T / 2.0
            w = np.exp(scores - scores.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            np.testing.assert_allclose(weights[i], w, atol=1e-12)
            heads.append(w @ v[:, cols])
        expected = project(attn.w_a, np.concatenate(heads, axis=1))
        np.testing.assert_allclose(out.data, expected, atol=1e-10)
    def test_heads_divide_width(self):
        """Verify the width must split evenly across heads.
        """
        with pytest.raises(ValueError, match='divisible'):
            MultiHeadAttention(10, 3)


class TestPositionalEmbedding:
    """Tests for the fixed sine embedding.
    """

    def test_shape_and_range(self):
        """Verify one row per grid cell with values in [-1, 1].
        """
        pos = positional_embedding(3, 5, 16)
        assert pos.shape == (15, 16)
        assert np.all(np.abs(pos.data) <= 1.0)
        assert not pos.requires_grad

    def test_rows_and_columns(self):
        """Verify the first half depends only on the row and the second only on the column.
        """
        pos = positional_embedding(3, 4, 8).data.reshape(3, 4, 8)
        np.testing.assert_array_equal(pos[:, 0, :4], pos[:, 3, :4])
        np.testing.assert_array_equal(pos[0, :, 4:], pos[2, :, 4:])
        assert not np.array_equal(pos[0, 0], pos[1, 1])

    def test_deterministic(self):
        """Verify repeated calls return equal independent arrays.
        """
        a, b = positional_embedding(2, 2, 8), positional_embedding(2, 2, 8)
        np.testing.assert_array_equal(a.data, b.data)
        a.data[0, 0] = 99.0
        assert b.data[0, 0] != 99.0

    @pytest.mark.parametrize('width', [6, 10])
    def test_width_multiple_of_four(self, width):
        """Verify widths not divisible by four are rejected.
        """
        with pytest.raises(DimensionError, match='divisible by 4'):
            positional_embedding(2, 2, width)


class TestLayers:
    """Tests for encoder and decoder layers.
    """

    def test_encoder_shape(self, rng):
        """Verify the encoder layer preserves shape and normalizes rows.
        """
        layer = EncoderLayer(8, 2, 16, rng)
        out = layer(Tensor(rng.normal(size=(6, 8))), positional_embedding(2, 3, 8))
        assert out.shape == (6, 8)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-10)

    def test_encoder_permutation_equivariant(self, rng):
        """Verify permuting tokens together with their positions permutes the output rows.
        """
        layer = EncoderLayer(8, 2, 16, rng)
        x, pos = rng.normal(size=(6, 8)), positional_embedding(2, 3, 8).data
        perm = rng.permutation(6)
        out = layer(Tensor(x), Tensor(pos)).data
        permuted = layer(Tensor(x[perm]), Tensor(pos[perm])).data
        np.testing.assert_allclose(permuted, out[perm], atol=1e-10)

    def test_encoder_position_mismatch(self, rng):
        """Verify positions must match the sequence shape.
        """
        layer = EncoderLayer(8, 2, 16, rng)
        with pytest.raises(DimensionError, match='pos'):
            layer(Tensor(rng.normal(size=(6, 8))), positional_embedding(2, 2, 8))

    def test_decoder_trace(self, rng):
        """Verify the decoder records self and cross weights when tracing.
        """
        layer = DecoderLayer(8, 2, 16, rng)
        trace = {}
        out = layer(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8))),
                    Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8))), trace)
        assert out.shape == (3, 8)
        assert [w.shape for w in trace['self']] == [(2, 3, 3)]
        assert [w.shape for w in trace['cross']] == [(2, 3, 5)]

    def test_decoder_without_self_attention(self, rng):
        """Verify a cross-only decoder records no self weights and has fewer parameters.
        """
        full = DecoderLayer(8, 2, 16, rng)
        cross = DecoderLayer(8, 2, 16, rng, self_attention=False)
        trace = {}
        cross(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8))), trace=trace)
        assert 'self' not in trace
        assert len(trace['cross']) == 1
        assert full.num_parameters() - cross.num_parameters() == 4 * (8 * 8 + 8)

    def test_decoder_gradients_reach_memory(self, rng):
        """Verify back-propagation reaches the memory and every parameter.
        """
        layer = DecoderLayer(8, 2, 16, rng)
        memory = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        out = layer(Tensor(rng.normal(size=(3, 8))), memory)
        backward((out * Tensor(rng.normal(size=(3, 8)))).sum())
        assert np.any(memory.grad != 0)
        assert all(p.grad is not None for p in layer.parameters())
