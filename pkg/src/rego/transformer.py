"""Multi-head attention, sinusoidal positions and post-norm encoder/decoder layers.
"""
import logging
import math

import cachu
import numpy as np
from rego.base import DimensionError, shape_str
from rego.nn import LayerNorm, Linear, Module
from rego.tensor import Tensor, relu, softmax

from libb import copydoc

logger = logging.getLogger(__name__)

Trace = dict[str, list[np.ndarray]]


class MultiHeadAttention(Module):
    """Per-head projections W_q, W_k, W_v (C -> C/M each, stored side by side)
    and the output projection W_A (C -> C).

    Head i owns columns [i * C', (i + 1) * C') of each input projection.
    """

    def __init__(self, width: int, heads: int,
                 rng: np.random.Generator | None = None) -> None:
        if heads < 1 or width % heads:
            raise ValueError(f'width {width} not divisible by {heads} heads')
        self.width = width
        self.heads = heads
        self.head_width = width // heads
        self.w_q = Linear(width, width, rng)
        self.w_k = Linear(width, width, rng)
        self.w_v = Linear(width, width, rng)
        self.w_a = Linear(width, width, rng)
        self.weights: np.ndarray | None = None

    def __call__(self, x_q: Tensor, x_kv: Tensor, key: Tensor | None = None) -> Tensor:
        out, self.weights = attention(self, x_q, x_kv if key is None else key, x_kv)
        return out


def _split_heads(x: Tensor, heads: int, head_width: int) -> Tensor:
    return x.reshape(x.shape[0], heads, head_width).transpose(1, 0, 2)


def attention(params: MultiHeadAttention, query: Tensor, key: Tensor,
              value: Tensor) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention per head, heads concatenated then projected.

    Returns the L_q x C output and the M x L_q x L_kv weight array.
    """
    c = params.width
    for name, x in (('query', query), ('key', key), ('value', value)):
        if x.ndim != 2 or x.shape[1] != c:
            raise DimensionError(f'attention: {name} {shape_str(x.shape)} does not have width {c}')
    if key.shape[0] == 0:
        raise DimensionError('attention: key/value sequence is empty')
    if key.shape[0] != value.shape[0]:
        raise DimensionError(
            f'attention: key {shape_str(key.shape)} and value {shape_str(value.shape)} lengths differ')
    m, cp = params.heads, params.head_width
    q = _split_heads(params.w_q(query), m, cp)
    k = _split_heads(params.w_k(key), m, cp)
    v = _split_heads(params.w_v(value), m, cp)
    weights = softmax((q @ k.transpose(0, 2, 1)) / math.sqrt(cp), axis=-1)
    heads = (weights @ v).transpose(1, 0, 2).reshape(query.shape[0], c)
    return params.w_a(heads), weights.data


def multi_head_attention(params: MultiHeadAttention, x_q: Tensor,
                         x_kv: Tensor) -> tuple[Tensor, np.ndarray]:
    """Attention with keys and values taken from the same tensor.
    """
    return attention(params, x_q, x_kv, x_kv)


@cachu.cache(ttl=86400, tag='tables', package='rego')
def _sine_table(h: int, w: int, width: int) -> np.ndarray:
    feats = width // 2
    scale = 2 * math.pi
    y = (np.arange(h, dtype=np.float64) + 1) / (h + 1e-6) * scale
    x = (np.arange(w, dtype=np.float64) + 1) / (w + 1e-6) * scale
    dim_t = 10000.0 ** (2 * (np.arange(feats) // 2) / feats)

    def encode(coord: np.ndarray) -> np.ndarray:
        angles = coord[:, None] / dim_t
        return np.where(np.arange(feats) % 2 == 0, np.sin(angles), np.cos(angles))

    pos_y = np.repeat(encode(y), w, axis=0)
    pos_x = np.tile(encode(x), (h, 1))
    return np.concatenate([pos_y, pos_x], axis=1)


def positional_embedding(h: int, w: int, width: int) -> Tensor:
    """Fixed 2-d sine embedding of an h x w grid, flattened row-major.

    The first half of the channels encodes the row, the second half the
    column. Channel k of a half uses frequency 10000^(2 * (k // 2) / (C / 2)),
    sine on even k and cosine on odd k, of the coordinate (index + 1) scaled
    to (0, 2 pi].
    """
    if width % 4:
        raise DimensionError(f'positional_embedding: width {width} not divisible by 4')
    return Tensor(np.array(_sine_table(h, w, width)))


class FeedForward(Module):

    def __init__(self, width: int, hidden: int, rng: np.random.Generator | None = None) -> None:
        self.lin1 = Linear(width, hidden, rng)
        self.lin2 = Linear(hidden, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(relu(self.lin1(x)))


def encoder_layer(params: 'EncoderLayer', x: Tensor, pos: Tensor) -> Tensor:
    """Self-attention (positions added to queries and keys) and feed-forward,
    each followed by residual addition and layer norm.
    """
    if x.shape != pos.shape:
        raise DimensionError(f'encoder_layer: x {shape_str(x.shape)} vs pos {shape_str(pos.shape)}')
    qk = x + pos
    attended, _ = attention(params.self_attn, qk, qk, x)
    x = params.norm1(x + attended)
    return params.norm2(x + params.ffn(x))


class EncoderLayer(Module):

    def __init__(self, width: int, heads: int, hidden: int,
                 rng: np.random.Generator | None = None) -> None:
        self.self_attn = MultiHeadAttention(width, heads, rng)
        self.norm1 = LayerNorm(width)
        self.ffn = FeedForward(width, hidden, rng)
        self.norm2 = LayerNorm(width)

    @copydoc(encoder_layer)
    def __call__(self, x: Tensor, pos: Tensor) -> Tensor:
        return encoder_layer(self, x, pos)


def decoder_layer(params: 'DecoderLayer', queries: Tensor, memory: Tensor,
                  query_embed: Tensor | None = None, mem_pos: Tensor | None = None,
                  trace: Trace | None = None) -> Tensor:
    """Self-attention over queries, cross-attention onto memory, feed-forward.

    Each sublayer is residual and followed by layer norm. Query embeddings
    are added to the attention queries (and self-attention keys), memory
    positions to the cross-attention keys. When `trace` is given, the
    self- and cross-attention weights are appended under 'self' and 'cross'.
    """
    if query_embed is not None and query_embed.shape != queries.shape:
        raise DimensionError(
            f'decoder_layer: queries {shape_str(queries.shape)} vs '
            f'query_embed {shape_str(query_embed.shape)}')
    if mem_pos is not None and mem_pos.shape != memory.shape:
        raise DimensionError(
            f'decoder_layer: memory {shape_str(memory.shape)} vs mem_pos {shape_str(mem_pos.shape)}')
    x = queries
    if params.self_attn is not None:
        qk = x if query_embed is None else x + query_embed
        attended, w_self = attention(params.self_attn, qk, qk, x)
        x = params.norm1(x + attended)
        if trace is not None:
            trace.setdefault('self', []).append(w_self)
    q = x if query_embed is None else x + query_embed
    k = memory if mem_pos is None else memory + mem_pos
    attended, w_cross = attention(params.cross_attn, q, k, memory)
    x = params.norm2(x + attended)
    if trace is not None:
        trace.setdefault('cross', []).append(w_cross)
    return params.norm3(x + params.ffn(x))


class DecoderLayer(Module):

    def __init__(self, width: int, heads: int, hidden: int,
                 rng: np.random.Generator | None = None,
                 self_attention: bool = True) -> None:
        self.self_attn = MultiHeadAttention(width, heads, rng) if self_attention else None
        self.norm1 = LayerNorm(width)
        self.cross_attn = MultiHeadAttention(width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.ffn = FeedForward(width, hidden, rng)
        self.norm3 = LayerNorm(width)

    @copydoc(decoder_layer)
    def __call__(self, queries: Tensor, memory: Tensor, query_embed: Tensor | None = None,
                 mem_pos: Tensor | None = None, trace: Trace | None = None) -> Tensor:
        return decoder_layer(self, queries, memory, query_embed, mem_pos, trace)

