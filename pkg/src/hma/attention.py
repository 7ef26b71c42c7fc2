"""Scaled dot-product attention, multi-head attention, and the residual
attention block, plus the between-datapoints (abd) and between-attributes
(aba) arrangements that treat the batch or feature axis as tokens.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    layer_norm,
    linear,
    matmul_batched,
    relu,
    reshape,
    scale,
    softmax_lastdim,
    transpose_last2,
)

LN_EPS = 1e-5
FF_WIDTH_FACTOR = 4


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


class AttnDump:
    """Collects per-head post-softmax attention weights as flat CSV rows.

    Row schema: ``layer_tag, query_index, key_index, head, score`` where
    ``query_index`` enumerates queries across the batch dimension
    (``batch_index * queries_per_item + query``) and ``key_index`` is the key
    token position within its sequence.
    """

    HEADER = "layer_tag,query_index,key_index,head,score"

    def __init__(self):
        self.rows: list[tuple[str, int, int, int, float]] = []

    def add(self, tag: str, head: int, weights: np.ndarray) -> None:
        n, tq, tk = weights.shape
        for b in range(n):
            for qi in range(tq):
                row = weights[b, qi]
                for ki in range(tk):
                    self.rows.append((tag, b * tq + qi, ki, head, float(row[ki])))

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.HEADER + "\n")
            for tag, qi, ki, head, score in self.rows:
                fh.write(f"{tag},{qi},{ki},{head},{score:.6f}\n")


class MhaBlock:
    """Parameters for one multi-head attention block.

    Holds per-head query/key/value projections, the output projection, two
    layer-norm parameter sets (one shared by Q/K/V before attention, one
    before the feed-forward), and a two-layer feed-forward expansion of width
    ``4 * d_model``.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, tag: str = "mha"):
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_k = d_model // heads
        self.tag = tag
        d_ff = FF_WIDTH_FACTOR * d_model

        def proj():
            return Tensor(glorot_uniform(rng, d_model, self.d_k), requires_grad=True)

        self.w_q = [proj() for _ in range(heads)]
        self.w_k = [proj() for _ in range(heads)]
        self.w_v = [proj() for _ in range(heads)]
        self.w_out = Tensor(glorot_uniform(rng, heads * self.d_k, d_model), requires_grad=True)
        self.ln_attn_gain = Tensor(np.ones(d_model, dtype=np.float32), requires_grad=True)
        self.ln_attn_bias = Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True)
        self.ln_ff_gain = Tensor(np.ones(d_model, dtype=np.float32), requires_grad=True)
        self.ln_ff_bias = Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True)
        self.ff_w1 = Tensor(glorot_uniform(rng, d_model, d_ff), requires_grad=True)
        self.ff_b1 = Tensor(np.zeros(d_ff, dtype=np.float32), requires_grad=True)
        self.ff_w2 = Tensor(glorot_uniform(rng, d_ff, d_model), requires_grad=True)
        self.ff_b2 = Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i in range(self.heads):
            out[f"wq{i}"] = self.w_q[i]
            out[f"wk{i}"] = self.w_k[i]
            out[f"wv{i}"] = self.w_v[i]
        out["wout"] = self.w_out
        out["ln_attn_gain"] = self.ln_attn_gain
        out["ln_attn_bias"] = self.ln_attn_bias
        out["ln_ff_gain"] = self.ln_ff_gain
        out["ln_ff_bias"] = self.ln_ff_bias
        out["ff_w1"] = self.ff_w1
        out["ff_b1"] = self.ff_b1
        out["ff_w2"] = self.ff_w2
        out["ff_b2"] = self.ff_b2
        return out

    def zero_(self) -> None:
        """Zero every parameter, turning the block into a pure residual path."""
        for p in self.parameters().values():
            p.data = np.zeros_like(p.data)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    dump: AttnDump | None = None,
    tag: str = "attn",
    head: int = 0,
) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v, batched over the leading axis."""
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError(
            f"attention: need 3-D tensors, got {q.shape}, {k.shape}, {v.shape}"
        )
    if k.shape != v.shape:
        raise ValueError(f"attention: key/value shape mismatch {k.shape} vs {v.shape}")
    if q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ValueError(f"attention: query/key shape mismatch {q.shape} vs {k.shape}")
    d_k = q.shape[2]
    logits = scale(matmul_batched(q, transpose_last2(k)), 1.0 / math.sqrt(d_k))
    weights = softmax_lastdim(logits)
    if dump is not None:
        dump.add(tag, head, weights.data)
    return matmul_batched(weights, v)


def multi_head_attention(
    block: MhaBlock, q: Tensor, k: Tensor, v: Tensor, dump: AttnDump | None = None
) -> Tensor:
    """Concatenated per-head attention followed by the output projection."""
    for t in (q, k, v):
        if t.ndim != 3 or t.shape[2] != block.d_model:
            raise ValueError(
                f"multi_head_attention: expected [*, *, {block.d_model}], got {t.shape}"
            )
    heads = [
        attention(
            linear(q, block.w_q[i]),
            linear(k, block.w_k[i]),
            linear(v, block.w_v[i]),
            dump=dump,
            tag=block.tag,
            head=i,
        )
        for i in range(block.heads)
    ]
    return linear(concat(heads, axis=-1), block.w_out)


def mha_block(
    block: MhaBlock, q: Tensor, k: Tensor, v: Tensor, dump: AttnDump | None = None
) -> Tensor:
    """Residual attention block: attention sublayer then feed-forward sublayer.

    The first residual is added on the query side so cross-attention (where
    key count differs from query count) keeps the query shape; for
    self-attention with q = k = v this is the usual value-side residual.
    """
    normed_q = layer_norm(q, block.ln_attn_gain, block.ln_attn_bias, LN_EPS)
    normed_k = layer_norm(k, block.ln_attn_gain, block.ln_attn_bias, LN_EPS)
    normed_v = layer_norm(v, block.ln_attn_gain, block.ln_attn_bias, LN_EPS)
    h = add(q, multi_head_attention(block, normed_q, normed_k, normed_v, dump))
    ff_in = layer_norm(h, block.ln_ff_gain, block.ln_ff_bias, LN_EPS)
    ff = linear(relu(linear(ff_in, block.ff_w1, block.ff_b1)), block.ff_w2, block.ff_b2)
    return add(h, ff)


def abd(x: Tensor, block: MhaBlock, dump: AttnDump | None = None) -> Tensor:
    """Self-attention between datapoints: batch rows become tokens."""
    if x.ndim != 2:
        raise ValueError(f"abd: expected [batch, features], got {x.shape}")
    bs, d = x.shape
    tokens = reshape(x, (1, bs, d))
    return reshape(mha_block(block, tokens, tokens, tokens, dump), (bs, d))


def aba(x: Tensor, block: MhaBlock, dump: AttnDump | None = None) -> Tensor:
    """Self-attention between attributes, batched over datapoints."""
    if x.ndim != 3:
        raise ValueError(f"aba: expected [batch, attributes, width], got {x.shape}")
    return mha_block(block, x, x, x, dump)
