"""Heterogeneous memory: label embedding with an unknown-label token, a
momentum-written real memory buffer read by cross-attention, and learnable
per-class synthetic memory slots read by attention between datapoints.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .attention import AttnDump, MhaBlock, abd, mha_block
from .tensor import Tensor, concat, linear, repeat_new_axis, reshape, slice_axis

SLOT_INIT_STD = 0.02


class LabelEmbedder:
    """Embedding table with one row per class plus a trailing unknown row.

    The unknown row stands in for the label of every datapoint during the
    forward pass, so true labels never reach the prediction path; true-label
    rows are only read (detached) when writing the real memory buffer.
    """

    def __init__(self, n_classes: int, dim: int, rng: np.random.Generator):
        if n_classes < 1 or dim < 1:
            raise ValueError(f"bad embedder size ({n_classes} classes, dim {dim})")
        self.n_classes = n_classes
        self.dim = dim
        self.table = Tensor(
            rng.normal(0.0, SLOT_INIT_STD, size=(n_classes + 1, dim)).astype(np.float32),
            requires_grad=True,
        )

    @property
    def unknown_index(self) -> int:
        return self.n_classes

    def class_row(self, label: int) -> Tensor:
        """Differentiable [1, dim] view of one table row."""
        if not 0 <= label <= self.n_classes:
            raise ValueError(f"label {label} out of range [0, {self.n_classes}]")
        return slice_axis(self.table, 0, label, label + 1)

    def unknown_row(self) -> Tensor:
        return self.class_row(self.unknown_index)

    def rows_detached(self, labels: np.ndarray) -> np.ndarray:
        """Plain array lookup used on the (gradient-free) write path."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() > self.n_classes:
            raise ValueError("label out of range")
        return self.table.data[labels].copy()


class RealMemoryBuffer:
    """Bounded FIFO of detached feature+label-embedding rows."""

    def __init__(self, capacity: int, width: int):
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.width = width
        self._rows: deque[np.ndarray] = deque(maxlen=capacity if capacity else 0)

    @property
    def count(self) -> int:
        return len(self._rows)

    def write(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[1] != self.width:
            raise ValueError(f"buffer rows must be [k, {self.width}], got {rows.shape}")
        if self.capacity == 0:
            return
        for row in rows:
            self._rows.append(row.copy())

    def as_array(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, self.width), dtype=np.float32)
        return np.stack(self._rows)

    def load_array(self, rows: np.ndarray) -> None:
        """Replace contents (checkpoint restore); order is oldest first."""
        self._rows.clear()
        self.write(rows)


class MomentumEncoder:
    """Exponential-moving-average shadow of the encoder parameters.

    ``feature_fn(shadows, x)`` runs the encoder forward pass using the shadow
    arrays, so buffer writes never touch the live gradient graph.
    """

    def __init__(self, params: dict[str, Tensor], momentum: float, feature_fn):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {momentum}")
        self.momentum = float(momentum)
        self.shadows: dict[str, np.ndarray] = {
            name: p.data.copy() for name, p in params.items()
        }
        self._feature_fn = feature_fn

    def update(self, params: dict[str, Tensor]) -> None:
        lam = self.momentum
        for name, p in params.items():
            shadow = self.shadows.get(name)
            if shadow is None:
                raise KeyError(f"no shadow for parameter '{name}'")
            if shadow.shape != p.data.shape:
                raise ValueError(
                    f"shadow shape {shadow.shape} does not match live "
                    f"'{name}' shape {p.data.shape}"
                )
            self.shadows[name] = (lam * shadow + (1.0 - lam) * p.data).astype(np.float32)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self._feature_fn(self.shadows, x)


def momentum_update(momentum_enc: MomentumEncoder, live_params: dict[str, Tensor]) -> None:
    momentum_enc.update(live_params)


class SyntheticMemory:
    """Learnable memory slots, ``per_class`` of them for each class, each of
    feature width ``feat_dim``; slot i carries class label ``slot_labels[i]``.
    """

    def __init__(self, n_classes: int, per_class: int, feat_dim: int, rng: np.random.Generator):
        if per_class < 0:
            raise ValueError(f"per_class must be >= 0, got {per_class}")
        self.n_classes = n_classes
        self.per_class = per_class
        self.feat_dim = feat_dim
        self.slot_labels = [c for c in range(n_classes) for _ in range(per_class)]
        if per_class > 0:
            init = rng.normal(0.0, SLOT_INIT_STD, size=(n_classes * per_class, feat_dim))
            self.slots: Tensor | None = Tensor(init.astype(np.float32), requires_grad=True)
        else:
            self.slots = None


def aggregate_features(feats: Tensor, embedder: LabelEmbedder) -> Tensor:
    """Append the unknown-label embedding to every feature row.

    Output width is ``feat_dim + embed_dim``; the trailing block is identical
    across the batch and its gradient accumulates into the unknown table row.
    """
    if feats.ndim != 2:
        raise ValueError(f"aggregate_features: expected [batch, d1], got {feats.shape}")
    bs = feats.shape[0]
    unknown = reshape(embedder.unknown_row(), (embedder.dim,))
    return concat([feats, repeat_new_axis(unknown, bs)], axis=1)


def rma_read(
    c1: Tensor,
    buffer: RealMemoryBuffer,
    block: MhaBlock,
    dump: AttnDump | None = None,
) -> Tensor:
    """Cross-attention read: each datapoint queries itself plus every stored
    buffer row. Buffer rows enter as constants, so no gradient reaches them.
    """
    bs, d = c1.shape
    queries = reshape(c1, (bs, 1, d))
    if buffer.count:
        stored = Tensor(buffer.as_array())
        kv = concat([queries, repeat_new_axis(stored, bs)], axis=1)
    else:
        kv = queries
    return reshape(mha_block(block, queries, kv, kv, dump), (bs, d))


def rma_write(
    x: np.ndarray,
    y: np.ndarray,
    momentum_enc: MomentumEncoder,
    embedder: LabelEmbedder,
    buffer: RealMemoryBuffer,
    momentum_label_embed: bool = False,
) -> None:
    """Append [momentum features ; true-label embeddings] rows to the buffer.

    Features come from the momentum encoder; label embeddings from the live
    table by default (``momentum_label_embed`` switches to the shadow table).
    Rows are detached by construction.
    """
    y = np.asarray(y, dtype=np.int64)
    feats = momentum_enc.encode(np.asarray(x, dtype=np.float32))
    if momentum_label_embed:
        table = momentum_enc.shadows["emb.table"]
        labels = table[y]
    else:
        labels = embedder.rows_detached(y)
    buffer.write(np.concatenate([feats, labels], axis=1))


def sma_read(
    c2: Tensor,
    syn: SyntheticMemory | None,
    embedder: LabelEmbedder,
    block: MhaBlock,
    dump: AttnDump | None = None,
) -> Tensor:
    """Attention between datapoints and synthetic memory rows.

    Keys/values are the batch followed by one row per slot,
    [slot ; embedding(slot label)], with embeddings regenerated from the
    current table so gradients reach both the slots and the table. With no
    slots this is exactly attention between datapoints alone.
    """
    if syn is None or syn.per_class == 0:
        return abd(c2, block, dump)
    bs, d = c2.shape
    label_blocks = []
    for c in range(syn.n_classes):
        row = reshape(embedder.class_row(c), (embedder.dim,))
        label_blocks.append(repeat_new_axis(row, syn.per_class))
    syn_rows = concat([syn.slots, concat(label_blocks, axis=0)], axis=1)
    if syn_rows.shape[1] != d:
        raise ValueError(
            f"synthetic rows width {syn_rows.shape[1]} does not match features {d}"
        )
    tokens = concat([c2, syn_rows], axis=0)
    queries = reshape(c2, (1, bs, d))
    kv = reshape(tokens, (1, tokens.shape[0], d))
    return reshape(mha_block(block, queries, kv, kv, dump), (bs, d))


class LinearHead:
    """Final affine projection from augmented features to class logits."""

    def __init__(self, in_dim: int, n_classes: int, rng: np.random.Generator):
        from .attention import glorot_uniform

        self.w = Tensor(glorot_uniform(rng, in_dim, n_classes), requires_grad=True)
        self.b = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


def project_logits(c3: Tensor, head: LinearHead) -> Tensor:
    return linear(c3, head.w, head.b)
