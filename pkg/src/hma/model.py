"""Backbone encoder, ablation switches, and the full augmented forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttnDump, MhaBlock, glorot_uniform
from .memory import (
    LabelEmbedder,
    LinearHead,
    RealMemoryBuffer,
    SyntheticMemory,
    aggregate_features,
    project_logits,
    rma_read,
    sma_read,
)
from .tensor import Tensor, linear, relu

ABLATIONS = ("BACKBONE", "PARAM", "RMA", "ABD", "ABD_SYN", "ABD_RMA", "HMA")

# Ablations that run the buffer cross-attention stage / the batch-attention
# stage / that keep learnable slots in the batch-attention stage.
_RMA_ABLATIONS = frozenset({"RMA", "ABD_RMA", "HMA"})
_SMA_ABLATIONS = frozenset({"PARAM", "ABD", "ABD_SYN", "ABD_RMA", "HMA"})
_SLOT_ABLATIONS = frozenset({"ABD_SYN", "HMA"})

# Stable per-component RNG stream ids so two models built from the same seed
# share bitwise-identical weights for every component they have in common,
# regardless of which other components exist.
_COMPONENT_STREAMS = {
    "backbone": 1,
    "embedder": 2,
    "rma_block": 3,
    "slots": 4,
    "head": 5,
    "sma_block": 16,  # sma_block + depth index
}


def component_rng(seed: int, component: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), _COMPONENT_STREAMS[component] + index])


@dataclass
class ModelConfig:
    """Architecture plus ablation switches for one model instance."""

    n_classes: int = 2
    input_dim: int = 4
    d1: int = 64
    d2: int = 64
    hidden: int = 64
    heads: int = 4
    m1: int = 128
    m2: int = 8
    momentum: float = 0.999
    ablation: str = "HMA"
    stack_depth: int = 1
    momentum_label_embed: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(
                f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}"
            )
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        for name in ("input_dim", "d1", "d2", "hidden", "heads", "stack_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.m1 < 0 or self.m2 < 0:
            raise ValueError("memory sizes must be >= 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        if (self.d1 + self.d2) % self.heads != 0:
            raise ValueError(
                f"d1 + d2 = {self.d1 + self.d2} must be divisible by heads = {self.heads}"
            )

    @property
    def d(self) -> int:
        return self.d1 + self.d2

    @property
    def rma_active(self) -> bool:
        return self.ablation in _RMA_ABLATIONS and self.m1 > 0

    @property
    def sma_active(self) -> bool:
        return self.ablation in _SMA_ABLATIONS

    @property
    def effective_m2(self) -> int:
        return self.m2 if self.ablation in _SLOT_ABLATIONS else 0


class Backbone:
    """Two-hidden-layer ReLU MLP mapping inputs to d1-dimensional features."""

    def __init__(self, input_dim: int, hidden: int, d1: int, rng: np.random.Generator):
        self.w1 = Tensor(glorot_uniform(rng, input_dim, hidden), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True)
        self.w2 = Tensor(glorot_uniform(rng, hidden, hidden), requires_grad=True)
        self.b2 = Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True)
        self.w3 = Tensor(glorot_uniform(rng, hidden, d1), requires_grad=True)
        self.b3 = Tensor(np.zeros(d1, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        h = relu(linear(x, self.w1, self.b1))
        h = relu(linear(h, self.w2, self.b2))
        return linear(h, self.w3, self.b3)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "w1": self.w1, "b1": self.b1,
            "w2": self.w2, "b2": self.b2,
            "w3": self.w3, "b3": self.b3,
        }

    @staticmethod
    def apply_arrays(arrays: dict[str, np.ndarray], x: np.ndarray, prefix: str = "backbone.") -> np.ndarray:
        """Forward pass on plain arrays (used by the momentum encoder)."""
        h = np.maximum(x @ arrays[prefix + "w1"] + arrays[prefix + "b1"], 0.0)
        h = np.maximum(h @ arrays[prefix + "w2"] + arrays[prefix + "b2"], 0.0)
        return (h @ arrays[prefix + "w3"] + arrays[prefix + "b3"]).astype(np.float32)


@dataclass
class _Stages:
    rma: bool
    sma: bool


class HmaModel:
    """The augmented classifier: backbone features, unknown-label aggregation,
    optional buffer cross-attention, optional batch attention with synthetic
    slots, and a linear head. Disabled stages are identity passthroughs.
    """

    def __init__(self, cfg: ModelConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = int(seed)
        self.backbone = Backbone(
            cfg.input_dim, cfg.hidden, cfg.d1, component_rng(seed, "backbone")
        )
        self.embedder = LabelEmbedder(cfg.n_classes, cfg.d2, component_rng(seed, "embedder"))
        self.rma_block: MhaBlock | None = None
        if cfg.rma_active:
            self.rma_block = MhaBlock(
                cfg.d, cfg.heads, component_rng(seed, "rma_block"), tag="rma"
            )
        self.sma_blocks: list[MhaBlock] = []
        self.syn: SyntheticMemory | None = None
        if cfg.sma_active:
            self.sma_blocks = [
                MhaBlock(cfg.d, cfg.heads, component_rng(seed, "sma_block", i), tag=f"sma{i}")
                for i in range(cfg.stack_depth)
            ]
            if cfg.effective_m2 > 0:
                self.syn = SyntheticMemory(
                    cfg.n_classes, cfg.effective_m2, cfg.d1, component_rng(seed, "slots")
                )
        self.head = LinearHead(cfg.d, cfg.n_classes, component_rng(seed, "head"))

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.backbone.parameters().items():
            out[f"backbone.{name}"] = p
        out["emb.table"] = self.embedder.table
        if self.rma_block is not None:
            for name, p in self.rma_block.parameters().items():
                out[f"rma.block.{name}"] = p
        for i, block in enumerate(self.sma_blocks):
            for name, p in block.parameters().items():
                out[f"sma.block{i}.{name}"] = p
        if self.syn is not None and self.syn.slots is not None:
            out["sma.slots"] = self.syn.slots
        for name, p in self.head.parameters().items():
            out[f"head.{name}"] = p
        return out

    def encoder_parameters(self) -> dict[str, Tensor]:
        """The parameters the momentum encoder shadows: backbone + embedder."""
        out = {f"backbone.{n}": p for n, p in self.backbone.parameters().items()}
        out["emb.table"] = self.embedder.table
        return out

    def zero_attention_(self) -> None:
        """Zero all attention-block weights; attention stages become identity."""
        if self.rma_block is not None:
            self.rma_block.zero_()
        for block in self.sma_blocks:
            block.zero_()

    def forward(
        self,
        x: np.ndarray,
        buffer: RealMemoryBuffer | None = None,
        dump: AttnDump | None = None,
    ) -> Tensor:
        """Logits for a batch; never consumes labels."""
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ValueError(
                f"expected input [batch, {self.cfg.input_dim}], got {x.shape}"
            )
        feats = self.backbone.forward(Tensor(x))
        cur = aggregate_features(feats, self.embedder)
        if self.cfg.rma_active:
            if buffer is None:
                raise ValueError("rma stage enabled but no buffer supplied")
            cur = rma_read(cur, buffer, self.rma_block, dump)
        if self.cfg.sma_active:
            for block in self.sma_blocks:
                cur = sma_read(cur, self.syn, self.embedder, block, dump)
        return project_logits(cur, self.head)
