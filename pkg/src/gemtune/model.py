"""Transformer encoder with a frozen backbone and pluggable adapters.

The backbone (embeddings, attention, feed-forward, layer norms) is
always frozen. Depending on the configuration, trainable bottleneck
adapters sit after the attention and feed-forward projections of every
block (before the residual add), an optional frozen pre-trained adapter
sits under each task adapter, and an invertible coupling adapter wraps
the embedding boundary for masked-token training. Fresh adapters start
as exact identity maps (zero up-projection), so a new model's logits
match the bare backbone's until training moves them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    concat,
    embedding_lookup,
    gelu,
    layer_norm,
    scale,
    softmax,
    transpose,
)
from .tokenizer import NUM_RESERVED, TokenSequence, pad_batch

CONFIG_KINDS = (
    "backbone_only",
    "task_only",
    "pretrained_plus_task",
    "invertible_plus_task",
    "invertible_only",
)

_INVERTIBLE_KINDS = ("invertible_plus_task", "invertible_only")
_TASK_ADAPTER_KINDS = ("task_only", "pretrained_plus_task", "invertible_plus_task")

INIT_STD = 0.02
EMBED_STD = 0.1
HEAD_STD = 0.1
LAYER_NORM_EPS = 1e-12
NUM_CLASSES = 2


@dataclass
class EncoderConfig:
    """Dimensions and adapter configuration of the encoder."""

    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 256
    bottleneck_dim: int = 8
    max_len: int = 128
    config_kind: str = "task_only"

    def __post_init__(self) -> None:
        if self.config_kind not in CONFIG_KINDS:
            raise ValueError(f"unknown config_kind {self.config_kind!r}; expected one of {CONFIG_KINDS}")
        if not 1 <= self.bottleneck_dim < self.hidden_dim:
            raise ValueError(
                f"bottleneck_dim must satisfy 1 <= m < hidden_dim, got m={self.bottleneck_dim} d={self.hidden_dim}"
            )
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.max_len < 3:
            raise ValueError(f"max_len must be at least 3, got {self.max_len}")
        if self.vocab_size <= NUM_RESERVED:
            raise ValueError(f"vocab_size must exceed {NUM_RESERVED}, got {self.vocab_size}")
        if self.config_kind in _INVERTIBLE_KINDS and self.hidden_dim % 2 != 0:
            raise ValueError("invertible adapters require an even hidden_dim")

    @property
    def uses_invertible(self) -> bool:
        return self.config_kind in _INVERTIBLE_KINDS

    @property
    def uses_task_adapters(self) -> bool:
        return self.config_kind in _TASK_ADAPTER_KINDS


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = INIT_STD) -> np.ndarray:
    """Normal draws re-sampled until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            return out
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))


class HoulsbyAdapter:
    """Bottleneck adapter: down-project, GELU, up-project, plus residual.

    The up-projection starts at zero, making the module an exact
    identity map at initialization.
    """

    def __init__(self, hidden_dim: int, bottleneck_dim: int, name: str, rng: np.random.Generator, frozen: bool = False):
        d, m = hidden_dim, bottleneck_dim
        self.w_down = Parameter(_trunc_normal(rng, (d, m)), f"{name}.w_down", frozen)
        self.b_down = Parameter(np.zeros(m), f"{name}.b_down", frozen)
        self.w_up = Parameter(np.zeros((m, d)), f"{name}.w_up", frozen)
        self.b_up = Parameter(np.zeros(d), f"{name}.b_up", frozen)

    def __call__(self, x: Tensor) -> Tensor:
        return x + (gelu(x @ self.w_down + self.b_down) @ self.w_up + self.b_up)

    def parameters(self) -> list[Parameter]:
        return [self.w_down, self.b_down, self.w_up, self.b_up]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class CouplingTransform:
    """Bottleneck map over half the embedding width, no residual."""

    def __init__(self, half_dim: int, bottleneck_dim: int, name: str, rng: np.random.Generator):
        self.w_in = Parameter(_trunc_normal(rng, (half_dim, bottleneck_dim)), f"{name}.w_in")
        self.b_in = Parameter(np.zeros(bottleneck_dim), f"{name}.b_in")
        self.w_out = Parameter(np.zeros((bottleneck_dim, half_dim)), f"{name}.w_out")
        self.b_out = Parameter(np.zeros(half_dim), f"{name}.b_out")

    def __call__(self, x: Tensor) -> Tensor:
        return gelu(x @ self.w_in + self.b_in) @ self.w_out + self.b_out

    def parameters(self) -> list[Parameter]:
        return [self.w_in, self.b_in, self.w_out, self.b_out]


class InvertibleAdapter:
    """Two additive coupling sublayers over a half-split of the embedding.

    Forward: y1 = x1 + F(x2), y2 = x2 + G(y1). The inverse subtracts the
    same transforms in reverse order, so round trips are exact up to
    float rounding for any weight setting.
    """

    def __init__(self, hidden_dim: int, bottleneck_dim: int, name: str, rng: np.random.Generator):
        if hidden_dim % 2 != 0:
            raise ValueError(f"invertible adapter needs an even hidden_dim, got {hidden_dim}")
        self.half = hidden_dim // 2
        self.f = CouplingTransform(self.half, bottleneck_dim, f"{name}.f", rng)
        self.g = CouplingTransform(self.half, bottleneck_dim, f"{name}.g", rng)

    def forward(self, x: Tensor) -> Tensor:
        x1, x2 = x[..., : self.half], x[..., self.half :]
        y1 = x1 + self.f(x2)
        y2 = x2 + self.g(y1)
        return concat([y1, y2], axis=-1)

    def inverse(self, y: Tensor) -> Tensor:
        y1, y2 = y[..., : self.half], y[..., self.half :]
        x2 = y2 - self.g(y1)
        x1 = y1 - self.f(x2)
        return concat([x1, x2], axis=-1)

    def parameters(self) -> list[Parameter]:
        return self.f.parameters() + self.g.parameters()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class ClassifierHead:
    """Linear map from the [CLS] hidden state to two match logits."""

    def __init__(self, hidden_dim: int, rng: np.random.Generator):
        self.w = Parameter(_trunc_normal(rng, (hidden_dim, NUM_CLASSES), std=HEAD_STD), "head.w")
        self.b = Parameter(np.zeros(NUM_CLASSES), "head.b")

    def __call__(self, cls_state: Tensor) -> Tensor:
        return cls_state @ self.w + self.b

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


class TransformerBlock:
    """Post-norm encoder block with adapter slots at both sub-layers."""

    def __init__(self, cfg: EncoderConfig, index: int, rng: np.random.Generator):
        d, f = cfg.hidden_dim, cfg.ffn_dim
        self.num_heads = cfg.num_heads
        self.head_dim = d // cfg.num_heads
        prefix = f"blocks.{index}"

        def backbone(shape, name):
            # fan-in scaling keeps activations example-sensitive through a
            # random frozen stack, unlike the tiny adapter-style init
            return Parameter(_trunc_normal(rng, shape, std=shape[0] ** -0.5), f"{prefix}.{name}", frozen=True)

        def backbone_zeros(shape, name):
            return Parameter(np.zeros(shape), f"{prefix}.{name}", frozen=True)

        self.w_q = backbone((d, d), "attn.w_q")
        self.b_q = backbone_zeros((d,), "attn.b_q")
        self.w_k = backbone((d, d), "attn.w_k")
        self.b_k = backbone_zeros((d,), "attn.b_k")
        self.w_v = backbone((d, d), "attn.w_v")
        self.b_v = backbone_zeros((d,), "attn.b_v")
        self.w_o = backbone((d, d), "attn.w_o")
        self.b_o = backbone_zeros((d,), "attn.b_o")
        self.ffn_w_in = backbone((d, f), "ffn.w_in")
        self.ffn_b_in = backbone_zeros((f,), "ffn.b_in")
        self.ffn_w_out = backbone((f, d), "ffn.w_out")
        self.ffn_b_out = backbone_zeros((d,), "ffn.b_out")
        self.ln1_gain = Parameter(np.ones(d), f"{prefix}.ln1.gain", frozen=True)
        self.ln1_bias = backbone_zeros((d,), "ln1.bias")
        self.ln2_gain = Parameter(np.ones(d), f"{prefix}.ln2.gain", frozen=True)
        self.ln2_bias = backbone_zeros((d,), "ln2.bias")

        # adapter slots are attached after all backbone draws, see MatchModel
        self.attn_adapter_pre: HoulsbyAdapter | None = None
        self.attn_adapter: HoulsbyAdapter | None = None
        self.ffn_adapter_pre: HoulsbyAdapter | None = None
        self.ffn_adapter: HoulsbyAdapter | None = None

    def backbone_parameters(self) -> list[Parameter]:
        return [
            self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.w_o, self.b_o,
            self.ffn_w_in, self.ffn_b_in, self.ffn_w_out, self.ffn_b_out,
            self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias,
        ]

    def adapters(self) -> list[HoulsbyAdapter]:
        slots = (self.attn_adapter_pre, self.attn_adapter, self.ffn_adapter_pre, self.ffn_adapter)
        return [a for a in slots if a is not None]

    def _attention(self, h: Tensor, attn_bias: Tensor) -> Tensor:
        batch, seq, d = h.shape
        heads, head_dim = self.num_heads, self.head_dim

        def split_heads(t: Tensor) -> Tensor:
            return transpose(t.reshape(batch, seq, heads, head_dim), (0, 2, 1, 3))

        q = split_heads(h @ self.w_q + self.b_q)
        k = split_heads(h @ self.w_k + self.b_k)
        v = split_heads(h @ self.w_v + self.b_v)
        scores = scale(q @ transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(head_dim))
        weights = softmax(scores + attn_bias, axis=-1)
        context = transpose(weights @ v, (0, 2, 1, 3)).reshape(batch, seq, d)
        return context @ self.w_o + self.b_o

    @staticmethod
    def _adapt(x: Tensor, pre: HoulsbyAdapter | None, task: HoulsbyAdapter | None) -> Tensor:
        if pre is not None:
            x = pre(x)
        if task is not None:
            x = task(x)
        return x

    def __call__(self, h: Tensor, attn_bias: Tensor) -> Tensor:
        attn_out = self._adapt(self._attention(h, attn_bias), self.attn_adapter_pre, self.attn_adapter)
        h = layer_norm(h + attn_out, self.ln1_gain, self.ln1_bias, LAYER_NORM_EPS)
        ffn_out = gelu(h @ self.ffn_w_in + self.ffn_b_in) @ self.ffn_w_out + self.ffn_b_out
        ffn_out = self._adapt(ffn_out, self.ffn_adapter_pre, self.ffn_adapter)
        return layer_norm(h + ffn_out, self.ln2_gain, self.ln2_bias, LAYER_NORM_EPS)


class MatchModel:
    """Frozen encoder backbone plus whatever adapters the config asks for."""

    def __init__(self, cfg: EncoderConfig, seed: int):
        self.config = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        d = cfg.hidden_dim

        # backbone draws come first so equal seeds share a backbone and
        # head across configurations
        self.token_embedding = Parameter(
            _trunc_normal(rng, (cfg.vocab_size, d), std=EMBED_STD), "embeddings.token", frozen=True
        )
        self.position_embedding = Parameter(
            _trunc_normal(rng, (cfg.max_len, d), std=EMBED_STD), "embeddings.position", frozen=True
        )
        self.blocks = [TransformerBlock(cfg, i, rng) for i in range(cfg.num_layers)]
        self.head = ClassifierHead(d, rng)

        m = cfg.bottleneck_dim
        if cfg.uses_task_adapters:
            for i, block in enumerate(self.blocks):
                if cfg.config_kind == "pretrained_plus_task":
                    block.attn_adapter_pre = HoulsbyAdapter(d, m, f"blocks.{i}.attn.adapter_pre", rng)
                    block.ffn_adapter_pre = HoulsbyAdapter(d, m, f"blocks.{i}.ffn.adapter_pre", rng)
                block.attn_adapter = HoulsbyAdapter(d, m, f"blocks.{i}.attn.adapter", rng)
                block.ffn_adapter = HoulsbyAdapter(d, m, f"blocks.{i}.ffn.adapter", rng)
        self.inv_adapter = (
            InvertibleAdapter(d, m, "inv_adapter", rng) if cfg.uses_invertible else None
        )

    # -- parameter registry ------------------------------------------------

    def backbone_parameters(self) -> list[Parameter]:
        out = [self.token_embedding, self.position_embedding]
        for block in self.blocks:
            out.extend(block.backbone_parameters())
        return out

    def adapter_parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for block in self.blocks:
            for adapter in block.adapters():
                out.extend(adapter.parameters())
        if self.inv_adapter is not None:
            out.extend(self.inv_adapter.parameters())
        return out

    def parameters(self) -> list[Parameter]:
        return self.backbone_parameters() + self.adapter_parameters() + self.head.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def task_adapters(self) -> list[HoulsbyAdapter]:
        return [a for block in self.blocks for a in (block.attn_adapter, block.ffn_adapter) if a is not None]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward passes ------------------------------------------------------

    def _check_batch(self, ids: np.ndarray) -> None:
        cfg = self.config
        if ids.shape[1] > cfg.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
        if ids.size and ids.max() >= cfg.vocab_size:
            raise ValueError(f"token id {int(ids.max())} out of range for vocab_size {cfg.vocab_size}")

    def _encode_ids(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        self._check_batch(ids)
        seq_len = ids.shape[1]
        h = embedding_lookup(self.token_embedding, ids) + embedding_lookup(
            self.position_embedding, np.arange(seq_len)
        )
        if self.inv_adapter is not None:
            h = self.inv_adapter.forward(h)
        # -inf bias underflows to an exactly zero attention weight on [PAD]
        bias = Tensor(np.where(mask[:, None, None, :] > 0, 0.0, -np.inf))
        for block in self.blocks:
            h = block(h, bias)
        return h

    def forward(self, sequences: list[TokenSequence]) -> Tensor:
        """Match logits, shape (batch, 2)."""
        ids, mask = pad_batch(sequences)
        return self.forward_ids(ids, mask)

    def forward_ids(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        h = self._encode_ids(ids, mask)
        return self.head(h[:, 0, :])

    def mlm_logits(self, ids: np.ndarray, mask: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> Tensor:
        """Vocabulary logits at the given (row, col) positions.

        The decoder is the transpose of the frozen token embedding, applied
        after the coupling inverse, so masked-token training updates only
        the invertible adapter.
        """
        h = self._encode_ids(ids, mask)
        if self.inv_adapter is not None:
            h = self.inv_adapter.inverse(h)
        gathered = h[rows, cols]
        return gathered @ transpose(self.token_embedding, (1, 0))


def forward(model: MatchModel, batch: list[TokenSequence]) -> Tensor:
    return model.forward(batch)


def build_model(cfg: EncoderConfig, seed: int, pretrained_adapters: str | None = None) -> MatchModel:
    """Construct a model; stacked configurations load their frozen lower adapters."""
    model = MatchModel(cfg, seed)
    if cfg.config_kind == "pretrained_plus_task":
        if pretrained_adapters is None:
            raise ValueError("config_kind 'pretrained_plus_task' requires a pretrained adapter checkpoint")
        from .checkpoint import load_adapters

        load_adapters(model, pretrained_adapters, freeze=True)
    return model


def count_parameters(model: MatchModel) -> dict[str, float]:
    """Frozen/trainable totals and their ratio."""
    frozen = sum(p.size for p in model.parameters() if p.frozen)
    trainable = sum(p.size for p in model.parameters() if not p.frozen)
    return {"frozen_count": frozen, "trainable_count": trainable, "ratio": trainable / frozen}
