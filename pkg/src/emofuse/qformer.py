"""Query-transformer fusion of text tokens and visual tokens.

A bank of learnable query tokens is concatenated with the embedded
description and run through a stack of pre-norm self-attention blocks;
every other block additionally lets the query rows cross-attend into the
visual tokens. The final query rows are mean-pooled and classified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import (
    FeedForward,
    LayerNorm,
    Module,
    MultiHeadCrossAttention,
    MultiHeadSelfAttention,
)
from .tensor import RngState, ShapeError, Tensor

TASK_KINDS = ("single_label", "multi_label")


@dataclass(frozen=True)
class QFormerConfig:
    num_queries: int = 8
    dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    ffn_dim: int | None = None
    attn_dropout: float = 0.4
    num_classes: int = 4
    task_kind: str = "single_label"
    cross_parity: str = "odd"
    visual_dim: int | None = None

    def __post_init__(self):
        if self.num_blocks % 2:
            raise ValueError(
                f"block count must be even so cross-attention lands every other block, got {self.num_blocks}"
            )
        if self.dim % self.num_heads:
            raise ShapeError(f"model dim {self.dim} not divisible by {self.num_heads} heads")
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        if self.cross_parity not in ("odd", "even"):
            raise ValueError(f"cross_parity must be 'odd' or 'even', got {self.cross_parity!r}")

    @property
    def hidden_dim(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.dim

    @property
    def kv_dim(self) -> int:
        return self.visual_dim if self.visual_dim is not None else self.dim

    def has_cross(self, block_index: int) -> bool:
        want = 1 if self.cross_parity == "odd" else 0
        return block_index % 2 == want


class QueryBank(Module):
    """The learnable query tokens, fixed in number across samples."""

    def __init__(self, num_queries: int, dim: int, rng: np.random.Generator):
        self.q = Tensor(rng.normal(0.0, 0.02, size=(num_queries, dim)), requires_grad=True)

    @property
    def shape(self) -> tuple:
        return self.q.shape


def concat_sequence(queries: Tensor, text_tokens: Tensor) -> Tensor:
    """Stack query rows in front of text rows along the token axis.

    ``queries`` is ``(N, d)``; ``text_tokens`` is ``(L, d)`` or
    ``(B, L, d)`` (queries are broadcast across the batch).
    """
    if queries.shape[-1] != text_tokens.shape[-1]:
        raise ShapeError(
            f"query dim {queries.shape[-1]} does not match text dim {text_tokens.shape[-1]}"
        )
    if text_tokens.ndim == 3 and queries.ndim == 2:
        b = text_tokens.shape[0]
        queries = T.broadcast_to(T.reshape(queries, (1,) + queries.shape), (b,) + queries.shape)
    return T.concat([queries, text_tokens], axis=-2)


class QFormerBlock(Module):
    """One fusion block.

    Pre-norm self-attention over the joint sequence, an optional
    cross-attention step on the query rows, then two independent
    pre-norm feed-forward networks — one for the query rows, one for the
    text rows. Every sub-layer is residual.
    """

    def __init__(self, config: QFormerConfig, has_cross: bool, rng: np.random.Generator):
        self.norm_sa = LayerNorm(config.dim)
        self.self_attn = MultiHeadSelfAttention(config.dim, config.num_heads, config.attn_dropout, rng)
        self.has_cross = has_cross
        if has_cross:
            self.norm_ca = LayerNorm(config.dim)
            self.cross_attn = MultiHeadCrossAttention(
                config.dim, config.kv_dim, config.num_heads, config.attn_dropout, rng
            )
        self.norm_ffn_q = LayerNorm(config.dim)
        self.ffn_q = FeedForward(config.dim, config.hidden_dim, rng)
        self.norm_ffn_t = LayerNorm(config.dim)
        self.ffn_t = FeedForward(config.dim, config.hidden_dim, rng)

    def __call__(
        self,
        z: Tensor,
        num_queries: int,
        key_mask: np.ndarray,
        visual: Tensor | None,
        training: bool,
        rng: RngState | None,
    ) -> Tensor:
        z = z + self.self_attn(self.norm_sa(z), key_mask=key_mask, training=training, rng=rng)
        zq = T.narrow(z, -2, 0, num_queries)
        zt = T.narrow(z, -2, num_queries, z.shape[-2])
        if self.has_cross:
            zq = zq + self.cross_attn(self.norm_ca(zq), visual, training=training, rng=rng)
        zq = zq + self.ffn_q(self.norm_ffn_q(zq))
        if zt.shape[-2]:
            zt = zt + self.ffn_t(self.norm_ffn_t(zt))
        return T.concat([zq, zt], axis=-2)


class QFormer(Module):
    """The full fusion stack; returns the attended query rows only."""

    def __init__(self, config: QFormerConfig, rng: np.random.Generator):
        self.config = config
        self.blocks = [
            QFormerBlock(config, config.has_cross(b), rng) for b in range(config.num_blocks)
        ]
        self.last_cross_count = 0

    def __call__(
        self,
        queries: Tensor,
        text_tokens: Tensor,
        text_mask: np.ndarray | None,
        visual: Tensor,
        training: bool = False,
        rng: RngState | None = None,
    ) -> Tensor:
        """Fuse one bank of queries with text and visual tokens.

        ``queries``: (N, d). ``text_tokens``: (L, d) or (B, L, d).
        ``text_mask``: true on real tokens, false on padding; may be None
        when every position is real. ``visual``: (S_v, D) or (B, S_v, D).
        Returns (N, d) or (B, N, d).
        """
        if visual.shape[-2] < 1:
            raise ShapeError("cross-attention requires at least one visual token")
        single = text_tokens.ndim == 2
        z = concat_sequence(queries, text_tokens)
        if single:
            z = T.reshape(z, (1,) + z.shape)
            visual_b = T.reshape(visual, (1,) + visual.shape) if visual.ndim == 2 else visual
            mask_rows = None if text_mask is None else np.asarray(text_mask, dtype=bool)[None, :]
        else:
            if visual.ndim == 2:
                raise ShapeError("batched text requires batched visual tokens")
            visual_b = visual
            mask_rows = None if text_mask is None else np.asarray(text_mask, dtype=bool)
        batch, total, _ = z.shape
        n = queries.shape[-2]
        key_mask = np.ones((batch, total), dtype=bool)
        if mask_rows is not None:
            key_mask[:, n:] = mask_rows
        self.last_cross_count = 0
        for block in self.blocks:
            z = block(z, n, key_mask, visual_b, training, rng)
            if block.has_cross:
                self.last_cross_count += 1
        qhat = T.narrow(z, -2, 0, n)
        return T.reshape(qhat, qhat.shape[1:]) if single else qhat


class Classifier(Module):
    """Mean-pool the query rows and apply one fully connected layer."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.weight = Tensor(rng.normal(0.0, 0.02, size=(dim, num_classes)), requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True)

    def logits(self, qhat: Tensor) -> Tensor:
        pooled = T.tensor_mean(qhat, axis=-2)
        return T.linear(pooled, self.weight, self.bias)


def classify(qhat: Tensor, weight: Tensor, bias: Tensor, task_kind: str) -> Tensor:
    """Scores in (0, 1): softmax over classes for single-label tasks,
    per-class sigmoid for multi-label."""
    if task_kind not in TASK_KINDS:
        raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {task_kind!r}")
    pooled = T.tensor_mean(qhat, axis=-2)
    logits = T.linear(pooled, weight, bias)
    if task_kind == "single_label":
        return T.softmax(logits, axis=-1)
    return T.sigmoid(logits)
