"""Tokenisation, vocabulary handling, and text embedding.

Descriptions arrive as free-form sentences from the captioning service;
here they become fixed-length id sequences with padding masks, then
dense token embeddings with learned positions.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .layers import Module
from .tensor import ShapeError, Tensor

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_WORD = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    """Token table with reserved padding (id 0) and unknown (id 1) slots."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise ValueError("vocab must start with the <pad> and <unk> tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab contains duplicate tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines))


def build_vocab(texts: Iterable[str], min_freq: int = 1) -> Vocab:
    """Count words across ``texts`` and keep those seen >= ``min_freq`` times.

    Tokens are ordered by descending frequency, ties broken
    alphabetically, after the two reserved slots — so the same corpus
    always produces the same table.
    """
    counts = Counter()
    saw_text = False
    for text in texts:
        saw_text = True
        counts.update(split_words(text))
    if not saw_text:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (tok for tok, n in counts.items() if n >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocab((PAD_TOKEN, UNK_TOKEN) + tuple(kept))


def tokenize(text: str, vocab: Vocab, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Turn one string into ``(ids, mask)`` arrays of exactly ``length``.

    Sequences longer than ``length`` are truncated; shorter ones are
    right-padded with the pad id. ``mask`` is true on real tokens.
    """
    if length < 1:
        raise ValueError(f"sequence length must be positive, got {length}")
    words = split_words(text)[:length]
    ids = np.full(length, PAD_ID, dtype=np.int64)
    ids[: len(words)] = [vocab.id_of(w) for w in words]
    mask = np.zeros(length, dtype=bool)
    mask[: len(words)] = True
    return ids, mask


@dataclass
class TextBatch:
    """Fixed-length id matrix plus its padding mask, both ``(B, L)``."""

    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.shape != self.mask.shape or self.ids.ndim != 2:
            raise ShapeError(f"ids {self.ids.shape} and mask {self.mask.shape} must match as (B, L)")
        if not (self.mask == (self.ids != PAD_ID)).all():
            raise ValueError("mask must be false exactly at padding ids")

    @classmethod
    def from_texts(cls, texts: Sequence[str], vocab: Vocab, length: int) -> "TextBatch":
        pairs = [tokenize(t, vocab, length) for t in texts]
        return cls(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))

    def __len__(self) -> int:
        return self.ids.shape[0]

    def take(self, indices: np.ndarray) -> "TextBatch":
        return TextBatch(self.ids[indices], self.mask[indices])


def embed_tokens(batch: TextBatch, table: Tensor) -> Tensor:
    """Look up embedding rows for each id: ``(B, L) -> (B, L, d)``."""
    return T.embedding(table, batch.ids)


class TextEmbedder(Module):
    """Token embedding table plus learned positions for a fixed length."""

    def __init__(self, vocab_size: int, length: int, dim: int, rng: np.random.Generator):
        self.table = Tensor(rng.normal(0.0, 0.02, size=(vocab_size, dim)), requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(length, dim)), requires_grad=True)
        self.length = length

    def __call__(self, batch: TextBatch) -> Tensor:
        if batch.ids.shape[1] != self.length:
            raise ShapeError(
                f"batch length {batch.ids.shape[1]} does not match embedder length {self.length}"
            )
        emb = embed_tokens(batch, self.table)
        return emb + T.broadcast_to(T.reshape(self.pos, (1,) + self.pos.shape), emb.shape)
