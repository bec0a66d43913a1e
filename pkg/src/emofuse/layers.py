"""Parameterised building blocks shared by the vision encoder and the fusion stack."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import RngState, ShapeError, Tensor


class MaskError(ValueError):
    """An attention row has no unmasked key to attend to."""


class Module:
    """Minimal parameter container.

    Any attribute that is a ``Tensor``, a ``Module``, or a list of
    modules is picked up by :meth:`named_parameters` in attribute order.
    Freezing is expressed by flipping a parameter's ``requires_grad``;
    frozen parameters stay visible here (they still belong in
    checkpoints) but receive no gradients.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def init_normal(rng: np.random.Generator, shape: tuple, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def init_zeros(shape: tuple) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_ones(shape: tuple) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = init_normal(rng, (d_in, d_out))
        self.bias = init_zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.bias is None:
            return T.matmul(x, self.weight)
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = init_ones((dim,))
        self.beta = init_zeros((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """Two-layer MLP (``dim -> hidden -> dim``) with GELU in between."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def _lift_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (S, d) or (B, S, d) tokens, got shape {x.shape}")


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, s, d = x.shape
    return T.swapaxes(T.reshape(x, (b, s, num_heads, d // num_heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return T.reshape(T.swapaxes(x, 1, 2), (b, s, h * dh))


def _attend(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    num_heads: int,
    key_mask: np.ndarray | None,
    dropout_p: float,
    training: bool,
    rng: RngState | None,
) -> Tensor:
    """Scaled dot-product attention over pre-projected q/k/v token stacks.

    ``key_mask`` is boolean, true for keys that may be attended to; masked
    keys receive weight exactly zero.
    """
    head_dim = q.shape[-1] // num_heads
    qh = _split_heads(q, num_heads)
    kh = _split_heads(k, num_heads)
    vh = _split_heads(v, num_heads)
    scores = T.scale(T.matmul(qh, T.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(head_dim))
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None, :]
        if mask.shape != (k.shape[0], k.shape[1]):
            raise ShapeError(f"key mask shape {mask.shape} does not match keys {k.shape[:2]}")
        if not mask.any(axis=1).all():
            raise MaskError("attention row with every key masked")
        scores = T.masked_fill(scores, ~mask[:, None, None, :], -np.inf)
    probs = T.softmax(scores, axis=-1)
    probs = T.dropout(probs, dropout_p, training, rng)
    return _merge_heads(T.matmul(probs, vh))


class MultiHeadSelfAttention(Module):
    """Multi-head self-attention with optional key masking.

    Accepts ``(S, d)`` or ``(B, S, d)`` input and returns the same shape.
    """

    def __init__(self, dim: int, num_heads: int, dropout: float, rng: np.random.Generator):
        if dim % num_heads != 0:
            raise ShapeError(f"model dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.dropout_p = dropout
        # Pure projection matrices: softmax is shift-invariant, so a key
        # bias would be a parameter with no effect on the output.
        self.query = Linear(dim, dim, rng, bias=False)
        self.key = Linear(dim, dim, rng, bias=False)
        self.value = Linear(dim, dim, rng, bias=False)
        self.out = Linear(dim, dim, rng, bias=False)

    def __call__(
        self,
        z: Tensor,
        key_mask: np.ndarray | None = None,
        training: bool = False,
        rng: RngState | None = None,
    ) -> Tensor:
        z, squeezed = _lift_batch(z)
        ctx = _attend(
            self.query(z), self.key(z), self.value(z),
            self.num_heads, key_mask, self.dropout_p, training, rng,
        )
        out = self.out(ctx)
        return T.reshape(out, out.shape[1:]) if squeezed else out


class MultiHeadCrossAttention(Module):
    """Multi-head attention from one token stream onto another.

    Queries come from the ``dim``-sized stream; keys and values are
    projected from a ``kv_dim``-sized stream.
    """

    def __init__(self, dim: int, kv_dim: int, num_heads: int, dropout: float, rng: np.random.Generator):
        if dim % num_heads != 0:
            raise ShapeError(f"model dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.dropout_p = dropout
        self.query = Linear(dim, dim, rng, bias=False)
        self.key = Linear(kv_dim, dim, rng, bias=False)
        self.value = Linear(kv_dim, dim, rng, bias=False)
        self.out = Linear(dim, dim, rng, bias=False)

    def __call__(
        self,
        q_tokens: Tensor,
        kv_tokens: Tensor,
        key_mask: np.ndarray | None = None,
        training: bool = False,
        rng: RngState | None = None,
    ) -> Tensor:
        q_tokens, squeezed = _lift_batch(q_tokens)
        kv_tokens, _ = _lift_batch(kv_tokens)
        if kv_tokens.shape[0] != q_tokens.shape[0]:
            raise ShapeError(
                f"cross-attention batch mismatch: queries {q_tokens.shape} vs keys {kv_tokens.shape}"
            )
        ctx = _attend(
            self.query(q_tokens), self.key(kv_tokens), self.value(kv_tokens),
            self.num_heads, key_mask, self.dropout_p, training, rng,
        )
        out = self.out(ctx)
        return T.reshape(out, out.shape[1:]) if squeezed else out
