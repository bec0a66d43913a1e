"""Patch-based vision transformer and temporal pooling for frame stacks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadSelfAttention
from .tensor import RngState, ShapeError, Tensor


@dataclass(frozen=True)
class VisionConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    patch_size: int = 8
    dim: int = 64
    depth: int = 2
    num_heads: int = 4
    dropout: float = 0.3

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ShapeError(
                f"image {self.height}x{self.width} not divisible into {self.patch_size}-pixel patches"
            )
        if self.dim % self.num_heads:
            raise ShapeError(f"vision dim {self.dim} not divisible by {self.num_heads} heads")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def num_tokens(self) -> int:
        """Patch tokens plus the prepended class token."""
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut ``(H, W, C)`` into ``(H/P * W/P, P*P*C)`` rows.

    Patches are ordered row-major over the grid; within a patch, pixels
    flatten in (row, column, channel) order.
    """
    if image.ndim != 3:
        raise ShapeError(f"expected (H, W, C) image, got shape {image.shape}")
    h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} not divisible into {patch_size}-pixel patches")
    rows, cols = h // patch_size, w // patch_size
    tiles = image.reshape(rows, patch_size, cols, patch_size, c)
    return tiles.transpose(0, 2, 1, 3, 4).reshape(rows * cols, patch_size * patch_size * c)


class EncoderBlock(Module):
    """Pre-norm transformer block: self-attention then MLP, each residual."""

    def __init__(self, dim: int, num_heads: int, dropout: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads, dropout, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, 4 * dim, rng)

    def __call__(self, z: Tensor, training: bool = False, rng: RngState | None = None) -> Tensor:
        z = z + self.attn(self.norm1(z), training=training, rng=rng)
        return z + self.mlp(self.norm2(z))


class VisionEncoder(Module):
    """ViT-style encoder producing one token per patch plus a class token."""

    def __init__(self, config: VisionConfig, rng: np.random.Generator):
        self.config = config
        self.patch_embed = Linear(config.patch_dim, config.dim, rng)
        self.cls_token = Tensor(rng.normal(0.0, 0.02, size=(1, config.dim)), requires_grad=True)
        self.pos_embed = Tensor(
            rng.normal(0.0, 0.02, size=(config.num_tokens, config.dim)), requires_grad=True
        )
        self.blocks = [
            EncoderBlock(config.dim, config.num_heads, config.dropout, rng)
            for _ in range(config.depth)
        ]
        self.norm_out = LayerNorm(config.dim)

    def __call__(
        self, images: np.ndarray, training: bool = False, rng: RngState | None = None
    ) -> Tensor:
        """Encode ``(H, W, C)`` or ``(B, H, W, C)`` pixels to visual tokens.

        Returns ``(num_tokens, dim)`` for a single image, else
        ``(B, num_tokens, dim)``.
        """
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        cfg = self.config
        if images.shape[1:] != (cfg.height, cfg.width, cfg.channels):
            raise ShapeError(
                f"expected {(cfg.height, cfg.width, cfg.channels)} images, got {images.shape[1:]}"
            )
        batch = images.shape[0]
        patches = np.stack([patchify(im, cfg.patch_size) for im in images])
        z = self.patch_embed(Tensor(patches))
        cls = T.broadcast_to(T.reshape(self.cls_token, (1, 1, cfg.dim)), (batch, 1, cfg.dim))
        z = T.concat([cls, z], axis=1)
        z = z + T.broadcast_to(T.reshape(self.pos_embed, (1,) + self.pos_embed.shape), z.shape)
        for block in self.blocks:
            z = block(z, training=training, rng=rng)
        z = self.norm_out(z)
        return T.reshape(z, z.shape[1:]) if single else z


def temporal_pool(frame_tokens: list[Tensor]) -> Tensor:
    """Average per-frame token stacks into a single stack.

    The mean is anchored at the elementwise minimum and accumulated with
    exact summation, so it is invariant to frame order down to the last
    bit and maps identical frames to themselves exactly.
    """
    return T.mean_stack(frame_tokens)
