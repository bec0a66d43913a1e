"""Full model assembly and parameter checkpointing.

The model owns the vision encoder, the text embedder, the query bank,
the fusion stack, and the classification head, and knows how to run
static images as well as frame stacks (encoded per frame, then pooled).
Checkpoints are a flat named-tensor container: a JSON manifest followed
by raw little-endian float64 payloads, byte-stable across round trips.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import Module
from .qformer import Classifier, QFormer, QFormerConfig, QueryBank
from .tensor import RngState, ShapeError, Tensor
from .text import TextBatch, TextEmbedder
from .vision import VisionConfig, VisionEncoder, temporal_pool

_MAGIC = b"EMOFUSE\x01"


@dataclass(frozen=True)
class ModelConfig:
    vision: VisionConfig
    qformer: QFormerConfig
    vocab_size: int
    text_len: int

    def __post_init__(self):
        if self.qformer.kv_dim != self.vision.dim:
            raise ShapeError(
                f"fusion expects visual dim {self.qformer.kv_dim}, vision encoder emits {self.vision.dim}"
            )
        if self.vocab_size < 2:
            raise ValueError("vocab must at least contain the <pad> and <unk> tokens")


class EmotionModel(Module):
    """Vision encoder + text embedder + query-transformer + linear head."""

    def __init__(self, config: ModelConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.config = config
        self.seed = seed
        self.vision = VisionEncoder(config.vision, rng)
        self.text = TextEmbedder(config.vocab_size, config.text_len, config.qformer.dim, rng)
        self.queries = QueryBank(config.qformer.num_queries, config.qformer.dim, rng)
        self.qformer = QFormer(config.qformer, rng)
        self.classifier = Classifier(config.qformer.dim, config.qformer.num_classes, rng)

    def encode_visual(
        self, images: np.ndarray, training: bool = False, rng: RngState | None = None
    ) -> Tensor:
        """Visual tokens for a batch: ``(B,H,W,C)`` static images or
        ``(B,T,H,W,C)`` frame stacks (per-frame encoding, then temporal
        pooling)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 4:
            return self.vision(images, training=training, rng=rng)
        if images.ndim == 5:
            frames = [
                self.vision(images[:, t], training=training, rng=rng)
                for t in range(images.shape[1])
            ]
            return temporal_pool(frames)
        raise ShapeError(f"expected (B,H,W,C) or (B,T,H,W,C) pixels, got shape {images.shape}")

    def forward(
        self,
        images: np.ndarray,
        batch: TextBatch,
        training: bool = False,
        rng: RngState | None = None,
    ) -> Tensor:
        """Raw class logits, shape ``(B, C)``."""
        visual = self.encode_visual(images, training=training, rng=rng)
        text_tokens = self.text(batch)
        qhat = self.qformer(
            self.queries.q, text_tokens, batch.mask, visual, training=training, rng=rng
        )
        return self.classifier.logits(qhat)

    def scores(self, images: np.ndarray, batch: TextBatch) -> np.ndarray:
        """Evaluation-mode class scores in (0, 1)."""
        logits = self.forward(images, batch, training=False)
        if self.config.qformer.task_kind == "single_label":
            return T.softmax(logits, axis=-1).data
        return T.sigmoid(logits).data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} vs model {p.data.shape}")
            p.data = np.ascontiguousarray(arr)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config: dict) -> None:
    """Write a named-tensor container.

    Layout: magic, 8-byte little-endian manifest length, the JSON
    manifest (sorted keys, no whitespace), then each tensor's float64
    little-endian payload in manifest order. Identical inputs always
    produce identical bytes.
    """
    names = sorted(tensors)
    manifest = {
        "config": config,
        "tensors": [{"name": n, "shape": list(np.asarray(tensors[n]).shape)} for n in names],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    offset = len(_MAGIC)
    (blob_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    manifest = json.loads(raw[offset : offset + blob_len].decode("utf-8"))
    offset += blob_len
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
        offset += count * 8
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensor payloads")
    return tensors, manifest["config"]


def model_config_to_dict(config: ModelConfig) -> dict:
    return {
        "vision": asdict(config.vision),
        "qformer": asdict(config.qformer),
        "vocab_size": config.vocab_size,
        "text_len": config.text_len,
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        vision=VisionConfig(**d["vision"]),
        qformer=QFormerConfig(**d["qformer"]),
        vocab_size=d["vocab_size"],
        text_len=d["text_len"],
    )
