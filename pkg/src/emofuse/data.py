"""Datasets: JSONL manifests, frame sampling, batching, and a synthetic
corpus whose labels need both modalities.

The synthetic generator builds a four-class task as the product of two
vision groups (which color family the shape belongs to) and two text
groups (which keyword family the description mentions). Either modality
alone pins down only its own factor, so the best single-modality
accuracy is provably 0.5 while the fused model can reach 1.0 — the gap
the acceptance run measures.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .metrics import Box
from .text import TextBatch, Vocab


class ManifestError(ValueError):
    """A manifest file failed validation; the message names the line."""


@dataclass
class Sample:
    sample_id: str
    media: str
    labels: tuple[int, ...]
    description: str = ""
    box: tuple[float, float, float, float] | None = None
    image_id: str | None = None
    split: str = "train"
    is_video: bool = False

    def to_record(self) -> dict:
        record = {
            "sample_id": self.sample_id,
            "media": self.media,
            "labels": list(self.labels),
            "description": self.description,
            "split": self.split,
        }
        if self.box is not None:
            record["box"] = list(self.box)
        if self.image_id is not None:
            record["image_id"] = self.image_id
        if self.is_video:
            record["is_video"] = True
        return record


@dataclass
class Manifest:
    task_kind: str
    num_classes: int
    class_names: tuple[str, ...]
    samples: list[Sample] = field(default_factory=list)

    def split(self, tag: str) -> list[Sample]:
        return [s for s in self.samples if s.split == tag]


_HEADER_FIELDS = ("task_kind", "num_classes", "class_names")
_SAMPLE_FIELDS = ("sample_id", "media", "labels")


def load_manifest(path: str | Path) -> Manifest:
    """Parse a JSONL manifest; the first record is the header.

    Errors carry the 1-based line number so a bad row in a large file
    can be found without bisecting.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    rows = [(i + 1, line) for i, line in enumerate(lines) if line.strip()]
    if not rows:
        raise ManifestError(f"{path}: empty manifest")

    def parse(lineno: int, line: str) -> dict:
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: line {lineno}: invalid JSON ({exc.msg})")
        if not isinstance(record, dict):
            raise ManifestError(f"{path}: line {lineno}: expected a JSON object")
        return record

    lineno, line = rows[0]
    header = parse(lineno, line)
    for fieldname in _HEADER_FIELDS:
        if fieldname not in header:
            raise ManifestError(f"{path}: line {lineno}: header missing field '{fieldname}'")
    if header["task_kind"] not in ("single_label", "multi_label"):
        raise ManifestError(f"{path}: line {lineno}: unknown task_kind '{header['task_kind']}'")
    num_classes = int(header["num_classes"])
    class_names = tuple(header["class_names"])
    if len(class_names) != num_classes:
        raise ManifestError(
            f"{path}: line {lineno}: {len(class_names)} class names for num_classes={num_classes}"
        )

    samples = []
    for lineno, line in rows[1:]:
        record = parse(lineno, line)
        for fieldname in _SAMPLE_FIELDS:
            if fieldname not in record:
                raise ManifestError(f"{path}: line {lineno}: sample missing field '{fieldname}'")
        labels = tuple(int(x) for x in record["labels"])
        if header["task_kind"] == "single_label" and len(labels) != 1:
            raise ManifestError(
                f"{path}: line {lineno}: single_label sample needs exactly one label, got {len(labels)}"
            )
        if any(not 0 <= x < num_classes for x in labels):
            raise ManifestError(f"{path}: line {lineno}: label out of range [0, {num_classes})")
        box = tuple(float(v) for v in record["box"]) if record.get("box") is not None else None
        samples.append(
            Sample(
                sample_id=str(record["sample_id"]),
                media=str(record["media"]),
                labels=labels,
                description=str(record.get("description", "")),
                box=box,
                image_id=record.get("image_id"),
                split=str(record.get("split", "train")),
                is_video=bool(record.get("is_video", False)),
            )
        )
    return Manifest(header["task_kind"], num_classes, class_names, samples)


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    header = {
        "task_kind": manifest.task_kind,
        "num_classes": manifest.num_classes,
        "class_names": list(manifest.class_names),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sample in manifest.samples:
            fh.write(json.dumps(sample.to_record(), sort_keys=True) + "\n")


def sample_frames(frame_dir: str | Path, num_frames: int) -> list[Path]:
    """Pick ``num_frames`` frames from a clip directory at uniform stride.

    Frames are the sorted image files in the directory; frame i of the
    output is source frame floor(i * n / T). Clips shorter than T are
    padded by repeating the last frame.
    """
    frame_dir = Path(frame_dir)
    frames = sorted(p for p in frame_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not frames:
        raise ValueError(f"no frames found in {frame_dir}")
    n = len(frames)
    if n >= num_frames:
        return [frames[(i * n) // num_frames] for i in range(num_frames)]
    return frames + [frames[-1]] * (num_frames - n)


def load_image(path: str | Path) -> np.ndarray:
    """RGB image as float64 in [0, 1], shape (H, W, 3)."""
    from PIL import Image

    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.float64)
    return pixels / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    from PIL import Image

    pixels = np.clip(np.asarray(image) * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(pixels, mode="RGB").save(path)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled index batches; the final short batch is kept, not dropped."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    num_train: int = 1000
    num_val: int = 200
    image_size: int = 32
    vision_groups: int = 2
    text_groups: int = 2
    num_shapes: int = 8
    num_keywords: int = 8
    noise: float = 0.2
    seed: int = 7

    def __post_init__(self):
        if self.num_shapes % self.vision_groups:
            raise ValueError("num_shapes must divide evenly into vision groups")
        if self.num_keywords % self.text_groups:
            raise ValueError("num_keywords must divide evenly into text groups")

    @property
    def num_classes(self) -> int:
        return self.vision_groups * self.text_groups

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(f"class_{v}{t}" for v in range(self.vision_groups) for t in range(self.text_groups))


_PALETTE = (
    (0.9, 0.15, 0.15),
    (0.15, 0.45, 0.9),
    (0.95, 0.75, 0.1),
    (0.2, 0.75, 0.3),
    (0.85, 0.3, 0.8),
    (0.1, 0.8, 0.8),
    (0.95, 0.5, 0.1),
    (0.55, 0.35, 0.85),
)

_KEYWORDS = ("lantern", "orchid", "quarry", "tundra", "velvet", "walnut", "gravel", "meadow")

_FILLER = (
    "the", "a", "scene", "shows", "near", "beside", "under", "light", "with",
    "some", "quiet", "open", "view", "of", "and", "small", "large", "in",
)

_TEMPLATES = (
    "the scene shows a {kw} near the window",
    "a quiet view of the {kw} in open light",
    "some small {kw} beside a large wall",
    "the {kw} sits under a pale sky",
    "a photo with the {kw} and little else",
)


def _shape_group(shape_id: int, spec: SyntheticSpec) -> int:
    return shape_id % spec.vision_groups


def _keyword_group(keyword_id: int, spec: SyntheticSpec) -> int:
    return keyword_id % spec.text_groups


def _render_shape(spec: SyntheticSpec, shape_id: int, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    image = rng.uniform(0.0, spec.noise, size=(size, size, 3))
    color = np.array(_PALETTE[shape_id % len(_PALETTE)])
    glyph = shape_id // 2 % 4
    half = size // 4 + int(rng.integers(-2, 3))
    cy = size // 2 + int(rng.integers(-3, 4))
    cx = size // 2 + int(rng.integers(-3, 4))
    ys, xs = np.mgrid[0:size, 0:size]
    dy, dx = ys - cy, xs - cx
    if glyph == 0:  # square
        mask = (np.abs(dy) <= half) & (np.abs(dx) <= half)
    elif glyph == 1:  # disc
        mask = dy * dy + dx * dx <= half * half
    elif glyph == 2:  # diamond
        mask = np.abs(dy) + np.abs(dx) <= half
    else:  # cross
        mask = (np.abs(dy) <= half // 2) | (np.abs(dx) <= half // 2)
        mask &= (np.abs(dy) <= half) & (np.abs(dx) <= half)
    jitter = rng.uniform(-0.05, 0.05, size=(size, size, 3))
    image[mask] = np.clip(color + jitter[mask], 0.0, 1.0)
    return image


def _render_description(keyword_id: int, rng: np.random.Generator) -> str:
    template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
    text = template.format(kw=_KEYWORDS[keyword_id])
    extra = " ".join(_FILLER[int(rng.integers(len(_FILLER)))] for _ in range(int(rng.integers(2, 5))))
    return f"{text} {extra}"


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.array([i % num_classes for i in range(n)])
    rng.shuffle(labels)
    return labels


def synth_generate(spec: SyntheticSpec, out_dir: str | Path) -> Manifest:
    """Write the synthetic corpus (PNGs + manifest) and return the manifest.

    Fully deterministic: the same spec always produces byte-identical
    images, descriptions, and manifest rows.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    samples = []
    for split, count in (("train", spec.num_train), ("val", spec.num_val)):
        labels = _balanced_labels(count, spec.num_classes, rng)
        for i, label in enumerate(labels):
            v_group = int(label) // spec.text_groups
            t_group = int(label) % spec.text_groups
            shape_choices = [s for s in range(spec.num_shapes) if _shape_group(s, spec) == v_group]
            keyword_choices = [k for k in range(spec.num_keywords) if _keyword_group(k, spec) == t_group]
            shape_id = shape_choices[int(rng.integers(len(shape_choices)))]
            keyword_id = keyword_choices[int(rng.integers(len(keyword_choices)))]
            image = _render_shape(spec, shape_id, rng)
            name = f"{split}_{i:05d}.png"
            save_image(image_dir / name, image)
            samples.append(
                Sample(
                    sample_id=f"{split}-{i:05d}",
                    media=str(Path("images") / name),
                    labels=(int(label),),
                    description=_render_description(keyword_id, rng),
                    split=split,
                )
            )
    manifest = Manifest("single_label", spec.num_classes, spec.class_names, samples)
    write_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest


def single_modality_ceilings(spec: SyntheticSpec) -> tuple[float, float]:
    """Exact Bayes-optimal accuracy for a vision-only and a text-only observer.

    Enumerates the full joint distribution over (label, shape, keyword)
    under the generative process — balanced labels, shape uniform within
    the label's vision group, keyword uniform within its text group —
    and scores an oracle that reads its own factor perfectly. The result
    is a ceiling for *any* classifier that sees one modality: no model
    can beat an observer that recovers the latent factor exactly.
    """
    num_classes = spec.num_classes
    p_label = 1.0 / num_classes
    joint_vs = np.zeros((spec.num_shapes, num_classes))
    joint_tk = np.zeros((spec.num_keywords, num_classes))
    for label in range(num_classes):
        v_group = label // spec.text_groups
        t_group = label % spec.text_groups
        shapes = [s for s in range(spec.num_shapes) if _shape_group(s, spec) == v_group]
        keywords = [k for k in range(spec.num_keywords) if _keyword_group(k, spec) == t_group]
        for s in shapes:
            joint_vs[s, label] += p_label / len(shapes)
        for k in keywords:
            joint_tk[k, label] += p_label / len(keywords)
    vision_ceiling = float(joint_vs.max(axis=1).sum())
    text_ceiling = float(joint_tk.max(axis=1).sum())
    assert math.isclose(joint_vs.sum(), 1.0, abs_tol=1e-12)
    assert math.isclose(joint_tk.sum(), 1.0, abs_tol=1e-12)
    return vision_ceiling, text_ceiling


# ---------------------------------------------------------------------------
# Model-ready encoding


class EncodedDataset:
    """One split of a manifest turned into arrays the model consumes.

    ``modality`` supports ablations: "vision" blanks every description
    (all-padding text), "text" zeroes every image, "both" keeps both.
    """

    def __init__(
        self,
        images: np.ndarray,
        text: TextBatch,
        labels: np.ndarray,
        task_kind: str,
        sample_ids: list[str] | None = None,
        boxes: list[Box | None] | None = None,
        image_ids: list[str | None] | None = None,
    ):
        if len(images) != len(text.ids) or len(images) != len(labels):
            raise ValueError("images, text, and labels must align")
        self.images = images
        self.text = text
        self.labels = labels
        self.task_kind = task_kind
        self.sample_ids = sample_ids or [str(i) for i in range(len(images))]
        self.boxes = boxes
        self.image_ids = image_ids

    @classmethod
    def from_manifest(
        cls,
        manifest: Manifest,
        split: str,
        vocab: Vocab,
        text_len: int,
        root: str | Path = ".",
        num_frames: int | None = None,
        modality: str = "both",
    ) -> "EncodedDataset":
        if modality not in ("both", "vision", "text"):
            raise ValueError(f"unknown modality '{modality}'")
        samples = manifest.split(split)
        if not samples:
            raise ValueError(f"manifest has no samples in split '{split}'")
        root = Path(root)
        stack = []
        for sample in samples:
            if sample.is_video:
                if num_frames is None:
                    raise ValueError("num_frames is required for video samples")
                frames = [load_image(p) for p in sample_frames(root / sample.media, num_frames)]
                stack.append(np.stack(frames))
            else:
                stack.append(load_image(root / sample.media))
        images = np.stack(stack)
        if modality == "text":
            images = np.zeros_like(images)
        texts = ["" if modality == "vision" else s.description for s in samples]
        text = TextBatch.from_texts(texts, vocab, text_len)
        if manifest.task_kind == "single_label":
            labels = np.array([s.labels[0] for s in samples], dtype=np.int64)
        else:
            labels = np.zeros((len(samples), manifest.num_classes))
            for row, sample in zip(labels, samples):
                row[list(sample.labels)] = 1.0
        return cls(
            images,
            text,
            labels,
            manifest.task_kind,
            sample_ids=[s.sample_id for s in samples],
            boxes=[Box(*s.box) if s.box else None for s in samples],
            image_ids=[s.image_id for s in samples],
        )

    def __len__(self) -> int:
        return len(self.images)

    def label_array(self) -> np.ndarray:
        return self.labels

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, TextBatch, np.ndarray]:
        return self.images[idx], self.text.take(idx), self.labels[idx]
