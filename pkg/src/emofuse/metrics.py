"""Evaluation: average precision, ROC-AUC, accuracy, and the
IoU-stratified breakdown for images containing multiple annotated people.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box with exclusive bottom-right corner."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class PredictionSet:
    """Scores and ground truth for M samples.

    ``labels`` is an ``(M, C)`` binary matrix for multi-label tasks or an
    ``(M,)`` vector of class indices for single-label ones. Boxes and
    image ids are optional and only needed for the IoU stratification.
    """

    scores: np.ndarray
    labels: np.ndarray
    boxes: list[Box | None] | None = None
    image_ids: list[str] | None = None
    sample_ids: list[str] | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.ndim != 2:
            raise ValueError(f"scores must be (M, C), got shape {self.scores.shape}")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores contain non-finite values")
        m = self.scores.shape[0]
        if self.labels.shape[0] != m:
            raise ValueError(f"{m} score rows but {self.labels.shape[0]} label rows")
        if self.labels.ndim == 2 and self.labels.shape != self.scores.shape:
            raise ValueError(f"label matrix {self.labels.shape} does not match scores {self.scores.shape}")
        for name, extra in (("boxes", self.boxes), ("image_ids", self.image_ids), ("sample_ids", self.sample_ids)):
            if extra is not None and len(extra) != m:
                raise ValueError(f"{name} has {len(extra)} entries for {m} samples")

    def __len__(self) -> int:
        return self.scores.shape[0]

    def subset(self, indices: Sequence[int]) -> "PredictionSet":
        idx = list(indices)
        return PredictionSet(
            self.scores[idx],
            self.labels[idx],
            None if self.boxes is None else [self.boxes[i] for i in idx],
            None if self.image_ids is None else [self.image_ids[i] for i in idx],
            None if self.sample_ids is None else [self.sample_ids[i] for i in idx],
        )


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """All-points average precision for one class.

    Samples are ranked by descending score, ties broken by original
    index; AP is the mean of precision-at-rank over the positive
    samples.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError(f"expected matching vectors, got {scores.shape} and {labels.shape}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(np.float64)
    cum_hits = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    return float((cum_hits[hits == 1] / ranks[hits == 1]).mean())


def class_average_precisions(pred: PredictionSet) -> list[float | None]:
    """Per-class AP; ``None`` marks classes skipped for lacking positives."""
    if pred.labels.ndim != 2:
        raise ValueError("per-class AP needs a binary label matrix")
    out: list[float | None] = []
    for c in range(pred.scores.shape[1]):
        col = pred.labels[:, c]
        out.append(average_precision(pred.scores[:, c], col) if col.sum() else None)
    return out


def mean_average_precision(pred: PredictionSet) -> float:
    """Unweighted mean of per-class AP over classes with at least one
    positive sample."""
    aps = [ap for ap in class_average_precisions(pred) if ap is not None]
    if not aps:
        raise ValueError("no class has a positive label")
    return float(np.mean(aps))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outscores a random negative, with
    ties credited one half (rank-sum formulation)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_roc_auc(pred: PredictionSet) -> float:
    """Mean per-class AUC, skipping classes whose labels are single-valued."""
    if pred.labels.ndim != 2:
        raise ValueError("macro AUC needs a binary label matrix")
    aucs = []
    for c in range(pred.scores.shape[1]):
        col = pred.labels[:, c]
        if 0 < col.sum() < len(col):
            aucs.append(roc_auc(pred.scores[:, c], col))
    if not aucs:
        raise ValueError("every class is single-valued; AUC undefined")
    return float(np.mean(aucs))


def accuracy(pred: PredictionSet) -> float:
    """Fraction of samples whose top-scoring class matches the label;
    argmax ties resolve to the lowest class index."""
    if pred.labels.ndim != 1:
        raise ValueError("accuracy needs class-index labels")
    predicted = pred.scores.argmax(axis=1)
    return float((predicted == pred.labels).mean())


@dataclass(frozen=True)
class IoUStratum:
    threshold: float
    n_overlapping: int
    n_remaining: int
    map_overlapping: float | None
    map_remaining: float | None


def overlap_partition(pred: PredictionSet, threshold: float) -> np.ndarray:
    """Boolean mask: true where a sample's box has IoU strictly above
    ``threshold`` with any other annotated box in the same image."""
    if pred.boxes is None or pred.image_ids is None or any(b is None for b in pred.boxes):
        raise ValueError("IoU stratification needs a box and image id on every sample")
    by_image: dict[str, list[int]] = {}
    for i, image_id in enumerate(pred.image_ids):
        by_image.setdefault(image_id, []).append(i)
    overlapping = np.zeros(len(pred), dtype=bool)
    for members in by_image.values():
        for a in members:
            for b in members:
                if a < b and iou(pred.boxes[a], pred.boxes[b]) > threshold:
                    overlapping[a] = True
                    overlapping[b] = True
    return overlapping


def stratified_map_at_iou(pred: PredictionSet, thresholds: Sequence[float]) -> list[IoUStratum]:
    """Split samples into Overlapping vs Remaining at each threshold and
    report each partition's mAP and size. Partitions are disjoint and
    cover every sample."""
    results = []
    for t in thresholds:
        mask = overlap_partition(pred, t)
        over = pred.subset(np.flatnonzero(mask))
        rest = pred.subset(np.flatnonzero(~mask))

        def safe_map(p: PredictionSet) -> float | None:
            if len(p) == 0:
                return None
            try:
                return mean_average_precision(p)
            except ValueError:
                return None

        results.append(
            IoUStratum(
                threshold=float(t),
                n_overlapping=len(over),
                n_remaining=len(rest),
                map_overlapping=safe_map(over),
                map_remaining=safe_map(rest),
            )
        )
    return results


@dataclass
class MetricReport:
    """Headline numbers for one evaluation run, as ``key: value`` text."""

    task_kind: str
    num_samples: int
    values: dict[str, float] = field(default_factory=dict)
    skipped_classes: list[int] = field(default_factory=list)

    def format(self) -> str:
        lines = [f"task_kind: {self.task_kind}", f"num_samples: {self.num_samples}"]
        for key, value in self.values.items():
            lines.append(f"{key}: {value:.6f}")
        if self.skipped_classes:
            lines.append("skipped_classes: " + ",".join(map(str, self.skipped_classes)))
        return "\n".join(lines)


def build_report(pred: PredictionSet, task_kind: str) -> MetricReport:
    report = MetricReport(task_kind=task_kind, num_samples=len(pred))
    if task_kind == "single_label":
        report.values["accuracy"] = accuracy(pred)
    else:
        aps = class_average_precisions(pred)
        report.skipped_classes = [c for c, ap in enumerate(aps) if ap is None]
        kept = [ap for ap in aps if ap is not None]
        report.values["map"] = float(np.mean(kept))
        try:
            report.values["macro_auc"] = macro_roc_auc(pred)
        except ValueError:
            pass
    return report


def write_predictions(path: str | Path, pred: PredictionSet) -> None:
    """Line-delimited JSON dump, one record per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(pred)):
            record = {
                "sample_id": pred.sample_ids[i] if pred.sample_ids else str(i),
                "image_id": pred.image_ids[i] if pred.image_ids else None,
                "box": list(pred.boxes[i].as_tuple()) if pred.boxes and pred.boxes[i] else None,
                "scores": pred.scores[i].tolist(),
                "labels": pred.labels[i].tolist() if pred.labels.ndim == 2 else int(pred.labels[i]),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> PredictionSet:
    scores, labels, boxes, image_ids, sample_ids = [], [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            scores.append(rec["scores"])
            labels.append(rec["labels"])
            boxes.append(Box(*rec["box"]) if rec.get("box") else None)
            image_ids.append(rec.get("image_id"))
            sample_ids.append(rec["sample_id"])
    return PredictionSet(
        np.array(scores),
        np.array(labels),
        boxes if any(b is not None for b in boxes) else None,
        image_ids if any(i is not None for i in image_ids) else None,
        sample_ids,
    )
