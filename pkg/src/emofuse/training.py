"""Optimisation: AdamW with per-group learning rates, a linear decay
schedule, early stopping, and optional vision-encoder freezing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .metrics import PredictionSet, accuracy, mean_average_precision
from .model import EmotionModel
from .tensor import RngState, Tensor, zero_grads


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient went NaN or infinite; the step was aborted."""


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 1e-4
    backbone_multiplier: float = 0.1
    vision_multiplier: float = 0.1
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 64
    freeze_vision: bool = False

    def __post_init__(self):
        for name in ("backbone_multiplier", "vision_multiplier"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if self.patience < 1:
            raise ValueError(f"patience must be at least 1, got {self.patience}")
        if self.base_lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("base_lr, batch_size and max_epochs must be positive")


@dataclass
class ParamGroup:
    name: str
    multiplier: float
    params: list[tuple[str, Tensor]]


def compute_loss(logits: Tensor, labels: np.ndarray, task_kind: str) -> Tensor:
    """Task-appropriate training loss from raw logits."""
    if task_kind == "single_label":
        return T.cross_entropy_with_logits(logits, labels)
    if task_kind == "multi_label":
        return T.bce_with_logits(logits, labels)
    raise ValueError(f"unknown task kind {task_kind!r}")


_GROUP_PREFIXES = {
    "classifier": ("classifier.",),
    "backbone": ("qformer.", "queries.", "text."),
    "vision": ("vision.",),
}


def make_param_groups(model: EmotionModel, cfg: OptimConfig) -> list[ParamGroup]:
    """Split parameters into lr groups by component.

    The classification head trains at the base rate; the fusion stack,
    query bank, and text embeddings form the backbone group; the vision
    encoder gets its own (usually smaller) multiplier or is dropped
    entirely when frozen. Every parameter must land in exactly one
    group.
    """
    named = list(model.named_parameters())
    buckets: dict[str, list[tuple[str, Tensor]]] = {g: [] for g in _GROUP_PREFIXES}
    unassigned = []
    for name, p in named:
        for group, prefixes in _GROUP_PREFIXES.items():
            if name.startswith(prefixes):
                buckets[group].append((name, p))
                break
        else:
            unassigned.append(name)
    if unassigned:
        raise ValueError(f"parameters not assigned to any lr group: {unassigned}")
    multipliers = {
        "classifier": 1.0,
        "backbone": cfg.backbone_multiplier,
        "vision": cfg.vision_multiplier,
    }
    groups = []
    for group in ("classifier", "backbone", "vision"):
        if group == "vision" and cfg.freeze_vision:
            continue
        groups.append(ParamGroup(group, multipliers[group], buckets[group]))
    return groups


def linear_schedule(step: int, total_steps: int) -> float:
    """Decay factor ``1 - step/total_steps``, floored at ``1/total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return max(1.0 - step / total_steps, 1.0 / total_steps)


class AdamW:
    """Decoupled-weight-decay Adam over named parameter groups.

    Weight decay multiplies each parameter by ``(1 - lr*wd)`` on its
    own, separate from the moment-driven update. Every applied step is
    logged as ``(step_index, group_name, effective_lr)`` so the schedule
    can be audited after the fact.
    """

    def __init__(self, groups: Sequence[ParamGroup], cfg: OptimConfig):
        self.groups = list(groups)
        self.cfg = cfg
        self.steps_completed = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for group in self.groups:
            for name, p in group.params:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
        self.lr_log: list[tuple[int, str, float]] = []

    def step(self, lr_scale: float) -> None:
        for group in self.groups:
            for name, p in group.params:
                g = p.grad
                if g is not None and not np.isfinite(g).all():
                    raise NonFiniteGradientError(
                        f"non-finite gradient in {name} at step {self.steps_completed}"
                    )
        beta1, beta2 = self.cfg.betas
        t = self.steps_completed + 1
        bias1 = 1.0 - beta1**t
        bias2 = 1.0 - beta2**t
        for group in self.groups:
            lr = self.cfg.base_lr * group.multiplier * lr_scale
            self.lr_log.append((self.steps_completed, group.name, lr))
            for name, p in group.params:
                if self.cfg.weight_decay:
                    p.data -= lr * self.cfg.weight_decay * p.data
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                m = self.m[name]
                v = self.v[name]
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g * g
                p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.cfg.eps)
        self.steps_completed += 1


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    lr: float
    val_metric: float


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_metric: float
    best_epoch: int
    history: list[EpochRecord]
    stopped_early: bool
    lr_log: list[tuple[int, str, float]] = field(default_factory=list)


def evaluate(model: EmotionModel, data, batch_size: int = 64) -> float:
    """Validation metric: accuracy for single-label, mAP for multi-label."""
    pred = predict(model, data, batch_size)
    if model.config.qformer.task_kind == "single_label":
        return accuracy(pred)
    return mean_average_precision(pred)


def predict(model: EmotionModel, data, batch_size: int = 64) -> PredictionSet:
    scores = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        images, batch, _ = data.batch(idx)
        scores.append(model.scores(images, batch))
    return PredictionSet(
        np.concatenate(scores, axis=0),
        data.label_array(),
        boxes=getattr(data, "boxes", None),
        image_ids=getattr(data, "image_ids", None),
        sample_ids=getattr(data, "sample_ids", None),
    )


def fit(
    model: EmotionModel,
    train_data,
    val_data,
    cfg: OptimConfig,
    seed: int = 0,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    val_metric_fn: Callable[[EmotionModel], float] | None = None,
) -> FitResult:
    """Train until the validation metric stalls or epochs run out.

    Improvement is strict; training stops once the count of consecutive
    non-improving epochs exceeds ``patience``. The model is left holding
    (and the result carries) the best epoch's parameters, never worse
    ones.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation splits must be nonempty")
    task_kind = model.config.qformer.task_kind
    if cfg.freeze_vision:
        for _, p in model.vision.named_parameters():
            p.requires_grad = False
    groups = make_param_groups(model, cfg)
    optimizer = AdamW(groups, cfg)
    params = model.parameters()
    steps_per_epoch = math.ceil(len(train_data) / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    shuffle_rng = np.random.default_rng((seed, 1))
    dropout_rng = RngState(seed)

    history: list[EpochRecord] = []
    best_metric = -math.inf
    best_state: dict[str, np.ndarray] = model.state_dict()
    best_epoch = 0
    stale_epochs = 0
    stopped_early = False

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_data))
        epoch_losses = []
        scale = 1.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images, batch, labels = train_data.batch(idx)
            logits = model.forward(images, batch, training=True, rng=dropout_rng)
            loss = compute_loss(logits, labels, task_kind)
            zero_grads(params)
            loss.backward()
            scale = linear_schedule(optimizer.steps_completed, total_steps)
            optimizer.step(scale)
            epoch_losses.append(loss.item())
        if val_metric_fn is not None:
            val_metric = val_metric_fn(model)
        else:
            val_metric = evaluate(model, val_data, cfg.batch_size)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)),
            lr=cfg.base_lr * scale,
            val_metric=float(val_metric),
        )
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if record.val_metric > best_metric:
            best_metric = record.val_metric
            best_state = model.state_dict()
            best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs > cfg.patience:
                stopped_early = True
                break
    model.load_state_dict(best_state)
    return FitResult(
        best_state=best_state,
        best_metric=best_metric,
        best_epoch=best_epoch,
        history=history,
        stopped_early=stopped_early,
        lr_log=optimizer.lr_log,
    )
