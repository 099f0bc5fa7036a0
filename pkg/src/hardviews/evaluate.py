"""Transfer evaluation of frozen or fine-tuned representations.

The linear probe trains a softmax classifier on frozen backbone features
(extracted once, evaluation-mode forward, clean statistics).  Low-shot
probing subsamples k labelled examples per class and averages several
runs.  Fine-tuning unfreezes everything, with the backbone trained at a
tenth of the classifier learning rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import TransformConfig, center_view
from .data import Dataset
from .errors import ContractError
from .nn import SGD, BNMode, Encoder, Linear, cosine_lr, step_lr
from .tensor import GradTape, Tensor, log_softmax, no_grad, take_per_row, tmean


@dataclass
class ProbeConfig:
    epochs: int = 30
    lr: float = 0.3
    schedule: str = "cosine"  # cosine | step
    milestones: list[int] = field(default_factory=lambda: [18, 24])
    decay: float = 0.1
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 0.0
    runs: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if self.runs < 1:
            raise ContractError(f"runs must be >= 1, got {self.runs}")
        if self.schedule not in ("cosine", "step"):
            raise ContractError(f"unknown schedule {self.schedule!r}")


@dataclass
class EvalReport:
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def extract_features(encoder: Encoder, images: np.ndarray, transform: TransformConfig,
                     batch_size: int = 256) -> np.ndarray:
    """Backbone features of deterministic center views; never mutates state."""
    rows = []
    for start in range(0, images.shape[0], batch_size):
        views = center_view(images[start : start + batch_size], transform)
        with no_grad():
            h = encoder.features(Tensor(views), BNMode.CLEAN, training=False)
        rows.append(h.data.copy())
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, 128), dtype=np.float32)


def _schedule_lr(cfg: ProbeConfig, epoch: int, step: int, total_steps: int) -> float:
    if cfg.schedule == "cosine":
        return cosine_lr(cfg.lr, step, total_steps)
    return step_lr(cfg.lr, epoch, cfg.milestones, cfg.decay)


def _train_softmax_head(features: np.ndarray, labels: np.ndarray, num_classes: int,
                        cfg: ProbeConfig, rng: np.random.Generator) -> Linear:
    head = Linear(features.shape[1], num_classes, rng)
    opt = SGD(head.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    n = features.shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.lr = _schedule_lr(cfg, epoch, step, total_steps)
            with GradTape() as tape:
                logits = head(Tensor(features[idx]))
                loss = -tmean(take_per_row(log_softmax(logits, axis=1), labels[idx]))
                tape.backward(loss)
            opt.step()
            opt.zero_grad()
            step += 1
    return head


def _head_accuracy(head: Linear, features: np.ndarray, labels: np.ndarray) -> float:
    logits = features @ head.weight.data + head.bias.data[None, :]
    return float((logits.argmax(axis=1) == labels).mean())


def _check_classes(train: Dataset, test: Dataset) -> int:
    num_classes = train.num_classes
    if test.labels.size and test.labels.max() >= num_classes:
        raise ContractError(
            f"test labels reach class {int(test.labels.max())}, train set has {num_classes}"
        )
    return num_classes


def linear_probe(encoder: Encoder, train_set: Dataset, test_set: Dataset,
                 cfg: ProbeConfig, transform: TransformConfig) -> EvalReport:
    """Train a linear classifier on frozen features; report test top-1."""
    cfg.validate()
    num_classes = _check_classes(train_set, test_set)
    feats_train = extract_features(encoder, train_set.images, transform)
    feats_test = extract_features(encoder, test_set.images, transform)
    accs = []
    for run in range(cfg.runs):
        rng = np.random.default_rng((cfg.seed, run))
        head = _train_softmax_head(feats_train, train_set.labels, num_classes, cfg, rng)
        accs.append(_head_accuracy(head, feats_test, test_set.labels))
    return EvalReport(accuracies=accs)


def stratified_indices(labels: np.ndarray, per_class: dict[int, int],
                       rng: np.random.Generator) -> np.ndarray:
    """Sample exactly per_class[c] examples of each class, without replacement."""
    picks = []
    for cls, want in sorted(per_class.items()):
        pool = np.flatnonzero(labels == cls)
        if pool.size < want:
            raise ContractError(f"class {cls} has {pool.size} examples, need {want}")
        picks.append(rng.choice(pool, size=want, replace=False))
    return np.sort(np.concatenate(picks))


def low_shot_probe(encoder: Encoder, train_set: Dataset, test_set: Dataset, k: int,
                   cfg: ProbeConfig, transform: TransformConfig) -> EvalReport:
    """Linear probe on k labelled examples per class, averaged over cfg.runs."""
    cfg.validate()
    if k < 1:
        raise ContractError(f"shots per class must be >= 1, got {k}")
    num_classes = _check_classes(train_set, test_set)
    feats_train = extract_features(encoder, train_set.images, transform)
    feats_test = extract_features(encoder, test_set.images, transform)
    accs = []
    for run in range(cfg.runs):
        # separate subset stream so k = full class size reduces to linear_probe
        subset_rng = np.random.default_rng((cfg.seed, run, 1))
        idx = stratified_indices(train_set.labels, {c: k for c in range(num_classes)}, subset_rng)
        rng = np.random.default_rng((cfg.seed, run))
        head = _train_softmax_head(feats_train[idx], train_set.labels[idx], num_classes, cfg, rng)
        accs.append(_head_accuracy(head, feats_test, test_set.labels))
    return EvalReport(accuracies=accs)


def finetune(encoder: Encoder, train_set: Dataset, test_set: Dataset, cfg: ProbeConfig,
             transform: TransformConfig, label_fraction: float = 1.0,
             backbone_lr_ratio: float = 0.1) -> tuple[EvalReport, Encoder]:
    """Fine-tune a copy of the encoder plus a classifier on a label subset.

    The classifier trains at cfg.lr and the backbone at
    cfg.lr * backbone_lr_ratio.  Returns the report and the tuned copy;
    the passed-in encoder is left untouched.
    """
    cfg.validate()
    if not 0.0 < label_fraction <= 1.0:
        raise ContractError(f"label fraction must be in (0,1], got {label_fraction}")
    num_classes = _check_classes(train_set, test_set)
    accs = []
    tuned = None
    for run in range(cfg.runs):
        subset_rng = np.random.default_rng((cfg.seed, run, 1))
        rng = np.random.default_rng((cfg.seed, run))
        counts = {}
        for c in range(num_classes):
            n_c = int((train_set.labels == c).sum())
            counts[c] = max(1, math.ceil(label_fraction * n_c))
        idx = stratified_indices(train_set.labels, counts, subset_rng)
        images, labels = train_set.images[idx], train_set.labels[idx]

        model = encoder.clone()
        head = Linear(128, num_classes, rng)
        opt_backbone = SGD(model.parameters(), cfg.lr * backbone_lr_ratio, cfg.momentum, cfg.weight_decay)
        opt_head = SGD(head.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)

        n = images.shape[0]
        steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
        total_steps = cfg.epochs * steps_per_epoch
        step = 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                bidx = order[start : start + cfg.batch_size]
                views = center_view(images[bidx], transform)
                lr = _schedule_lr(cfg, epoch, step, total_steps)
                opt_backbone.lr = lr * backbone_lr_ratio
                opt_head.lr = lr
                with GradTape() as tape:
                    h = model.features(Tensor(views), BNMode.CLEAN, training=True)
                    logits = head(h)
                    loss = -tmean(take_per_row(log_softmax(logits, axis=1), labels[bidx]))
                    tape.backward(loss)
                opt_backbone.step()
                opt_head.step()
                opt_backbone.zero_grad()
                opt_head.zero_grad()
                step += 1

        feats_test = extract_features(model, test_set.images, transform)
        accs.append(_head_accuracy(head, feats_test, test_set.labels))
        tuned = model
    return EvalReport(accuracies=accs), tuned
