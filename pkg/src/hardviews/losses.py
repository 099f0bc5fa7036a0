"""Self-supervised losses over unit-norm latents.

Both pretext families reduce to softmax cross-entropy over scaled cosine
similarities; the pseudo-label is the positive-key index (contrastive)
or the assigned centroid index (prototype).  The mixed loss forms the
exact convex combination of two standard losses at a mixed view, and the
total training objective is std + alpha_adv * adv + alpha_cutmix * cmx.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import MixedLabels
from .errors import ConfigError, ContractError, NumericError
from .tensor import (
    Tensor,
    concat_cols,
    log_softmax,
    matmul,
    mul,
    take_per_row,
    tmean,
    tsum,
)


@dataclass
class LossWeights:
    alpha_adv: float = 1.0
    alpha_cutmix: float = 1.0

    def validate(self) -> None:
        if self.alpha_adv < 0 or self.alpha_cutmix < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class ContrastiveBatch:
    """Queries against a positive key each, plus shared negatives.

    negatives is a (N,d) snapshot of stored keys; ``None`` selects
    in-batch mode where every other row's positive serves as a negative.
    """

    queries: Tensor  # (B,d), unit rows, gradient-carrying
    positives: np.ndarray  # (B,d), unit rows, detached
    negatives: np.ndarray | None = None  # (N,d) detached, or None for in-batch
    temperature: float = 0.2

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.queries.ndim != 2 or self.positives.shape != self.queries.shape:
            raise ContractError(
                f"queries {self.queries.shape} and positives {self.positives.shape} must match"
            )


def contrastive_log_probs(batch: ContrastiveBatch) -> tuple[Tensor, np.ndarray]:
    """Row-wise log-softmax over key similarities and the positive index."""
    batch.validate()
    inv_t = 1.0 / batch.temperature
    if batch.negatives is None:
        # in-batch: all positives form the key set, row i's own key at column i
        logits = mul(matmul(batch.queries, Tensor(batch.positives.T)), inv_t)
        pos_idx = np.arange(batch.positives.shape[0])
    else:
        l_pos = tsum(mul(batch.queries, Tensor(batch.positives)), axis=1, keepdims=True)
        if batch.negatives.shape[0] > 0:
            l_neg = matmul(batch.queries, Tensor(batch.negatives.T))
            logits = mul(concat_cols(l_pos, l_neg), inv_t)
        else:
            logits = mul(l_pos, inv_t)
        pos_idx = np.zeros(batch.positives.shape[0], dtype=np.int64)
    return log_softmax(logits, axis=1), pos_idx


def info_nce_per_example(batch: ContrastiveBatch) -> Tensor:
    """Per-query InfoNCE values, shape (B,)."""
    log_probs, pos_idx = contrastive_log_probs(batch)
    return -take_per_row(log_probs, pos_idx)


def info_nce_reduced(batch: ContrastiveBatch) -> Tensor:
    """InfoNCE in its reduced form: only the positive term survives."""
    return tmean(info_nce_per_example(batch))


def info_nce_full(batch: ContrastiveBatch, y: np.ndarray) -> Tensor:
    """InfoNCE in explicit pseudo-label form: -sum_k y_k log p_k per query.

    y must be a one-hot {0,1} matrix over the key set (positive first,
    then negatives; in-batch mode uses the B keys in batch order).
    """
    log_probs, _ = contrastive_log_probs(batch)
    y = np.asarray(y)
    if y.shape != log_probs.shape:
        raise ContractError(f"pseudo-label shape {y.shape} != key-set shape {log_probs.shape}")
    binary = (y == 0) | (y == 1)
    if not binary.all() or not (y.sum(axis=1) == 1).all():
        raise ContractError("pseudo-labels must be one-hot over the key set")
    picked = tsum(mul(log_probs, Tensor(y.astype(np.float32))), axis=1)
    return -tmean(picked)


# --------------------------------------------------------------------------
# prototype losses
# --------------------------------------------------------------------------

def prototype_log_probs(latents: Tensor, prototypes: np.ndarray, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    prototypes = np.asarray(prototypes, dtype=np.float32)
    if prototypes.ndim != 2 or prototypes.shape[0] == 0:
        raise ContractError("prototype bank is empty")
    logits = mul(matmul(latents, Tensor(prototypes.T)), 1.0 / temperature)
    return log_softmax(logits, axis=1)


def prototype_loss_per_example(
    latents: Tensor, prototypes: np.ndarray, assignments: np.ndarray, temperature: float
) -> Tensor:
    log_probs = prototype_log_probs(latents, prototypes, temperature)
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.size and assignments.max() >= prototypes.shape[0]:
        raise ContractError("assignment index exceeds prototype count")
    return -take_per_row(log_probs, assignments)


def prototype_loss(
    latents: Tensor, prototypes: np.ndarray, assignments: np.ndarray, temperature: float
) -> Tensor:
    """Cross-entropy of latent-vs-centroid similarities at the assigned index."""
    return tmean(prototype_loss_per_example(latents, prototypes, assignments, temperature))


def prototype_loss_full(
    latents: Tensor, prototypes: np.ndarray, y: np.ndarray, temperature: float
) -> Tensor:
    """Pseudo-label form over all centroids; y is one-hot (B,K)."""
    log_probs = prototype_log_probs(latents, prototypes, temperature)
    y = np.asarray(y)
    if y.shape != log_probs.shape:
        raise ContractError(f"pseudo-label shape {y.shape} != logit shape {log_probs.shape}")
    picked = tsum(mul(log_probs, Tensor(y.astype(np.float32))), axis=1)
    return -tmean(picked)


# --------------------------------------------------------------------------
# mixed and combined objectives
# --------------------------------------------------------------------------

def mixed_loss(std_loss_fn, view, labels: MixedLabels) -> Tensor:
    """lam * L(view, y_a) + (1 - lam) * L(view, y_b), exactly.

    std_loss_fn(view, label_ids) may return a scalar loss or per-example
    (B,) losses; lam may correspondingly be a float or a (B,) vector, in
    which case the combination happens per row before averaging.
    """
    lam = np.asarray(labels.lam, dtype=np.float32)
    if (lam < 0).any() or (lam > 1).any():
        raise ContractError("mixing ratio must lie in [0,1]")
    loss_a = std_loss_fn(view, labels.label_a)
    loss_b = std_loss_fn(view, labels.label_b)
    if lam.ndim == 0:
        combined = mul(loss_a, float(lam)) + mul(loss_b, float(1.0 - lam))
    else:
        if loss_a.ndim != 1 or loss_a.shape[0] != lam.shape[0]:
            raise ContractError(
                f"per-row mixing needs per-example losses, got shape {loss_a.shape}"
            )
        combined = mul(loss_a, Tensor(lam)) + mul(loss_b, Tensor(1.0 - lam))
    if combined.ndim == 0:
        return combined
    return tmean(combined)


def mixed_cross_entropy(log_probs: Tensor, idx_a: np.ndarray, idx_b: np.ndarray, lam: np.ndarray) -> Tensor:
    """Row-mixed cross-entropy on shared log-probabilities (one forward pass)."""
    ce_a = -take_per_row(log_probs, idx_a)
    ce_b = -take_per_row(log_probs, idx_b)
    lam = np.asarray(lam, dtype=np.float32)
    return tmean(mul(ce_a, Tensor(lam)) + mul(ce_b, Tensor(1.0 - lam)))


def combine_losses(
    std: Tensor,
    adv: Tensor | None,
    cmx: Tensor | None,
    weights: LossWeights,
) -> Tensor:
    """Total objective std + a1*adv + a2*cmx; zero-weight terms may be None."""
    weights.validate()
    for name, term in (("std", std), ("adv", adv), ("cmx", cmx)):
        if term is not None and not np.isfinite(term.data).all():
            raise NumericError(f"non-finite {name} loss")
    total = std
    if weights.alpha_adv > 0:
        if adv is None:
            raise ContractError("adversarial weight > 0 but no adversarial loss given")
        total = total + mul(adv, weights.alpha_adv)
    if weights.alpha_cutmix > 0:
        if cmx is None:
            raise ContractError("cutmix weight > 0 but no cutmix loss given")
        total = total + mul(cmx, weights.alpha_cutmix)
    return total
