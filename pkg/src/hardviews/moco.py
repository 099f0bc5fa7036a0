"""Queue-based contrastive trainer with a momentum key encoder.

One step runs: clean query/key views -> key forward (no gradients) ->
optional adversarial query synthesis against the standard contrastive
loss -> optional cut-mixed queries (keys stay untouched) -> one update
pass over the enabled query streams -> momentum update of the key
encoder -> enqueue of the new keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import AdvConfig, CutMixConfig, TransformConfig, cutmix, pgd_attack, transform_batch
from .errors import ContractError, ShapeError
from .losses import (
    ContrastiveBatch,
    LossWeights,
    combine_losses,
    info_nce_reduced,
    mixed_cross_entropy,
)
from .nn import SGD, BNMode, Encoder, momentum_update
from .rng import RngPool
from .tensor import GradTape, Tensor, concat_cols, log_softmax, matmul, mul, no_grad, tsum


class NegativeQueue:
    """Fixed-capacity FIFO ring of detached key embeddings."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ContractError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim), dtype=np.float32)
        self.head = 0  # next write position
        self.size = 0

    def enqueue(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys, dtype=np.float32)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ShapeError("queue_enqueue", keys.shape, (self.capacity, self.dim))
        b = keys.shape[0]
        if b > self.capacity:
            raise ContractError(f"cannot enqueue {b} rows into capacity {self.capacity}")
        first = min(b, self.capacity - self.head)
        self.buffer[self.head : self.head + first] = keys[:first]
        if first < b:
            self.buffer[: b - first] = keys[first:]
        self.head = (self.head + b) % self.capacity
        self.size = min(self.size + b, self.capacity)

    def snapshot(self) -> np.ndarray:
        """Stored keys, oldest first; a copy, never aliasing the ring."""
        if self.size < self.capacity:
            return self.buffer[: self.size].copy()
        return np.concatenate([self.buffer[self.head :], self.buffer[: self.head]], axis=0)

    def __len__(self) -> int:
        return self.size


@dataclass
class Scheme:
    """Which hard-example streams participate in the objective."""

    adv: bool = False
    cmx: bool = False
    cmx_on_adv: bool = False  # cutmix computed on adversarial views

    @staticmethod
    def from_name(name: str) -> "Scheme":
        parts = [p for p in name.lower().replace(" ", "").split("+") if p]
        if not parts or parts[0] != "std":
            raise ContractError(f"scheme must start with 'std', got {name!r}")
        known = {"std", "adv", "cmx", "cmxa"}
        extra = set(parts) - known
        if extra:
            raise ContractError(f"unknown scheme terms {sorted(extra)} in {name!r}")
        return Scheme(adv="adv" in parts, cmx="cmx" in parts, cmx_on_adv="cmxa" in parts)

    @property
    def name(self) -> str:
        parts = ["std"]
        if self.adv:
            parts.append("adv")
        if self.cmx:
            parts.append("cmx")
        if self.cmx_on_adv:
            parts.append("cmxa")
        return "+".join(parts)

    def validate(self) -> None:
        if self.cmx_on_adv and not self.adv:
            raise ContractError("cutmix-on-adversarial requires the adversarial stream")


@dataclass
class StepReport:
    loss_std: float
    loss_adv: float | None
    loss_cmx: float | None
    loss_cmx_adv: float | None
    loss_total: float
    queue_size: int


@dataclass
class MocoState:
    query_encoder: Encoder
    key_encoder: Encoder
    queue: NegativeQueue
    optimizer: SGD
    transform: TransformConfig
    adv: AdvConfig = field(default_factory=AdvConfig)
    cutmix_cfg: CutMixConfig = field(default_factory=CutMixConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    scheme: Scheme = field(default_factory=Scheme)
    beta: float = 0.99
    temperature: float = 0.2
    negatives: str = "queue"  # queue | batch


def _contrastive_loss(state: MocoState, views: Tensor | np.ndarray, keys: np.ndarray,
                      negatives: np.ndarray | None, mode: BNMode):
    x = views if isinstance(views, Tensor) else Tensor(views)
    z = state.query_encoder.encode(x, mode, training=True)
    batch = ContrastiveBatch(z, keys, negatives, state.temperature)
    return info_nce_reduced(batch)


def moco_step(state: MocoState, images: np.ndarray, rng: RngPool) -> StepReport:
    """One full training iteration over a raw image batch in [0,1]."""
    state.scheme.validate()
    b = images.shape[0]
    use_adv = state.scheme.adv and state.weights.alpha_adv > 0
    use_cmx = state.scheme.cmx and state.weights.alpha_cutmix > 0
    use_cmx_adv = state.scheme.cmx_on_adv and state.weights.alpha_cutmix > 0
    if (use_cmx or use_cmx_adv) and b < 2:
        raise ContractError("cutmix needs a batch of at least 2 images")

    x_query = transform_batch(images, state.transform, rng.stream("transforms"))
    x_key = transform_batch(images, state.transform, rng.stream("transforms_key"))

    with no_grad():
        z_key = state.key_encoder.encode(Tensor(x_key), BNMode.CLEAN, training=True)
    keys = z_key.data.copy()

    negatives = state.queue.snapshot() if state.negatives == "queue" else None

    x_adv = None
    if use_adv or use_cmx_adv:
        x_adv = pgd_attack(
            lambda v: _contrastive_loss(state, v, keys, negatives, BNMode.ADVERSARIAL),
            x_query,
            state.adv,
        )

    perm = None
    cutmixed = []  # (mixed views, labels, BN mode, report slot)
    if use_cmx or use_cmx_adv:
        cm_rng = rng.stream("cutmix")
        perm = cm_rng.permutation(b)
        if use_cmx:
            views, labels = cutmix(
                x_query, np.arange(b), x_query[perm], perm, state.cutmix_cfg, cm_rng
            )
            cutmixed.append((views, labels, BNMode.CLEAN, "cmx"))
        if use_cmx_adv:
            views, labels = cutmix(
                x_adv, np.arange(b), x_adv[perm], perm, state.cutmix_cfg, cm_rng
            )
            cutmixed.append((views, labels, BNMode.ADVERSARIAL, "cmx_adv"))

    report = {"cmx": None, "cmx_adv": None}
    with GradTape() as tape:
        loss_std = _contrastive_loss(state, x_query, keys, negatives, BNMode.CLEAN)
        loss_adv = None
        if use_adv:
            loss_adv = _contrastive_loss(state, x_adv, keys, negatives, BNMode.ADVERSARIAL)
        cmx_terms = []
        for views, labels, mode, slot in cutmixed:
            z = state.query_encoder.encode(Tensor(views), mode, training=True)
            term = _cutmix_contrastive_term(state, z, keys, negatives, labels, perm)
            report[slot] = term.item()
            cmx_terms.append(term)
        loss_cmx = None
        if cmx_terms:
            loss_cmx = cmx_terms[0]
            for term in cmx_terms[1:]:
                loss_cmx = loss_cmx + term
        effective = LossWeights(
            alpha_adv=state.weights.alpha_adv if use_adv else 0.0,
            alpha_cutmix=state.weights.alpha_cutmix if (use_cmx or use_cmx_adv) else 0.0,
        )
        total = combine_losses(loss_std, loss_adv, loss_cmx, effective)
        tape.backward(total)

    state.optimizer.step()
    state.optimizer.zero_grad()
    momentum_update(state.key_encoder, state.query_encoder, state.beta)
    if state.negatives == "queue":
        state.queue.enqueue(keys)

    return StepReport(
        loss_std=loss_std.item(),
        loss_adv=loss_adv.item() if loss_adv is not None else None,
        loss_cmx=report["cmx"],
        loss_cmx_adv=report["cmx_adv"],
        loss_total=total.item(),
        queue_size=len(state.queue),
    )


def _cutmix_contrastive_term(state: MocoState, z: Tensor, keys: np.ndarray,
                             negatives: np.ndarray | None, labels, perm: np.ndarray) -> Tensor:
    """Mixed InfoNCE for cut-mixed queries.

    Both mixed targets share one key set per row: the two source positives
    plus the common negatives, so the y_a and y_b terms see identical
    denominators (per-row logits: [own key, partner key, negatives...]).
    """
    b = z.shape[0]
    inv_t = 1.0 / state.temperature
    if negatives is None:
        # in-batch mode: the batch keys are the whole key set
        logits = matmul(z, Tensor(keys.T))
        idx_a = np.arange(b)
        idx_b = perm.astype(np.int64)
    else:
        l_a = tsum(mul(z, Tensor(keys)), axis=1, keepdims=True)
        l_b = tsum(mul(z, Tensor(keys[perm])), axis=1, keepdims=True)
        logits = concat_cols(l_a, l_b)
        if negatives.shape[0] > 0:
            logits = concat_cols(logits, matmul(z, Tensor(negatives.T)))
        idx_a = np.zeros(b, dtype=np.int64)
        idx_b = np.ones(b, dtype=np.int64)
    log_probs = log_softmax(mul(logits, inv_t), axis=1)
    return mixed_cross_entropy(log_probs, idx_a, idx_b, labels.lam)
