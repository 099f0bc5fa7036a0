"""Prototype-based trainer: epochs alternate between predicting frozen
cluster assignments (with optional adversarial and cut-mixed crops) and
refreshing the assignments by spherical k-means over latents collected
from the clean crops.

Assignments are per image and shared across all crops of that image;
prototypes only change at epoch boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import AdvConfig, CutMixConfig, TransformConfig, center_view, cutmix, pgd_attack, transform_batch
from .errors import ContractError
from .losses import LossWeights, combine_losses, mixed_cross_entropy, prototype_log_probs, prototype_loss_per_example
from .moco import Scheme
from .nn import SGD, BNMode, Encoder
from .rng import RngPool
from .tensor import GradTape, Tensor, no_grad, tmean, unit_rows


# --------------------------------------------------------------------------
# spherical k-means
# --------------------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray  # (K,d) unit rows
    assignments: np.ndarray  # (N,) int
    objective: float  # sum of cosine similarities to assigned centroid
    history: list[float]  # objective after each assignment step


def _plus_plus_init(latents: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = latents.shape[0]
    chosen = [int(rng.integers(0, n))]
    best_sim = latents @ latents[chosen[0]]
    while len(chosen) < k:
        gap = np.maximum(0.0, 1.0 - best_sim) ** 2
        total = gap.sum()
        if total <= 1e-12:
            remaining = np.setdiff1d(np.arange(n), np.asarray(chosen))
            chosen.append(int(rng.choice(remaining)))
        else:
            chosen.append(int(rng.choice(n, p=gap / total)))
        best_sim = np.maximum(best_sim, latents @ latents[chosen[-1]])
    return latents[chosen].copy()


def _solve_once(latents: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> KMeansResult:
    n, d = latents.shape
    centroids = _plus_plus_init(latents, k, rng)
    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(iters):
        sims = latents @ centroids.T
        new_assign = sims.argmax(axis=1)
        history.append(float(sims[np.arange(n), new_assign].sum(dtype=np.float64)))
        if (new_assign == assignments).all():
            assignments = new_assign
            break
        assignments = new_assign
        sums = np.zeros((k, d), dtype=np.float64)
        np.add.at(sums, assignments, latents.astype(np.float64))
        counts = np.bincount(assignments, minlength=k)
        own_sim = sims[np.arange(n), assignments]
        taken: list[int] = []
        for j in np.flatnonzero(counts == 0):
            # re-seed an empty cluster from the point farthest from its centroid
            order = np.argsort(own_sim)
            pick = next(int(i) for i in order if int(i) not in taken)
            taken.append(pick)
            sums[j] = latents[pick].astype(np.float64)
            counts[j] = 1
        centroids = unit_rows(sums / counts[:, None])
    sims = latents @ centroids.T
    assignments = sims.argmax(axis=1)
    objective = float(sims[np.arange(n), assignments].sum(dtype=np.float64))
    history.append(objective)
    return KMeansResult(centroids, assignments, objective, history)


def spherical_kmeans(
    latents: np.ndarray, k: int, iters: int, rng: np.random.Generator, restarts: int = 3
) -> KMeansResult:
    """Cosine k-means on unit-norm rows. Best of ``restarts`` runs."""
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 2:
        raise ContractError(f"latents must be 2-d, got shape {latents.shape}")
    n = latents.shape[0]
    if k < 1:
        raise ContractError(f"cluster count must be >= 1, got {k}")
    if n < k:
        raise ContractError(f"need at least k={k} points, got {n}")
    if iters < 1:
        raise ContractError(f"iters must be >= 1, got {iters}")
    best: KMeansResult | None = None
    for _ in range(max(1, restarts)):
        result = _solve_once(latents, k, iters, rng)
        if best is None or result.objective > best.objective:
            best = result
    return best


# --------------------------------------------------------------------------
# engine state
# --------------------------------------------------------------------------

@dataclass
class PrototypeBank:
    centroids: np.ndarray  # (K,d) unit rows
    assignments: np.ndarray  # (N,) per-image cluster index
    k: int


@dataclass
class EpochReport:
    loss_std: float
    loss_adv: float | None
    loss_cmx: float | None
    loss_total: float
    kmeans_objective: float
    churn: float  # fraction of images whose assignment changed
    steps: int


@dataclass
class DClusterState:
    encoder: Encoder
    optimizer: SGD
    bank: PrototypeBank | None
    transform: TransformConfig
    crop_spec: list[tuple[int, int]] = field(default_factory=lambda: [(2, 32)])
    adv: AdvConfig = field(default_factory=AdvConfig)
    cutmix_cfg: CutMixConfig = field(default_factory=CutMixConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    scheme: Scheme = field(default_factory=Scheme)
    temperature: float = 0.2
    k: int = 30
    kmeans_iters: int = 10
    kmeans_restarts: int = 3


def collect_eval_latents(encoder: Encoder, images: np.ndarray, transform: TransformConfig,
                         out_size: int, batch_size: int = 256) -> np.ndarray:
    """Deterministic latents from center views, evaluation-mode forward."""
    cfg = transform.with_size(out_size)
    rows = []
    for start in range(0, images.shape[0], batch_size):
        views = center_view(images[start : start + batch_size], cfg)
        with no_grad():
            z = encoder.encode(Tensor(views), BNMode.CLEAN, training=False)
        rows.append(z.data.copy())
    return np.concatenate(rows, axis=0)


def init_prototype_bank(state: DClusterState, images: np.ndarray, rng: RngPool) -> None:
    """First assignments: k-means over latents of the untrained encoder."""
    out_size = max(res for _, res in state.crop_spec)
    latents = collect_eval_latents(state.encoder, images, state.transform, out_size)
    result = spherical_kmeans(latents, state.k, state.kmeans_iters, rng.stream("kmeans"), state.kmeans_restarts)
    state.bank = PrototypeBank(result.centroids, result.assignments, state.k)


def _prototype_term(state: DClusterState, views: np.ndarray, assignments: np.ndarray,
                    mode: BNMode) -> tuple[Tensor, Tensor]:
    """Mean prototype cross-entropy for one crop stack; also returns latents."""
    z = state.encoder.encode(Tensor(views), mode, training=True)
    per_ex = prototype_loss_per_example(z, state.bank.centroids, assignments, state.temperature)
    return tmean(per_ex), z


def dcluster_epoch(state: DClusterState, images: np.ndarray, rng: RngPool,
                   batch_size: int = 128) -> EpochReport:
    """One alternation: train on frozen assignments, then refresh them."""
    if state.bank is None:
        raise ContractError("prototype bank not initialised; call init_prototype_bank first")
    n = images.shape[0]
    if state.bank.assignments.shape[0] != n:
        raise ContractError(
            f"assignment table covers {state.bank.assignments.shape[0]} images, dataset has {n}"
        )
    state.scheme.validate()
    use_adv = state.scheme.adv and state.weights.alpha_adv > 0
    use_cmx = state.scheme.cmx and state.weights.alpha_cutmix > 0
    use_cmx_adv = state.scheme.cmx_on_adv and state.weights.alpha_cutmix > 0

    order = rng.stream("order").permutation(n)
    total_crops = sum(count for count, _ in state.crop_spec)
    latent_sum = np.zeros((n, state.bank.centroids.shape[1]), dtype=np.float64)

    sums = {"std": 0.0, "adv": 0.0, "cmx": 0.0, "total": 0.0}
    seen = {"adv": False, "cmx": False}
    steps = 0

    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        b = idx.shape[0]
        batch = images[idx]
        y = state.bank.assignments[idx]

        # crop stacks per resolution group: (count*b, C, res, res) each
        stacks = []
        t_rng = rng.stream("transforms")
        for count, res in state.crop_spec:
            cfg = state.transform.with_size(res)
            views = np.concatenate([transform_batch(batch, cfg, t_rng) for _ in range(count)], axis=0)
            stacks.append((views, np.tile(y, count), count))

        adv_stacks = None
        if use_adv or use_cmx_adv:
            adv_stacks = []
            for views, y_tiled, count in stacks:
                def gen_loss(v, _y=y_tiled):
                    z = state.encoder.encode(v, BNMode.ADVERSARIAL, training=True)
                    return tmean(prototype_loss_per_example(z, state.bank.centroids, _y, state.temperature))

                adv_stacks.append(pgd_attack(gen_loss, views, state.adv))

        batch_cmx = (use_cmx or use_cmx_adv) and b >= 2
        perm = rng.stream("cutmix").permutation(b) if batch_cmx else None

        with GradTape() as tape:
            weight_of = [count * b for _, _, count in stacks]
            total_rows = sum(weight_of)

            loss_std = None
            for (views, y_tiled, count), w in zip(stacks, weight_of):
                term, z = _prototype_term(state, views, y_tiled, BNMode.CLEAN)
                term = term * (w / total_rows)
                loss_std = term if loss_std is None else loss_std + term
                # collected clean latents feed the epoch-end clustering
                z_rows = z.data.reshape(count, b, -1)
                latent_sum[idx] += z_rows.sum(axis=0, dtype=np.float64)

            loss_adv = None
            if use_adv:
                for (views, y_tiled, count), adv_views, w in zip(stacks, adv_stacks, weight_of):
                    term, _ = _prototype_term(state, adv_views, y_tiled, BNMode.ADVERSARIAL)
                    term = term * (w / total_rows)
                    loss_adv = term if loss_adv is None else loss_adv + term

            loss_cmx = None
            if batch_cmx:
                sources = []
                if use_cmx:
                    sources.append(([v for v, _, _ in stacks], BNMode.CLEAN))
                if use_cmx_adv:
                    sources.append((adv_stacks, BNMode.ADVERSARIAL))
                cm_rng = rng.stream("cutmix")
                for view_stacks, mode in sources:
                    for (views, (_, y_tiled, count), w) in zip(view_stacks, stacks, weight_of):
                        partner = np.concatenate([c * b + perm for c in range(count)])
                        mixed, labels = cutmix(
                            views, y_tiled, views[partner], y_tiled[partner],
                            state.cutmix_cfg, cm_rng,
                        )
                        z = state.encoder.encode(Tensor(mixed), mode, training=True)
                        log_probs = prototype_log_probs(z, state.bank.centroids, state.temperature)
                        term = mixed_cross_entropy(log_probs, labels.label_a, labels.label_b, labels.lam)
                        term = term * (w / total_rows)
                        loss_cmx = term if loss_cmx is None else loss_cmx + term

            effective = LossWeights(
                alpha_adv=state.weights.alpha_adv if use_adv else 0.0,
                alpha_cutmix=state.weights.alpha_cutmix if loss_cmx is not None else 0.0,
            )
            total = combine_losses(loss_std, loss_adv, loss_cmx, effective)
            tape.backward(total)

        state.optimizer.step()
        state.optimizer.zero_grad()

        steps += 1
        sums["std"] += loss_std.item()
        sums["total"] += total.item()
        if loss_adv is not None:
            sums["adv"] += loss_adv.item()
            seen["adv"] = True
        if loss_cmx is not None:
            sums["cmx"] += loss_cmx.item()
            seen["cmx"] = True

    # epoch boundary: refresh prototypes and per-image assignments
    table = unit_rows(latent_sum / total_crops)
    result = spherical_kmeans(table, state.k, state.kmeans_iters, rng.stream("kmeans"), state.kmeans_restarts)
    churn = float((result.assignments != state.bank.assignments).mean())
    state.bank = PrototypeBank(result.centroids, result.assignments, state.k)

    return EpochReport(
        loss_std=sums["std"] / steps,
        loss_adv=sums["adv"] / steps if seen["adv"] else None,
        loss_cmx=sums["cmx"] / steps if seen["cmx"] else None,
        loss_total=sums["total"] / steps,
        kmeans_objective=result.objective,
        churn=churn,
        steps=steps,
    )
