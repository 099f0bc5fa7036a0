"""Run orchestration: pre-training loops for both pretext tasks,
checkpoint pack/restore, evaluation entry points, the six-scheme
ablation grid, and the two hyper-parameter sweeps.

A run directory receives: config.txt (the effective config echo),
metrics.csv (fixed schema), probes.csv (quick per-epoch probe used for
best-checkpoint tracking), last.ckpt / best.ckpt, and loss_curves.png.

Grids and sweeps run schemes sequentially by default; with workers > 1
each cell pre-trains in its own subprocess (pinned to one BLAS thread,
which is faster than shared threading at these tensor sizes).
"""

from __future__ import annotations

import os
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .cluster import DClusterState, dcluster_epoch, init_prototype_bank
from .config import RunConfig, config_from_text
from .data import Dataset, load_dataset
from .errors import ConfigError
from .evaluate import EvalReport, ProbeConfig, finetune, linear_probe, low_shot_probe
from .metrics import MetricsWriter
from .moco import MocoState, NegativeQueue, Scheme, moco_step
from .nn import SGD, Encoder, cosine_lr
from .plots import plot_cell_bars, plot_scheme_comparison, plot_sweep_heatmap, plot_training_curves
from .rng import RngPool

GRID_SCHEMES = [
    "std",
    "std+adv",
    "std+cmx",
    "std+adv+cmx",
    "std+adv+cmxa",
    "std+adv+cmx+cmxa",
]

QUICK_PROBE_IMAGES = 2000
QUICK_PROBE_EPOCHS = 8


# --------------------------------------------------------------------------
# state construction and checkpoint packing
# --------------------------------------------------------------------------

def build_state(config: RunConfig, rng: RngPool):
    init_rng = rng.stream("init")
    encoder = Encoder(in_channels=3, rng=init_rng)
    optimizer = SGD(encoder.parameters(), config.lr, config.sgd_momentum, config.weight_decay)
    if config.pretext == "moco":
        key_encoder = encoder.clone()
        out_size = config.crop_list()[0][1]
        return MocoState(
            query_encoder=encoder,
            key_encoder=key_encoder,
            queue=NegativeQueue(config.queue_capacity, 64),
            optimizer=optimizer,
            transform=config.transform_config(out_size),
            adv=config.adv_config(),
            cutmix_cfg=config.cutmix_config(),
            weights=config.loss_weights(),
            scheme=config.scheme_flags(),
            beta=config.momentum_beta,
            temperature=config.tau,
            negatives=config.negatives,
        )
    return DClusterState(
        encoder=encoder,
        optimizer=optimizer,
        bank=None,
        transform=config.transform_config(),
        crop_spec=config.crop_list(),
        adv=config.adv_config(),
        cutmix_cfg=config.cutmix_config(),
        weights=config.loss_weights(),
        scheme=config.scheme_flags(),
        temperature=config.tau,
        k=config.num_clusters,
        kmeans_iters=config.kmeans_iters,
        kmeans_restarts=config.kmeans_restarts,
    )


def _pack_tensors(state, step: int) -> tuple[dict[str, np.ndarray], dict]:
    tensors: dict[str, np.ndarray] = {}
    extra: dict = {"step": step}
    if isinstance(state, MocoState):
        for name, p in state.query_encoder.named_parameters().items():
            tensors[f"query/{name}"] = p.data
        for name, arr in state.query_encoder.named_stats().items():
            tensors[f"query_stats/{name}"] = arr
        for name, p in state.key_encoder.named_parameters().items():
            tensors[f"key/{name}"] = p.data
        for name, arr in state.key_encoder.named_stats().items():
            tensors[f"key_stats/{name}"] = arr
        tensors["queue/buffer"] = state.queue.buffer
        extra["queue_head"] = state.queue.head
        extra["queue_size"] = state.queue.size
        opt = state.optimizer
    else:
        for name, p in state.encoder.named_parameters().items():
            tensors[f"enc/{name}"] = p.data
        for name, arr in state.encoder.named_stats().items():
            tensors[f"enc_stats/{name}"] = arr
        if state.bank is not None:
            tensors["bank/centroids"] = state.bank.centroids
            tensors["bank/assignments"] = state.bank.assignments.astype(np.float32)
        opt = state.optimizer
    for i, v in enumerate(opt.velocity):
        tensors[f"opt/v{i:02d}"] = v
    return tensors, extra


def _restore_state(state, ckpt: Checkpoint) -> int:
    t = ckpt.tensors
    if isinstance(state, MocoState):
        for name, p in state.query_encoder.named_parameters().items():
            p.data[...] = t[f"query/{name}"]
        for name, arr in state.query_encoder.named_stats().items():
            arr[...] = t[f"query_stats/{name}"]
        for name, p in state.key_encoder.named_parameters().items():
            p.data[...] = t[f"key/{name}"]
        for name, arr in state.key_encoder.named_stats().items():
            arr[...] = t[f"key_stats/{name}"]
        state.queue.buffer[...] = t["queue/buffer"]
        state.queue.head = int(ckpt.extra["queue_head"])
        state.queue.size = int(ckpt.extra["queue_size"])
        opt = state.optimizer
    else:
        for name, p in state.encoder.named_parameters().items():
            p.data[...] = t[f"enc/{name}"]
        for name, arr in state.encoder.named_stats().items():
            arr[...] = t[f"enc_stats/{name}"]
        if "bank/centroids" in t:
            from .cluster import PrototypeBank

            assignments = t["bank/assignments"].astype(np.int64)
            state.bank = PrototypeBank(t["bank/centroids"], assignments, t["bank/centroids"].shape[0])
        opt = state.optimizer
    for i, v in enumerate(opt.velocity):
        v[...] = t[f"opt/v{i:02d}"]
    return int(ckpt.extra["step"])


def encoder_from_checkpoint(ckpt: Checkpoint) -> tuple[Encoder, RunConfig]:
    """Rebuild the query/backbone encoder held in a checkpoint."""
    config = config_from_text(ckpt.config_text)
    encoder = Encoder(in_channels=3, rng=np.random.default_rng(0))
    prefix = "query" if config.pretext == "moco" else "enc"
    for name, p in encoder.named_parameters().items():
        p.data[...] = ckpt.tensors[f"{prefix}/{name}"]
    for name, arr in encoder.named_stats().items():
        arr[...] = ckpt.tensors[f"{prefix}_stats/{name}"]
    return encoder, config


# --------------------------------------------------------------------------
# pre-training
# --------------------------------------------------------------------------

@dataclass
class PretrainResult:
    run_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path
    probe_log: list[tuple[int, float]]


def _quick_probe(encoder: Encoder, train_set: Dataset, test_set: Dataset, config: RunConfig) -> float:
    cfg = ProbeConfig(
        epochs=QUICK_PROBE_EPOCHS,
        lr=config.probe_lr,
        batch_size=config.probe_batch_size,
        runs=1,
        seed=config.seed,
    )
    subset = train_set
    if len(train_set) > QUICK_PROBE_IMAGES:
        subset = Dataset(train_set.images[:QUICK_PROBE_IMAGES], train_set.labels[:QUICK_PROBE_IMAGES])
    transform = config.transform_config(config.crop_list()[0][1])
    return linear_probe(encoder, subset, test_set, cfg, transform).mean


def run_pretrain(config: RunConfig, resume_from=None, quiet: bool = False) -> PretrainResult:
    """Pre-train per config, writing metrics, checkpoints, and figures."""
    config.validate()
    if not config.train_data or not config.test_data:
        raise ConfigError("train_data and test_data paths are required for pretraining")
    train_set = load_dataset(config.train_data)
    test_set = load_dataset(config.test_data)

    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")

    rng = RngPool(config.seed)
    state = build_state(config, rng)
    scheme_name = config.scheme_flags().name

    start_epoch = 0
    step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        step = _restore_state(state, ckpt)
        rng.restore(ckpt.rng_state)
        start_epoch = ckpt.epoch + 1
    elif config.pretext == "dcluster":
        init_prototype_bank(state, train_set.images, rng)

    metrics_path = run_dir / "metrics.csv"
    writer = MetricsWriter(metrics_path, append=resume_from is not None)

    n = len(train_set)
    batches_per_epoch = max(1, n // config.batch_size) if config.pretext == "moco" else None
    total_steps = (
        config.epochs * batches_per_epoch
        if config.pretext == "moco"
        else config.epochs * max(1, -(-n // config.batch_size))
    )

    probe_log: list[tuple[int, float]] = []
    probes_path = run_dir / "probes.csv"
    if resume_from is None or not probes_path.exists():
        probes_path.write_text("epoch,probe_top1\n", encoding="utf-8")
    best_acc = -1.0
    best_path = run_dir / "best.ckpt"
    last_path = run_dir / "last.ckpt"

    for epoch in range(start_epoch, config.epochs):
        tic = time.perf_counter()
        if config.pretext == "moco":
            order = rng.stream("order").permutation(n)
            sums = {"std": 0.0, "adv": 0.0, "cmx": 0.0, "total": 0.0}
            seen = {"adv": False, "cmx": False}
            steps_done = 0
            # drop the trailing partial batch: keeps queue growth uniform
            for b_idx in range(batches_per_epoch):
                idx = order[b_idx * config.batch_size : (b_idx + 1) * config.batch_size]
                state.optimizer.lr = cosine_lr(config.lr, step, total_steps)
                report = moco_step(state, train_set.images[idx], rng)
                step += 1
                steps_done += 1
                sums["std"] += report.loss_std
                sums["total"] += report.loss_total
                if report.loss_adv is not None:
                    sums["adv"] += report.loss_adv
                    seen["adv"] = True
                cmx_parts = [v for v in (report.loss_cmx, report.loss_cmx_adv) if v is not None]
                if cmx_parts:
                    sums["cmx"] += sum(cmx_parts)
                    seen["cmx"] = True
            row = dict(
                loss_std=sums["std"] / steps_done,
                loss_adv=sums["adv"] / steps_done if seen["adv"] else None,
                loss_cmx=sums["cmx"] / steps_done if seen["cmx"] else None,
                loss_total=sums["total"] / steps_done,
                kmeans_objective=None,
                queue_size=len(state.queue),
            )
            encoder = state.query_encoder
        else:
            state.optimizer.lr = cosine_lr(config.lr, step, total_steps)
            report = dcluster_epoch(state, train_set.images, rng, config.batch_size)
            step += report.steps
            row = dict(
                loss_std=report.loss_std,
                loss_adv=report.loss_adv,
                loss_cmx=report.loss_cmx,
                loss_total=report.loss_total,
                kmeans_objective=report.kmeans_objective,
                queue_size=None,
            )
            encoder = state.encoder

        wall = time.perf_counter() - tic
        writer.write_epoch(epoch, scheme_name, wall_time_s=wall, **row)

        tensors, extra = _pack_tensors(state, step)
        save_checkpoint(last_path, config.to_text(), epoch, tensors, rng.state(), extra)

        acc = _quick_probe(encoder, train_set, test_set, config)
        probe_log.append((epoch, acc))
        with open(probes_path, "a", encoding="utf-8") as f:
            f.write(f"{epoch},{acc:.6f}\n")
        if acc > best_acc:
            best_acc = acc
            save_checkpoint(best_path, config.to_text(), epoch, tensors, rng.state(), extra)
        if not quiet:
            print(f"[{scheme_name}] epoch {epoch}: total={row['loss_total']:.4f} "
                  f"probe={acc:.4f} ({wall:.1f}s)")

    if config.epochs > 0:
        plot_training_curves(metrics_path, run_dir / "loss_curves.png")
    return PretrainResult(run_dir, last_path, best_path, probe_log)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def run_eval(config: RunConfig, checkpoint_path, protocol: str = "linear") -> EvalReport:
    """Evaluate a checkpoint: linear | lowshot | finetune."""
    ckpt = load_checkpoint(checkpoint_path)
    encoder, train_config = encoder_from_checkpoint(ckpt)
    transform = train_config.transform_config(train_config.crop_list()[0][1])
    train_set = load_dataset(config.train_data or train_config.train_data)
    test_set = load_dataset(config.test_data or train_config.test_data)
    probe_cfg = ProbeConfig(
        epochs=config.probe_epochs,
        lr=config.probe_lr,
        schedule=config.probe_schedule,
        milestones=config.probe_milestone_list(),
        decay=config.probe_decay,
        batch_size=config.probe_batch_size,
        runs=config.probe_runs,
        seed=config.seed,
    )
    if protocol == "linear":
        report = linear_probe(encoder, train_set, test_set, probe_cfg, transform)
    elif protocol == "lowshot":
        report = low_shot_probe(encoder, train_set, test_set, config.low_shot_k, probe_cfg, transform)
    elif protocol == "finetune":
        probe_cfg.epochs = config.finetune_epochs
        report, _ = finetune(encoder, train_set, test_set, probe_cfg, transform,
                             label_fraction=config.label_fraction)
    else:
        raise ConfigError(f"unknown evaluation protocol {protocol!r}")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval.csv", "a", encoding="utf-8") as f:
        accs = ";".join(f"{a:.6f}" for a in report.accuracies)
        f.write(f"{protocol},{report.mean:.6f},{report.std:.6f},{accs}\n")
    return report


def _probe_last(result: PretrainResult, config: RunConfig) -> list[float]:
    ckpt = load_checkpoint(result.last_checkpoint)
    encoder, train_config = encoder_from_checkpoint(ckpt)
    transform = train_config.transform_config(train_config.crop_list()[0][1])
    train_set = load_dataset(config.train_data)
    test_set = load_dataset(config.test_data)
    probe_cfg = ProbeConfig(
        epochs=config.probe_epochs,
        lr=config.probe_lr,
        batch_size=config.probe_batch_size,
        runs=config.probe_runs,
        seed=config.seed,
    )
    return linear_probe(encoder, train_set, test_set, probe_cfg, transform).accuracies


# --------------------------------------------------------------------------
# ablation grid and sweeps
# --------------------------------------------------------------------------

def run_many(configs: list[RunConfig], workers: int = 1, quiet: bool = False) -> list[PretrainResult]:
    """Pre-train several configs, optionally across worker subprocesses.

    Each subprocess runs the CLI with one BLAS thread; results are read
    back from the run directories.  Sequential execution stays in-process.
    """
    if workers <= 1:
        return [run_pretrain(cfg, quiet=quiet) for cfg in configs]
    env = dict(os.environ)
    env["OPENBLAS_NUM_THREADS"] = "1"
    env.pop(  # a stale output override would redirect every worker to one dir
        "HARDVIEWS_OUT", None)
    pending = list(enumerate(configs))
    procs: list[tuple[int, subprocess.Popen]] = []
    failures: list[str] = []

    def launch(idx: int, cfg: RunConfig) -> tuple[int, subprocess.Popen]:
        run_dir = Path(cfg.out_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg_path = run_dir / "config.txt"
        cfg_path.write_text(cfg.to_text(), encoding="utf-8")
        cmd = [sys.executable, "-m", "hardviews.cli", "pretrain", "--config", str(cfg_path)]
        return idx, subprocess.Popen(cmd, env=env, stdout=subprocess.PIPE,
                                     stderr=subprocess.STDOUT, text=True)

    while pending or procs:
        while pending and len(procs) < workers:
            procs.append(launch(*pending.pop(0)))
        idx, proc = procs.pop(0)
        output, _ = proc.communicate()
        if proc.returncode != 0:
            failures.append(f"run {configs[idx].out_dir} failed:\n{output}")
        elif not quiet:
            print(f"[worker] finished {configs[idx].out_dir}")
    if failures:
        raise RuntimeError("\n".join(failures))
    return [
        PretrainResult(
            run_dir=Path(cfg.out_dir),
            last_checkpoint=Path(cfg.out_dir) / "last.ckpt",
            best_checkpoint=Path(cfg.out_dir) / "best.ckpt",
            probe_log=[],
        )
        for cfg in configs
    ]


def run_grid(config: RunConfig, quiet: bool = False, workers: int = 1) -> dict[str, list[float]]:
    """All six hard-example schemes with shared seeds; CSV + bar figure."""
    grid_dir = Path(config.out_dir)
    grid_dir.mkdir(parents=True, exist_ok=True)
    subs = [
        config.replace(scheme=scheme, out_dir=str(grid_dir / scheme.replace("+", "_")))
        for scheme in GRID_SCHEMES
    ]
    runs = run_many(subs, workers=workers, quiet=quiet)
    results: dict[str, list[float]] = {}
    for scheme, sub, result in zip(GRID_SCHEMES, subs, runs):
        results[scheme] = _probe_last(result, sub)
        if not quiet:
            print(f"[grid] {scheme}: {np.mean(results[scheme]):.4f}")
    with open(grid_dir / "grid.csv", "w", encoding="utf-8") as f:
        f.write("scheme,probe_top1_mean,probe_top1_std,runs\n")
        for scheme, accs in results.items():
            f.write(f"{scheme},{np.mean(accs):.6f},{np.std(accs):.6f},{len(accs)}\n")
    plot_scheme_comparison(results, grid_dir / "grid_schemes.png",
                           f"hard-example schemes ({config.pretext})")
    return results


def run_adv_sweep(config: RunConfig, eps_values=(1.0, 3.0), eta_values=(1.0, 3.0),
                  quiet: bool = False, workers: int = 1) -> np.ndarray:
    """Accuracy per (epsilon, eta) cell under the std+adv scheme."""
    sweep_dir = Path(config.out_dir)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    cells = [(eps, eta) for eps in eps_values for eta in eta_values]
    subs = [
        config.replace(scheme="std+adv", epsilon=eps, eta=eta,
                       out_dir=str(sweep_dir / f"eps{eps:g}_eta{eta:g}"))
        for eps, eta in cells
    ]
    runs = run_many(subs, workers=workers, quiet=quiet)
    eps_list, eta_list = list(eps_values), list(eta_values)
    grid = np.zeros((len(eps_list), len(eta_list)))
    with open(sweep_dir / "adv_sweep.csv", "w", encoding="utf-8") as f:
        f.write("epsilon,eta,probe_top1\n")
        for (eps, eta), sub, result in zip(cells, subs, runs):
            acc = float(np.mean(_probe_last(result, sub)))
            grid[eps_list.index(eps), eta_list.index(eta)] = acc
            f.write(f"{eps:g},{eta:g},{acc:.6f}\n")
            if not quiet:
                print(f"[adv-sweep] eps={eps:g} eta={eta:g}: {acc:.4f}")
    plot_sweep_heatmap(grid, list(eps_values), list(eta_values), "epsilon", "eta",
                       sweep_dir / "adv_sweep.png", "perturbation sweep")
    return grid


def run_beta_sweep(config: RunConfig, pairs=((1.0, 1.0), (2.0, 2.0), (5.0, 3.0), (3.0, 5.0)),
                   quiet: bool = False, workers: int = 1) -> dict[str, float]:
    """Accuracy per Beta(alpha,beta) cell under the std+cmx scheme."""
    sweep_dir = Path(config.out_dir)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    subs = [
        config.replace(scheme="std+cmx", beta_alpha=alpha, beta_beta=beta,
                       out_dir=str(sweep_dir / f"beta{alpha:g}_{beta:g}"))
        for alpha, beta in pairs
    ]
    runs = run_many(subs, workers=workers, quiet=quiet)
    cells: dict[str, float] = {}
    with open(sweep_dir / "beta_sweep.csv", "w", encoding="utf-8") as f:
        f.write("beta_alpha,beta_beta,probe_top1\n")
        for (alpha, beta), sub, result in zip(pairs, subs, runs):
            acc = float(np.mean(_probe_last(result, sub)))
            cells[f"B({alpha:g},{beta:g})"] = acc
            f.write(f"{alpha:g},{beta:g},{acc:.6f}\n")
            if not quiet:
                print(f"[beta-sweep] B({alpha:g},{beta:g}): {acc:.4f}")
    plot_cell_bars(cells, sweep_dir / "beta_sweep.png", "mixing distribution",
                   "cutmix Beta sweep")
    return cells
