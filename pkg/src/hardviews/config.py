"""Run configuration: a flat key=value file, one key per dataclass field.

Unknown keys are rejected so typos in experiment grids fail loudly.
Precedence: built-in defaults < config file < HARDVIEWS_OUT env var
(output directory only) < explicit CLI flags.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AdvConfig, CutMixConfig, TransformConfig
from .errors import ConfigError
from .losses import LossWeights
from .moco import Scheme

OUTPUT_ENV_VAR = "HARDVIEWS_OUT"


@dataclass
class RunConfig:
    # pretext task and objective
    pretext: str = "moco"  # moco | dcluster
    scheme: str = "std"  # e.g. std+adv+cmx, terms: std, adv, cmx, cmxa
    alpha_adv: float = 1.0
    alpha_cutmix: float = 1.0
    tau: float = 0.2

    # contrastive trainer
    queue_capacity: int = 4096
    negatives: str = "queue"  # queue | batch
    momentum_beta: float = 0.99

    # clustering trainer
    num_clusters: int = 30
    kmeans_iters: int = 10
    kmeans_restarts: int = 3
    crop_spec: str = "2x32"  # e.g. "2x24,4x16" -> 2 crops at 24px + 4 at 16px

    # adversarial views
    epsilon: float = 1.0
    eta: float = 1.0
    pgd_steps: int = 1
    adv_norm: str = "linf"  # linf | l2
    adv_clamp_pixels: bool = False

    # cutmix views
    beta_alpha: float = 5.0
    beta_beta: float = 3.0

    # random transforms
    crop_scale_min: float = 0.4
    crop_scale_max: float = 1.0
    flip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    grayscale_p: float = 0.2
    noise_sigma: float = 0.02
    norm_mean: float = 0.5
    norm_std: float = 0.25

    # optimisation
    lr: float = 0.06
    weight_decay: float = 5e-4
    sgd_momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0

    # evaluation protocols
    probe_epochs: int = 30
    probe_lr: float = 0.3
    probe_schedule: str = "cosine"  # cosine | step
    probe_milestones: str = "18,24"
    probe_decay: float = 0.1
    probe_batch_size: int = 128
    probe_runs: int = 1
    low_shot_k: int = 8
    label_fraction: float = 1.0
    finetune_epochs: int = 10

    # io
    train_data: str = ""
    test_data: str = ""
    out_dir: str = "runs/default"

    # ------------------------------------------------------------------

    def validate(self) -> None:
        try:
            if self.pretext not in ("moco", "dcluster"):
                raise ConfigError(f"pretext must be moco or dcluster, got {self.pretext!r}")
            if self.negatives not in ("queue", "batch"):
                raise ConfigError(f"negatives must be queue or batch, got {self.negatives!r}")
            self.scheme_flags()
            self.crop_list()
            self.probe_milestone_list()
            if self.tau <= 0:
                raise ConfigError(f"tau must be > 0, got {self.tau}")
            if not 0.0 <= self.momentum_beta <= 1.0:
                raise ConfigError(f"momentum_beta must be in [0,1], got {self.momentum_beta}")
            if self.queue_capacity < 1:
                raise ConfigError(f"queue_capacity must be >= 1, got {self.queue_capacity}")
            if self.num_clusters < 1:
                raise ConfigError(f"num_clusters must be >= 1, got {self.num_clusters}")
            if self.batch_size < 1:
                raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
            if self.epochs < 0:
                raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
            self.transform_config().validate()
            self.adv_config().validate()
            self.cutmix_config().validate()
            self.loss_weights().validate()
        except ConfigError:
            raise
        except Exception as exc:  # contract errors from sub-config validation
            raise ConfigError(str(exc)) from exc

    # -- structured views ------------------------------------------------

    def scheme_flags(self) -> Scheme:
        try:
            return Scheme.from_name(self.scheme)
        except Exception as exc:
            raise ConfigError(str(exc)) from exc

    def crop_list(self) -> list[tuple[int, int]]:
        crops = []
        for part in self.crop_spec.split(","):
            part = part.strip()
            if not part:
                continue
            try:
                count, res = part.split("x")
                crops.append((int(count), int(res)))
            except ValueError as exc:
                raise ConfigError(f"bad crop spec entry {part!r}, expected COUNTxRES") from exc
        if not crops or any(c < 1 or r < 1 for c, r in crops):
            raise ConfigError(f"crop_spec must list positive COUNTxRES pairs, got {self.crop_spec!r}")
        return crops

    def probe_milestone_list(self) -> list[int]:
        if not self.probe_milestones.strip():
            return []
        try:
            return [int(p) for p in self.probe_milestones.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad probe_milestones {self.probe_milestones!r}") from exc

    def transform_config(self, out_size: int | None = None) -> TransformConfig:
        return TransformConfig(
            crop_scale=(self.crop_scale_min, self.crop_scale_max),
            out_size=out_size if out_size is not None else self.crop_list()[0][1],
            flip_p=self.flip_p,
            brightness=self.brightness,
            contrast=self.contrast,
            grayscale_p=self.grayscale_p,
            noise_sigma=self.noise_sigma,
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
        )

    def adv_config(self) -> AdvConfig:
        cfg = AdvConfig(
            epsilon=self.epsilon,
            eta=self.eta,
            pgd_steps=self.pgd_steps,
            norm=self.adv_norm,
        )
        if self.adv_clamp_pixels:
            cfg.clamp_bounds = self.transform_config().view_bounds()
        return cfg

    def cutmix_config(self) -> CutMixConfig:
        return CutMixConfig(beta_alpha=self.beta_alpha, beta_beta=self.beta_beta)

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha_adv=self.alpha_adv, alpha_cutmix=self.alpha_cutmix)

    # -- serialisation -----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}={getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    raw = raw.strip()
    if typ == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {typ}, got {raw!r}") from exc
    return raw


def apply_overrides(config: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply raw key=value overrides (CLI flags) onto a config."""
    values = {}
    for key, raw in overrides.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, str(raw))
    return config.replace(**values)


def _parse_text(text: str, source: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = raw
    return values


def config_from_text(text: str, source: str = "<config>") -> RunConfig:
    config = apply_overrides(RunConfig(), _parse_text(text, source))
    config.validate()
    return config


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then a key=value file, then env var, then explicit overrides."""
    config = RunConfig()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        config = apply_overrides(config, _parse_text(text, str(path)))
    env_out = os.environ.get(OUTPUT_ENV_VAR)
    if env_out:
        config = config.replace(out_dir=env_out)
    if overrides:
        config = apply_overrides(config, overrides)
    config.validate()
    return config
