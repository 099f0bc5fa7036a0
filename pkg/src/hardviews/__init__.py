"""Desk-scale self-supervised pre-training with hard-example views:
contrastive (queue + momentum encoder) and prototype (k-means
pseudo-labels) pretext tasks, hardened with adversarial and cut-mixed
augmented views, plus linear/low-shot/fine-tune evaluation protocols.
"""

from .augment import (
    AdvConfig,
    CutMixConfig,
    MixedLabels,
    TransformConfig,
    cutmix,
    pgd_attack,
    random_transform,
    sample_cutmix_mask,
)
from .cluster import DClusterState, PrototypeBank, dcluster_epoch, init_prototype_bank, spherical_kmeans
from .config import RunConfig, load_config
from .data import Dataset, load_dataset, make_shape_dataset, write_dataset
from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    HardviewsError,
    NumericError,
    ShapeError,
)
from .evaluate import EvalReport, ProbeConfig, finetune, linear_probe, low_shot_probe
from .losses import (
    ContrastiveBatch,
    LossWeights,
    combine_losses,
    info_nce_full,
    info_nce_reduced,
    mixed_loss,
    prototype_loss,
)
from .moco import MocoState, NegativeQueue, Scheme, StepReport, moco_step
from .nn import SGD, BNMode, DualBatchNorm, Encoder, momentum_update
from .rng import RngPool
from .tensor import GradTape, Tensor, no_grad
from .train import run_adv_sweep, run_beta_sweep, run_eval, run_grid, run_pretrain

__version__ = "0.1.0"
