"""Network building blocks: conv backbone, dual-statistics batch norm,
projection head, momentum copies, and the SGD optimiser.

The encoder is a fixed small stack — four stride-2 3x3 conv blocks
(16-32-64-128 channels), each conv -> dual-BN -> relu, global average
pooling to a 128-d feature, then a two-layer MLP projection down to a
64-d latent whose rows are L2-normalised before any similarity loss.

Dual batch norm keeps two independent running-statistic sets (clean vs
adversarial) behind shared affine parameters, so perturbed batches never
contaminate the clean statistics.  Evaluation always reads the clean set.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .tensor import (
    GradTape,
    Tensor,
    _active_tape,
    _make_out,
    add_bias,
    conv2d,
    l2_normalize,
    matmul,
    relu,
    tmean,
)


class BNMode(enum.Enum):
    CLEAN = "clean"
    ADVERSARIAL = "adversarial"


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @staticmethod
    def init(channels: int) -> "RunningStats":
        return RunningStats(
            mean=np.zeros(channels, dtype=np.float32),
            var=np.ones(channels, dtype=np.float32),
        )

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


class DualBatchNorm:
    """Batch norm with per-mode running statistics and shared gamma/beta."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.stats = {mode: RunningStats.init(channels) for mode in BNMode}

    def __call__(self, x: Tensor, mode: BNMode, training: bool) -> Tensor:
        if x.ndim != 4 or x.shape[3] != self.channels:
            raise ShapeError("batch_norm", x.shape, (self.channels,))
        gamma, beta = self.gamma, self.beta
        x_data = x.data
        if training:
            mu = x_data.mean(axis=(0, 1, 2), dtype=np.float32)
            sq = np.square(x_data).mean(axis=(0, 1, 2), dtype=np.float32)
            var = np.maximum(sq - mu * mu, np.float32(0.0))
            st = self.stats[mode]
            st.mean = (self.momentum * st.mean + (1.0 - self.momentum) * mu).astype(np.float32)
            st.var = (self.momentum * st.var + (1.0 - self.momentum) * var).astype(np.float32)
        else:
            # inference always reads the clean statistics, whatever the mode
            st = self.stats[BNMode.CLEAN]
            mu, var = st.mean, st.var

        inv_std = 1.0 / np.sqrt(var + np.float32(self.eps))
        # fused affine: out = x * scale + shift, channels-last broadcasting
        scale = gamma.data * inv_std
        shift = beta.data - mu * scale
        out = x_data * scale + shift
        m = x.shape[0] * x.shape[1] * x.shape[2]

        def backward(g):
            xhat = x_data - mu
            xhat *= inv_std
            gsum = g.sum(axis=(0, 1, 2))
            gxhat_sum = (g * xhat).sum(axis=(0, 1, 2))
            if training:
                gx = g - gsum * np.float32(1.0 / m)
                xhat *= gxhat_sum * np.float32(1.0 / m)
                gx -= xhat
                gx *= scale
            else:
                gx = g * scale
            return gx.astype(np.float32, copy=False), gxhat_sum, gsum

        return _make_out(out, (x, gamma, beta), backward)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


class Conv2d:
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, rng: np.random.Generator):
        fan_in = c_in * kernel * kernel
        std = math.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(kernel, kernel, c_in, c_out)).astype(np.float32)
        self.weight = Tensor(w, requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    def parameters(self) -> list[Tensor]:
        return [self.weight]


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        std = math.sqrt(2.0 / d_in)
        self.weight = Tensor(rng.normal(0.0, std, size=(d_in, d_out)).astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


BACKBONE_CHANNELS = (16, 32, 64, 128)
FEATURE_DIM = BACKBONE_CHANNELS[-1]
LATENT_DIM = 64


class Encoder:
    """Backbone + projection head with dual-BN everywhere in the backbone."""

    def __init__(self, in_channels: int = 3, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.convs: list[Conv2d] = []
        self.bns: list[DualBatchNorm] = []
        c_prev = in_channels
        for c in BACKBONE_CHANNELS:
            self.convs.append(Conv2d(c_prev, c, kernel=3, stride=2, padding=1, rng=rng))
            self.bns.append(DualBatchNorm(c))
            c_prev = c
        self.proj1 = Linear(FEATURE_DIM, FEATURE_DIM, rng)
        self.proj2 = Linear(FEATURE_DIM, LATENT_DIM, rng)

    # -- forward ------------------------------------------------------

    def features(self, x: Tensor, mode: BNMode, training: bool) -> Tensor:
        """Backbone features after global average pooling, shape (B, 128).

        Input batches are channels-last: (B, H, W, C).
        """
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError("encoder", x.shape, (self.in_channels,))
        h = x
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            h = relu(bn(conv(h), mode, training))
            if np.isnan(h.data).any():
                raise NumericError(f"NaN activations after backbone layer {i}")
        return tmean(h, axis=(1, 2))

    def encode(self, x: Tensor, mode: BNMode, training: bool) -> Tensor:
        """Projected latent with unit-norm rows, shape (B, 64)."""
        h = self.features(x, mode, training)
        z = self.proj2(relu(self.proj1(h)))
        return l2_normalize(z, axis=-1)

    # -- parameter plumbing --------------------------------------------

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for conv in self.convs:
            params += conv.parameters()
        for bn in self.bns:
            params += bn.parameters()
        params += self.proj1.parameters()
        params += self.proj2.parameters()
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for i, conv in enumerate(self.convs):
            named[f"conv{i}.weight"] = conv.weight
        for i, bn in enumerate(self.bns):
            named[f"bn{i}.gamma"] = bn.gamma
            named[f"bn{i}.beta"] = bn.beta
        named["proj1.weight"] = self.proj1.weight
        named["proj1.bias"] = self.proj1.bias
        named["proj2.weight"] = self.proj2.weight
        named["proj2.bias"] = self.proj2.bias
        return named

    def named_stats(self) -> dict[str, np.ndarray]:
        named: dict[str, np.ndarray] = {}
        for i, bn in enumerate(self.bns):
            for mode in BNMode:
                st = bn.stats[mode]
                named[f"bn{i}.{mode.value}.mean"] = st.mean
                named[f"bn{i}.{mode.value}.var"] = st.var
        return named

    def state_hash(self) -> int:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.named_parameters()):
            h.update(self.named_parameters()[name].data.tobytes())
        for name in sorted(self.named_stats()):
            h.update(self.named_stats()[name].tobytes())
        return int.from_bytes(h.digest()[:8], "little")

    def clone(self) -> "Encoder":
        other = Encoder(self.in_channels, rng=np.random.default_rng(0))
        copy_parameters(other, self)
        return other

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def copy_parameters(dst: Encoder, src: Encoder) -> None:
    momentum_update(dst, src, beta=0.0)


def momentum_update(key: Encoder, query: Encoder, beta: float) -> None:
    """key <- beta * key + (1 - beta) * query, parameters and running stats."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"momentum beta must be in [0,1], got {beta}")
    kp, qp = key.named_parameters(), query.named_parameters()
    if kp.keys() != qp.keys():
        raise ShapeError("momentum_update", tuple(kp.keys()), tuple(qp.keys()))
    b = np.float32(beta)
    one_b = np.float32(1.0 - beta)
    for name, pk in kp.items():
        pq = qp[name]
        if pk.shape != pq.shape:
            raise ShapeError("momentum_update", pk.shape, pq.shape)
        pk.data *= b
        pk.data += one_b * pq.data
    ks, qs = key.named_stats(), query.named_stats()
    for name, sk in ks.items():
        sq = qs[name]
        sk *= b
        sk += one_b * sq


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

class SGD:
    """SGD with momentum and (coupled) weight decay."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        lr = np.float32(self.lr)
        mom = np.float32(self.momentum)
        wd = np.float32(self.weight_decay)
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if wd:
                g = g + wd * p.data
            v *= mom
            v += g
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Half-cosine decay from base_lr to 0 over total_steps."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


def step_lr(base_lr: float, epoch: int, milestones: list[int], factor: float) -> float:
    lr = base_lr
    for m in milestones:
        if epoch >= m:
            lr *= factor
    return lr
