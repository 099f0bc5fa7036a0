"""View generation: random image transforms, cut-mixed views with mixed
pseudo-labels, and adversarial views from signed-gradient steps.

All functions are pure given (inputs, rng); nothing here touches model
state.  Images enter as float32 arrays in [0,1], channels-last (HWC);
transformed views leave in normalised space ((x - mean) / std), which is
also the space the adversarial perturbation budget lives in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .tensor import GradTape, Tensor

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class TransformConfig:
    crop_scale: tuple[float, float] = (0.4, 1.0)  # area fraction
    out_size: int = 32
    flip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    grayscale_p: float = 0.2
    noise_sigma: float = 0.02
    norm_mean: float = 0.5
    norm_std: float = 0.25

    def validate(self) -> None:
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ContractError(f"crop scale range must be within (0,1], got {self.crop_scale}")
        for name in ("flip_p", "grayscale_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must be a probability, got {v}")
        if self.noise_sigma < 0:
            raise ContractError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.norm_std <= 0:
            raise ContractError(f"norm_std must be > 0, got {self.norm_std}")

    def with_size(self, out_size: int) -> "TransformConfig":
        cfg = TransformConfig(**self.__dict__)
        cfg.out_size = out_size
        return cfg

    def view_bounds(self) -> tuple[float, float]:
        """Raw pixel range [0,1] mapped into normalised view space."""
        return (-self.norm_mean / self.norm_std, (1.0 - self.norm_mean) / self.norm_std)


@dataclass
class CutMixConfig:
    beta_alpha: float = 5.0
    beta_beta: float = 3.0

    def validate(self) -> None:
        if self.beta_alpha <= 0 or self.beta_beta <= 0:
            raise ContractError("beta distribution parameters must be > 0")


@dataclass
class AdvConfig:
    epsilon: float = 1.0
    eta: float = 1.0
    pgd_steps: int = 1
    norm: str = "linf"  # linf | l2
    clamp_bounds: tuple[float, float] | None = None  # optional view-space pixel clamp

    def validate(self) -> None:
        if self.epsilon < 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.eta <= 0:
            raise ContractError(f"eta must be > 0, got {self.eta}")
        if self.pgd_steps < 1:
            raise ContractError(f"pgd_steps must be >= 1, got {self.pgd_steps}")
        if self.norm not in ("linf", "l2"):
            raise ContractError(f"unknown perturbation norm {self.norm!r}")


@dataclass
class MixedLabels:
    """Two-term sparse pseudo-label mixture per row: lam*y_a + (1-lam)*y_b."""

    label_a: np.ndarray  # (B,) int ids
    label_b: np.ndarray  # (B,) int ids
    lam: np.ndarray  # (B,) float in [0,1]


# --------------------------------------------------------------------------
# bilinear resize with cached sampling tables
# --------------------------------------------------------------------------

_RESIZE_CACHE: dict[tuple[int, int], tuple] = {}


def _resize_table(src: int, dst: int):
    key = (src, dst)
    tab = _RESIZE_CACHE.get(key)
    if tab is None:
        # half-pixel centers; exact identity when src == dst
        x = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        x = np.clip(x, 0.0, src - 1.0)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        w = (x - lo).astype(np.float32)
        tab = (lo, hi, w)
        _RESIZE_CACHE[key] = tab
    return tab


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an HWC float image with half-pixel bilinear sampling."""
    h, w, c = img.shape
    ylo, yhi, wy = _resize_table(h, out_h)
    xlo, xhi, wx = _resize_table(w, out_w)
    # both gathers run on axis 0, numpy's fast path
    top = img[ylo]
    bot = img[yhi]
    rows = top + (bot - top) * wy[:, None, None]  # (out_h, w, c)
    whc = rows.transpose(1, 0, 2)
    left = whc[xlo]
    right = whc[xhi]
    cols = left + (right - left) * wx[:, None, None]  # (out_w, out_h, c)
    return cols.transpose(1, 0, 2)


# --------------------------------------------------------------------------
# random view transform
# --------------------------------------------------------------------------

def random_transform(image: np.ndarray, cfg: TransformConfig, rng: np.random.Generator) -> np.ndarray:
    """One augmented view of one HWC image in [0,1]; output is normalised."""
    cfg.validate()
    return _transform_one(image, cfg, rng)


def _transform_one(image: np.ndarray, cfg: TransformConfig, rng: np.random.Generator) -> np.ndarray:
    h, w, c = image.shape
    lo, hi = cfg.crop_scale
    scale = rng.uniform(lo, hi)
    side = np.sqrt(scale)
    crop_h = max(1, int(round(h * side)))
    crop_w = max(1, int(round(w * side)))
    if crop_h > h or crop_w > w:
        raise ContractError(f"crop {crop_h}x{crop_w} larger than image {h}x{w}")
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    view = image[top : top + crop_h, left : left + crop_w, :]
    view = resize_bilinear(view, cfg.out_size, cfg.out_size)

    if rng.uniform() < cfg.flip_p:
        view = view[:, ::-1, :]

    if cfg.brightness > 0:
        view = view * (1.0 + rng.uniform(-cfg.brightness, cfg.brightness))
    if cfg.contrast > 0:
        m = view.mean()
        view = m + (view - m) * (1.0 + rng.uniform(-cfg.contrast, cfg.contrast))
    if cfg.grayscale_p > 0 and rng.uniform() < cfg.grayscale_p:
        if c == 3:
            gray = view @ LUMA
            view = np.broadcast_to(gray[:, :, None], view.shape)
    if cfg.noise_sigma > 0:
        noise = rng.standard_normal(view.shape, dtype=np.float32)
        view = view + noise * np.float32(cfg.noise_sigma)

    view = np.clip(view, 0.0, 1.0)
    view = (view - cfg.norm_mean) / cfg.norm_std
    return np.ascontiguousarray(view, dtype=np.float32)


def transform_batch(images: np.ndarray, cfg: TransformConfig, rng: np.random.Generator) -> np.ndarray:
    """Independent random views for each image in a (B,H,W,C) batch."""
    cfg.validate()
    out = np.empty((images.shape[0], cfg.out_size, cfg.out_size, images.shape[3]), dtype=np.float32)
    for i in range(images.shape[0]):
        out[i] = _transform_one(images[i], cfg, rng)
    return out


def center_view(images: np.ndarray, cfg: TransformConfig) -> np.ndarray:
    """Deterministic full-image resize + normalisation (evaluation view)."""
    b, c = images.shape[0], images.shape[3]
    out = np.empty((b, cfg.out_size, cfg.out_size, c), dtype=np.float32)
    for i in range(b):
        out[i] = resize_bilinear(images[i], cfg.out_size, cfg.out_size)
    out = np.clip(out, 0.0, 1.0)
    return ((out - cfg.norm_mean) / cfg.norm_std).astype(np.float32)


# --------------------------------------------------------------------------
# cutmix
# --------------------------------------------------------------------------

def sample_cutmix_mask(cfg: CutMixConfig, width: int, height: int, rng: np.random.Generator):
    """Binary keep-mask with one rectangular hole, plus the exact kept-area ratio.

    The raw mixing ratio comes from Beta(alpha, beta); the hole covers an
    area of (1 - ratio) * W * H with uniformly sampled aspect, placed fully
    inside the mask, and the returned lambda is recomputed from the integer
    pixel count so it is exactly ones(M) / (W*H).
    """
    cfg.validate()
    if width < 1 or height < 1:
        raise ContractError(f"mask size must be >= 1, got {width}x{height}")
    lam_raw = rng.beta(cfg.beta_alpha, cfg.beta_beta)
    area = (1.0 - lam_raw) * width * height
    mask = np.ones((height, width), dtype=np.float32)
    if area >= 0.5:
        aspect = rng.uniform(0.5, 2.0)
        # keep the rectangle realisable inside the mask bounds
        aspect = float(np.clip(aspect, area / (height * height), (width * width) / area))
        rect_w = min(width, int(round(np.sqrt(area * aspect))))
        rect_h = min(height, int(round(np.sqrt(area / aspect))))
        if rect_w > 0 and rect_h > 0:
            left = int(rng.integers(0, width - rect_w + 1))
            top = int(rng.integers(0, height - rect_h + 1))
            mask[top : top + rect_h, left : left + rect_w] = 0.0
    ones = int(mask.sum())
    lam = ones / float(width * height)
    return mask, lam


def cutmix(
    batch_a: np.ndarray,
    labels_a: np.ndarray,
    batch_b: np.ndarray,
    labels_b: np.ndarray,
    cfg: CutMixConfig,
    rng: np.random.Generator,
):
    """Per-row rectangular mixing of two aligned batches.

    batch_b is expected to be a within-batch permutation of batch_a; each
    row gets its own mask and its own exact area ratio.
    """
    if batch_a.shape != batch_b.shape:
        raise ShapeError("cutmix", batch_a.shape, batch_b.shape)
    b, h, w, c = batch_a.shape
    mixed = np.empty_like(batch_a)
    lam = np.empty(b, dtype=np.float32)
    for i in range(b):
        mask, lam_i = sample_cutmix_mask(cfg, w, h, rng)
        keep = mask[:, :, None]
        mixed[i] = keep * batch_a[i] + (1.0 - keep) * batch_b[i]
        lam[i] = lam_i
    labels = MixedLabels(
        label_a=np.asarray(labels_a, dtype=np.int64),
        label_b=np.asarray(labels_b, dtype=np.int64),
        lam=lam,
    )
    return mixed, labels


# --------------------------------------------------------------------------
# adversarial views
# --------------------------------------------------------------------------

def pgd_attack(loss_fn, views: np.ndarray, cfg: AdvConfig) -> np.ndarray:
    """Signed-gradient ascent on the view pixels, projected into the budget.

    loss_fn maps a view Tensor to a scalar loss Tensor.  Model parameters
    are left untouched: gradients are pulled through a private tape that
    never writes ``.grad`` buffers.
    """
    cfg.validate()
    views = np.asarray(views, dtype=np.float32)
    delta = np.zeros_like(views)
    for _ in range(cfg.pgd_steps):
        x = Tensor(views + delta, requires_grad=True)
        with GradTape() as tape:
            loss = loss_fn(x)
        g = tape.gradient(loss, [x])[0]
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient during adversarial generation")
        delta += np.float32(cfg.eta) * np.sign(g)
        if cfg.norm == "linf":
            np.clip(delta, -cfg.epsilon, cfg.epsilon, out=delta)
        else:
            flat = delta.reshape(delta.shape[0], -1)
            norms = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
            scale = np.minimum(1.0, cfg.epsilon / np.maximum(norms, 1e-12)).astype(np.float32)
            delta *= scale[:, None, None, None]
        if cfg.clamp_bounds is not None:
            lo, hi = cfg.clamp_bounds
            np.clip(views + delta, lo, hi, out=delta)
            delta -= views
    return views + delta
