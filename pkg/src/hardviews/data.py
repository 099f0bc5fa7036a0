"""Dataset container, the HXDS binary format, and the bundled synthetic
shape dataset.

HXDS layout (all integers little-endian):

    magic   4 bytes  b"HXDS"
    version u32      1
    count   u32      number of images
    height  u16
    width   u16
    channels u16
    pixels  count*H*W*C bytes, u8, HWC order per image
    labels  count u16

Pixels map to floats as u8/255, so 255 becomes exactly 1.0.  Labels are
only ever read by the evaluation protocols, never by pre-training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataFormatError

MAGIC = b"HXDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHH")


@dataclass
class Dataset:
    images: np.ndarray  # (N,H,W,C) float32 in [0,1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def write_dataset(path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Write (N,H,W,C) u8 images and (N,) labels in HXDS format."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels)
    if images_u8.ndim != 4:
        raise ContractError(f"images must be (N,H,W,C), got shape {images_u8.shape}")
    n, h, w, c = images_u8.shape
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match {n} images")
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ContractError("labels must fit in u16")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, h, w, c))
        f.write(images_u8.tobytes())
        f.write(labels.astype("<u2").tobytes())


def load_dataset(path) -> Dataset:
    """Read an HXDS file into float images and integer labels."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"truncated header, file has {len(raw)} bytes", offset=len(raw))
    magic, version, n, h, w, c = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise DataFormatError(f"unsupported version {version}", offset=4)
    pixel_bytes = n * h * w * c
    label_bytes = n * 2
    expected = _HEADER.size + pixel_bytes + label_bytes
    if len(raw) != expected:
        raise DataFormatError(
            f"payload size mismatch: expected {expected} bytes for count={n}, got {len(raw)}",
            offset=min(len(raw), expected),
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=pixel_bytes, offset=_HEADER.size)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=_HEADER.size + pixel_bytes)
    images = pixels.reshape(n, h, w, c).astype(np.float32) / np.float32(255.0)
    return Dataset(images=images, labels=labels.astype(np.int64))


# --------------------------------------------------------------------------
# synthetic shapes: 10 classes of coloured geometry on noise backgrounds
# --------------------------------------------------------------------------

SHAPE_CLASSES = (
    "disk",
    "ring",
    "square",
    "frame",
    "triangle_up",
    "triangle_down",
    "plus",
    "cross",
    "hbar",
    "vbar",
)


def _hue_to_rgb(h: float) -> np.ndarray:
    # full-saturation HSV -> RGB
    h6 = (h % 1.0) * 6.0
    k = np.array([(5 + h6) % 6, (3 + h6) % 6, (1 + h6) % 6])
    return (1.0 - np.clip(np.minimum(k, 4 - k), 0.0, 1.0)).astype(np.float32)


def _shape_mask(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    cy = size / 2 + rng.uniform(-0.12, 0.12) * size
    cx = size / 2 + rng.uniform(-0.12, 0.12) * size
    r = rng.uniform(0.28, 0.42) * size
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    dist = np.sqrt(dx * dx + dy * dy)
    cheb = np.maximum(np.abs(dx), np.abs(dy))
    name = SHAPE_CLASSES[cls]
    if name == "disk":
        return dist <= r
    if name == "ring":
        return (dist <= r) & (dist >= 0.55 * r)
    if name == "square":
        return cheb <= 0.82 * r
    if name == "frame":
        return (cheb <= 0.82 * r) & (cheb >= 0.5 * r)
    if name == "triangle_up":
        return (dy <= 0.6 * r) & (np.abs(dx) <= 0.75 * (dy + r))
    if name == "triangle_down":
        return (dy >= -0.6 * r) & (np.abs(dx) <= 0.75 * (r - dy))
    if name == "plus":
        return ((np.abs(dx) <= 0.28 * r) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= 0.28 * r) & (np.abs(dx) <= r)
        )
    if name == "cross":
        return ((np.abs(dx - dy) <= 0.4 * r) | (np.abs(dx + dy) <= 0.4 * r)) & (cheb <= 0.9 * r)
    if name == "hbar":
        return (np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r)
    if name == "vbar":
        return (np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r)
    raise ContractError(f"unknown shape class {cls}")


def make_shape_dataset(count: int, size: int = 32, seed: int = 0, num_classes: int = 10):
    """Balanced synthetic dataset; returns ((N,H,W,C) u8 images, (N,) u16 labels)."""
    if not 1 <= num_classes <= len(SHAPE_CLASSES):
        raise ContractError(f"num_classes must be in [1,{len(SHAPE_CLASSES)}]")
    rng = np.random.default_rng(seed)
    images = np.empty((count, size, size, 3), dtype=np.uint8)
    labels = (np.arange(count) % num_classes).astype(np.uint16)
    for i in range(count):
        cls = int(labels[i])
        base = rng.uniform(0.15, 0.5)
        img = np.clip(rng.normal(base, 0.08, size=(size, size, 3)), 0.0, 1.0).astype(np.float32)
        color = _hue_to_rgb(rng.uniform()) * rng.uniform(0.7, 1.0)
        mask = _shape_mask(cls, size, rng)
        img[mask] = color
        images[i] = np.round(img * 255.0).astype(np.uint8)
    order = rng.permutation(count)
    return images[order], labels[order]
