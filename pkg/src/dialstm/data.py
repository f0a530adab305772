"""Datasets: a procedural class-conditional generator and CIFAR-10 binary IO.

The synthetic set exists so training behavior is verifiable in minutes: each
class is a spatial pattern family (oriented bar, disk, checkerboard, linear
gradient) with jittered geometry and randomized colors, so raw-pixel linear
models saturate well below a small convolutional network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes

CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616])


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [count, 3, H, W]
    labels: np.ndarray  # int64 [count]
    num_classes: int
    mean: np.ndarray  # per-channel, on the [0, 1] scale
    std: np.ndarray

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def normalize_images(images_u8: np.ndarray, mean: np.ndarray,
                     std: np.ndarray) -> np.ndarray:
    x = images_u8.astype(np.float64) / 255.0
    return (x - mean[None, :, None, None]) / std[None, :, None, None]


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _pattern_mask(family: int, variant: int, h: int, w: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Grayscale pattern in [0, 1]; geometry jittered per sample."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2 + rng.uniform(-0.22, 0.22) * h
    cx = w / 2 + rng.uniform(-0.22, 0.22) * w

    if family == 0:  # oriented bar
        base = np.pi / 4 if variant % 2 == 0 else 3 * np.pi / 4
        theta = base + rng.uniform(-0.25, 0.25)
        dist = np.abs((xx - cx) * np.sin(theta) - (yy - cy) * np.cos(theta))
        thickness = h * (0.07 + 0.04 * rng.random())
        return (dist < thickness).astype(np.float64)

    if family == 1:  # disk or ring
        radius = h * (0.18 + 0.08 * rng.random())
        rad = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        if variant % 2 == 0:
            return (rad < radius).astype(np.float64)
        return (np.abs(rad - radius) < h * 0.06).astype(np.float64)

    if family == 2:  # checkerboard
        period = max(2, int(round(h / 8))) * (1 + variant % 2)
        oy = rng.integers(0, period)
        ox = rng.integers(0, period)
        return ((((yy + oy) // period) + ((xx + ox) // period)) % 2).astype(np.float64)

    # family 3: linear gradient
    base = rng.uniform(0, 2 * np.pi)
    proj = (xx - w / 2) * np.cos(base) + (yy - h / 2) * np.sin(base)
    proj = proj - proj.min()
    span = proj.max()
    ramp = proj / span if span > 0 else proj
    return ramp if variant % 2 == 0 else ramp ** 2


def synth_generate(classes: int, count: int, height: int = 32, width: int = 32,
                   seed: int = 0) -> Dataset:
    """Deterministic class-conditional pattern dataset with balanced labels."""
    if classes < 2:
        raise ConfigError(f"synthetic dataset needs >= 2 classes, got {classes}")
    rng = np.random.default_rng([seed, 0xD1A])
    labels = (np.arange(count) % classes).astype(np.int64)
    labels = rng.permutation(labels)
    images = np.zeros((count, 3, height, width), dtype=np.uint8)

    for i in range(count):
        k = int(labels[i])
        mask = _pattern_mask(k % 4, k // 4, height, width, rng)
        fg = rng.uniform(150.0, 255.0, size=3)
        bg = rng.uniform(0.0, 105.0, size=3)
        if rng.random() < 0.5:
            fg, bg = bg, fg
        img = bg[:, None, None] * (1.0 - mask) + fg[:, None, None] * mask
        img = img + rng.normal(0.0, 12.0, size=img.shape)
        images[i] = np.clip(img, 0, 255).astype(np.uint8)

    if count:
        flat = images.astype(np.float64) / 255.0
        mean = flat.mean(axis=(0, 2, 3))
        std = flat.std(axis=(0, 2, 3))
        std[std == 0] = 1.0
    else:
        mean = np.full(3, 0.5)
        std = np.full(3, 0.25)
    return Dataset(images=images, labels=labels, num_classes=classes,
                   mean=mean, std=std)


# ---------------------------------------------------------------------------
# CIFAR-10 binary layout: records of 1 label byte + 3072 channel-major pixels
# ---------------------------------------------------------------------------

def load_cifar10_binary(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % RECORD_BYTES != 0:
        offset = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise FormatError(
            f"{path}: length {len(raw)} is not a multiple of {RECORD_BYTES} "
            f"(trailing partial record starts at byte {offset})")
    count = len(raw) // RECORD_BYTES
    data = np.frombuffer(raw, dtype=np.uint8).reshape(count, RECORD_BYTES)
    labels = data[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= 10)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{path}: label {labels[i]} >= 10 in record {i} "
                          f"(byte offset {i * RECORD_BYTES})")
    images = data[:, 1:].reshape(count, 3, 32, 32).copy()
    return Dataset(images=images, labels=labels, num_classes=10,
                   mean=CIFAR10_MEAN.copy(), std=CIFAR10_STD.copy())


def write_cifar10_binary(path, dataset: Dataset) -> None:
    """Inverse of the loader; used for round-trip verification."""
    images = dataset.images
    if images.shape[1:] != (3, 32, 32):
        raise FormatError(f"CIFAR-10 binary requires [N, 3, 32, 32] images, "
                          f"got {images.shape}")
    count = images.shape[0]
    out = np.empty((count, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = dataset.labels.astype(np.uint8)
    out[:, 1:] = images.reshape(count, 3072)
    with open(path, "wb") as f:
        f.write(out.tobytes())


# ---------------------------------------------------------------------------
# training-time augmentation
# ---------------------------------------------------------------------------

def augment_batch(images_u8: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pad-4 random crop plus horizontal flip, on raw uint8 images."""
    b, c, h, w = images_u8.shape
    padded = np.pad(images_u8, ((0, 0), (0, 0), (4, 4), (4, 4)))
    out = np.empty_like(images_u8)
    offs = rng.integers(0, 9, size=(b, 2))
    flips = rng.random(b) < 0.5
    for i in range(b):
        oy, ox = offs[i]
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
