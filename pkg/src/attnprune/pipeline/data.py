"""Datasets: seeded synthetic patterns, CIFAR-10 binary batches, augmentation."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError, InvalidInputError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
# Per-channel mean/std of the CIFAR-10 training set.
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    templates: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise InvalidInputError(f"images {self.images.shape} do not match {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, idx, split=None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split, self.templates)

    def batches(self, batch_size, rng=None):
        """Yield (images, labels); shuffled by ``rng`` when given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            sel = order[i : i + batch_size]
            yield self.images[sel], self.labels[sel]


def _templates(rng, k, channels, h, w):
    """K distinct patterns: oriented bars and Gaussian blobs, random colors."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = (yy - (h - 1) / 2) / h
    xx = (xx - (w - 1) / 2) / w
    out = np.empty((k, channels, h, w))
    for i in range(k):
        if i % 2 == 0:
            theta = np.pi * (i // 2) / max(1, (k + 1) // 2) + rng.uniform(-0.1, 0.1)
            d = xx * np.cos(theta) + yy * np.sin(theta)
            pattern = np.cos(2 * np.pi * d * rng.uniform(2.0, 3.0)) > 0.3
            pattern = pattern.astype(np.float64)
        else:
            cy, cx = rng.uniform(-0.3, 0.3, size=2)
            pattern = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.15**2))
        color = rng.uniform(0.2, 1.0, size=channels)
        out[i] = color[:, None, None] * pattern[None]
    return out - out.mean(axis=(1, 2, 3), keepdims=True)


def make_synth_dataset(seed, n, num_classes, resolution=(16, 16), noise=0.5, channels=3, dtype=np.float32, split="train") -> Dataset:
    """Balanced dataset of class templates plus Gaussian noise.

    Templates depend on ``seed`` alone; samples on ``seed`` and ``split``.
    Class c gets ``n // K`` samples (the first ``n % K`` classes one extra).
    Each sample is its template randomly scaled in brightness and shifted by at
    most one pixel, plus i.i.d. noise of standard deviation ``noise``.
    """
    if n < num_classes:
        raise InvalidInputError(f"need n >= K, got n={n}, K={num_classes}")
    h, w = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    # templates depend on the seed only, so every split shares the same classes
    templates = _templates(np.random.default_rng(seed), num_classes, channels, h, w)
    rng = np.random.default_rng([seed, zlib.crc32(split.encode())])
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    gain = rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
    images = templates[labels] * gain
    if noise > 0:
        shifts = rng.integers(-1, 2, size=(n, 2))
        for i, (dy, dx) in enumerate(shifts):
            images[i] = np.roll(images[i], (dy, dx), axis=(1, 2))
        images = images + rng.normal(0.0, noise, size=images.shape)
    return Dataset(images.astype(dtype), labels, num_classes, split, templates.astype(dtype))


def nearest_template(dataset: Dataset) -> np.ndarray:
    """Predict by the closest class template (Euclidean)."""
    if dataset.templates is None:
        raise InvalidInputError("dataset has no templates")
    x = dataset.images.reshape(len(dataset), -1).astype(np.float64)
    t = dataset.templates.reshape(dataset.num_classes, -1).astype(np.float64)
    d = (x**2).sum(1)[:, None] - 2 * x @ t.T + (t**2).sum(1)[None]
    return d.argmin(axis=1)


# --- CIFAR-10 -------------------------------------------------------------


def decode_cifar10(raw: bytes, mean=CIFAR_MEAN, std=CIFAR_STD, dtype=np.float32, split="train") -> Dataset:
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"CIFAR-10 data must be a multiple of {CIFAR_RECORD} bytes, got {len(raw)}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        bad = int(np.flatnonzero(labels >= 10)[0])
        raise FormatError(f"record {bad}: label byte {labels[bad]} is not a CIFAR-10 class")
    pixels = rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return Dataset(((pixels - m) / s).astype(dtype), labels, 10, split)


def encode_cifar10(dataset: Dataset, mean=CIFAR_MEAN, std=CIFAR_STD) -> bytes:
    """Inverse of ``decode_cifar10`` (pixels rounded back to bytes)."""
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    pixels = np.rint((dataset.images.astype(np.float64) * s + m) * 255.0)
    pixels = np.clip(pixels, 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    return rec.tobytes()


def load_cifar10_binary(path, split="train", mean=CIFAR_MEAN, std=CIFAR_STD, dtype=np.float32) -> Dataset:
    """Read one batch file, or every ``data_batch_*.bin`` / ``test_batch.bin``
    in a directory depending on ``split``."""
    path = Path(path)
    if path.is_dir():
        pattern = "test_batch*.bin" if split == "test" else "data_batch_*.bin"
        files = sorted(path.glob(pattern))
        if not files:
            raise FormatError(f"no {pattern} files under {path}")
    else:
        files = [path]
    return decode_cifar10(b"".join(f.read_bytes() for f in files), mean, std, dtype, split)


# --- augmentation ----------------------------------------------------------


@dataclass
class AugmentFlags:
    hflip: bool = False
    crop: int | None = None
    pad: int = 0


def augment(images: np.ndarray, flags: AugmentFlags, rng) -> np.ndarray:
    """Per-sample horizontal flip (p=0.5) and random crop after zero padding.

    The output is ``crop x crop`` when cropping, else the input size.
    """
    n, c, h, w = images.shape
    out = images
    if flags.hflip:
        coin = rng.random(n) < 0.5
        out = out.copy()
        out[coin] = out[coin, :, :, ::-1]
    if flags.crop is not None or flags.pad:
        size = flags.crop if flags.crop is not None else h
        ph, pw = h + 2 * flags.pad, w + 2 * flags.pad
        if size > ph or size > pw:
            raise InvalidInputError(f"crop {size} is larger than the padded image {ph}x{pw}")
        padded = np.pad(out, ((0, 0), (0, 0), (flags.pad, flags.pad), (flags.pad, flags.pad)))
        oy = rng.integers(0, ph - size + 1, size=n)
        ox = rng.integers(0, pw - size + 1, size=n)
        out = np.stack([padded[i, :, oy[i] : oy[i] + size, ox[i] : ox[i] + size] for i in range(n)])
    return out
