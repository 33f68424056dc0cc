"""Dataset ingestion: CIFAR-10 binary records and a synthetic
frequency-controlled texture generator.

The synthetic task is built so that class identity is carried by a small
high-frequency striped patch at a random location, while pairs of classes
share the same low-frequency background gradient.  A pixel-space linear
classifier therefore tops out near the palette-level accuracy, whereas
stripe-frequency features separate the classes almost perfectly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corruption import Rng
from .errors import ConfigError, FormatError

RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 channel-major pixels
CIFAR_SIDE = 32

_PALETTE_TABLE = [
    ((0.15, 0.25, 0.65), (0.85, 0.75, 0.35)),
    ((0.70, 0.20, 0.30), (0.25, 0.80, 0.60)),
    ((0.25, 0.60, 0.20), (0.70, 0.35, 0.80)),
    ((0.60, 0.55, 0.15), (0.20, 0.45, 0.85)),
    ((0.50, 0.20, 0.60), (0.90, 0.85, 0.40)),
    ((0.20, 0.70, 0.70), (0.75, 0.30, 0.20)),
]


@dataclass
class Dataset:
    """Images in [0,1], labels, and the per-channel stats the trainer uses."""

    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64
    channel_mean: np.ndarray = field(init=False)
    channel_std: np.ndarray = field(init=False)

    def __post_init__(self):
        self.channel_mean = self.images.mean(axis=(0, 2, 3))
        std = self.images.std(axis=(0, 2, 3))
        self.channel_std = np.where(std > 1e-8, std, 1.0)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        return self.images[i], int(self.labels[i])

    def normalized(self) -> np.ndarray:
        return (self.images - self.channel_mean[:, None, None]) / self.channel_std[:, None, None]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


# -- CIFAR-10 binary format ------------------------------------------------

def _cifar_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.bin"))
        if not files:
            raise FormatError(f"no .bin files under {path}")
        return files
    return [path]


def load_cifar10(path) -> Dataset:
    """Read CIFAR-10 binary records (3073 bytes each: label + channel-major
    pixels), scale pixels by 1/255.  `path` may be one file or a directory
    of .bin files."""
    images, labels = [], []
    for f in _cifar_files(Path(path)):
        raw = np.frombuffer(f.read_bytes(), dtype=np.uint8)
        if raw.size % RECORD_BYTES != 0:
            offset = (raw.size // RECORD_BYTES) * RECORD_BYTES
            raise FormatError(f"{f}: size {raw.size} is not a multiple of {RECORD_BYTES}; "
                              f"partial record starts at byte offset {offset}")
        rec = raw.reshape(-1, RECORD_BYTES)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0)
    return Dataset(images=np.concatenate(images), labels=np.concatenate(labels))


def write_cifar10(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`load_cifar10`; float images in [0,1] are quantized
    with round(x*255), so a load/write/load cycle is bit-exact."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    n = images.shape[0]
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images.reshape(n, -1)
    Path(path).write_bytes(rec.tobytes())


def check_cifar10(path) -> tuple[int, int]:
    """Validate an existing CIFAR-10 file/directory; returns (files, records).

    Raises FormatError (with the byte offset of the first partial record)
    on malformed input.
    """
    total = 0
    files = _cifar_files(Path(path))
    for f in files:
        size = f.stat().st_size
        if size % RECORD_BYTES != 0:
            offset = (size // RECORD_BYTES) * RECORD_BYTES
            raise FormatError(f"{f}: size {size} is not a multiple of {RECORD_BYTES}; "
                              f"partial record starts at byte offset {offset}")
        total += size // RECORD_BYTES
    return len(files), total


# -- synthetic fine-grained textures ----------------------------------------

@dataclass
class SynthSpec:
    """Frequency-controlled texture task.

    Classes 2i and 2i+1 share low-frequency palette i; every class has a
    distinct (stripe frequency, orientation) signature rendered inside a
    small patch at a random location.
    """

    classes: int = 4
    size: int = 32
    noise_std: float = 0.05
    stripe_patch: int | None = None  # default scales with the image
    stripe_amp: float = 0.5
    low_freq_palette: list | None = None   # per class: (rgb0, rgb1, gradient angle)
    high_freq_signature: list | None = None  # per class: (cycles/pixel, orientation)

    def __post_init__(self):
        if self.classes < 1:
            raise ConfigError(f"need at least one class, got {self.classes}")
        if self.stripe_patch is None:
            self.stripe_patch = max(4, round(0.44 * self.size))
        if self.stripe_patch > self.size:
            raise ConfigError("stripe patch larger than the image")
        if self.low_freq_palette is None:
            self.low_freq_palette = []
            for c in range(self.classes):
                pid = c // 2
                rgb0, rgb1 = _PALETTE_TABLE[pid % len(_PALETTE_TABLE)]
                self.low_freq_palette.append((rgb0, rgb1, pid * math.pi / 5.0))
        if self.high_freq_signature is None:
            self.high_freq_signature = [
                (0.18 + 0.07 * c, (c % 4) * math.pi / 4.0 + math.pi / 8.0)
                for c in range(self.classes)
            ]
        if len(self.low_freq_palette) != self.classes or len(self.high_freq_signature) != self.classes:
            raise ConfigError("palette/signature tables must have one entry per class")
        sigs = [tuple(np.round(s, 12)) for s in self.high_freq_signature]
        if len(set(sigs)) != self.classes:
            raise ConfigError("high-frequency signatures must be pairwise distinct")


def _gradient_background(spec: SynthSpec, label: int) -> np.ndarray:
    rgb0, rgb1, angle = spec.low_freq_palette[label]
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1)
    u = xx * math.cos(angle) + yy * math.sin(angle)
    u = (u - u.min()) / (u.max() - u.min() + 1e-12)
    c0 = np.asarray(rgb0, dtype=np.float64)[:, None, None]
    c1 = np.asarray(rgb1, dtype=np.float64)[:, None, None]
    return c0 + (c1 - c0) * u


def gen_synthetic(spec: SynthSpec, rng: Rng, label: int | None = None,
                  patch_xy: tuple[int, int] | None = None) -> tuple[np.ndarray, int]:
    """One (image [3,size,size] in [0,1], label) sample.

    Draw order is fixed (label, patch x, patch y, pixel noise) so outputs are
    deterministic given the rng state; `label` / `patch_xy` pin those draws
    for tests.
    """
    if label is None:
        label = int(rng.integers(0, spec.classes))
    img = _gradient_background(spec, label).copy()
    span = spec.size - spec.stripe_patch
    if patch_xy is None:
        x0 = int(rng.integers(0, span + 1))
        y0 = int(rng.integers(0, span + 1))
    else:
        x0, y0 = patch_xy
    freq, theta = spec.high_freq_signature[label]
    p = spec.stripe_patch
    dy, dx = np.mgrid[0:p, 0:p].astype(np.float64)
    stripes = spec.stripe_amp * np.sin(2.0 * math.pi * freq * (dx * math.cos(theta) + dy * math.sin(theta)))
    img[:, y0:y0 + p, x0:x0 + p] += stripes
    if spec.noise_std > 0:
        img += spec.noise_std * rng.normal(img.shape)
    return np.clip(img, 0.0, 1.0), label


def build_synthetic_dataset(spec: SynthSpec, samples_per_class: int, rng: Rng) -> Dataset:
    """Balanced dataset, class-major order, fully determined by the rng."""
    images = np.empty((spec.classes * samples_per_class, 3, spec.size, spec.size))
    labels = np.empty(spec.classes * samples_per_class, dtype=np.int64)
    i = 0
    for c in range(spec.classes):
        for _ in range(samples_per_class):
            images[i], labels[i] = gen_synthetic(spec, rng, label=c)
            i += 1
    return Dataset(images=images, labels=labels)
