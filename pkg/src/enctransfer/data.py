"""Dataset ingestion: CIFAR-10 binary batches, with a synthetic fallback.

The CIFAR-10 binary format stores one record per image: 1 label byte
followed by 3072 pixel bytes in channel-planar order (1024 R, 1024 G,
1024 B, each row-major 32x32). Images are returned as HWC uint8.

When no dataset directory is available (CI, fresh checkouts), a
deterministic synthetic 10-class dataset of procedural 32x32 textures is
generated instead: five shape families (stripes, checkerboards, rings,
blobs, line grids) with randomized colors, frequencies, offsets and
additive noise, each split into a bright/dark pair of classes by a
global polarity shift of the palette residual (see `class_tilt`). It is
easy enough for a small CNN to learn well yet non-trivial under
perturbation, which is all the desk-scale experiments need.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

IMG_H = IMG_W = 32
IMG_C = 3
NUM_CLASSES = 10
RECORD_LEN = 1 + IMG_H * IMG_W * IMG_C

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"


class DatasetFormatError(ValueError):
    """A CIFAR-10 binary file has unexpected length or content."""


@dataclass
class LabeledImages:
    """uint8 HWC images with integer labels."""

    images: np.ndarray  # (N, 32, 32, 3) uint8
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images/labels length mismatch")

    def __len__(self):
        return len(self.images)


def read_cifar_file(path: str) -> LabeledImages:
    """Decode one CIFAR-10 binary batch file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_LEN:
        raise DatasetFormatError(
            f"{path}: size {raw.size} is not a multiple of record length {RECORD_LEN}"
            f" (offset of trailing partial record: {raw.size - raw.size % RECORD_LEN})")
    records = raw.reshape(-1, RECORD_LEN)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise DatasetFormatError(f"{path}: label {labels[bad]} out of range in record {bad}")
    planar = records[:, 1:].reshape(-1, IMG_C, IMG_H, IMG_W)
    images = np.ascontiguousarray(planar.transpose(0, 2, 3, 1))
    return LabeledImages(images, labels)


def stratified_subset(data: LabeledImages, n: int, seed: int) -> LabeledImages:
    """Seeded class-balanced subset of exactly n images (n % 10 == 0)."""
    if n % NUM_CLASSES:
        raise ValueError(f"subset size {n} is not a multiple of {NUM_CLASSES}")
    per_class = n // NUM_CLASSES
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(NUM_CLASSES):
        idx = np.flatnonzero(data.labels == c)
        if len(idx) < per_class:
            raise ValueError(f"class {c} has only {len(idx)} images, need {per_class}")
        picks.append(rng.choice(idx, size=per_class, replace=False))
    order = np.sort(np.concatenate(picks))
    return LabeledImages(data.images[order].copy(), data.labels[order].copy())


def load_cifar10(path, n_train, n_test, seed):
    """Load train/test subsets from CIFAR-10 binaries, or synthesize.

    Returns (train, test) LabeledImages. Falls back to the synthetic
    pattern dataset when `path` is None or does not contain the binaries.
    """
    if path is not None and os.path.isfile(os.path.join(path, TRAIN_FILES[0])):
        train_parts = [read_cifar_file(os.path.join(path, f)) for f in TRAIN_FILES]
        train = LabeledImages(np.concatenate([p.images for p in train_parts]),
                              np.concatenate([p.labels for p in train_parts]))
        test = read_cifar_file(os.path.join(path, TEST_FILE))
    else:
        train, test = make_synthetic(50_000 if n_train > 10_000 else max(n_train * 2, 2000),
                                     max(n_test * 2, 2000), seed=seed ^ 0x5EED)
    if n_train < len(train):
        train = stratified_subset(train, n_train, seed)
    if n_test < len(test):
        test = stratified_subset(test, n_test, seed + 1)
    return train, test


# -- synthetic pattern dataset --------------------------------------------

def _coords():
    y, x = np.mgrid[0:IMG_H, 0:IMG_W].astype(np.float32)
    return y, x


# Pixel values are quantized to this coarse lattice before noise is
# added. A finite value vocabulary keeps value-substitution encryption
# (FFX) learnable by texture: every lattice level yields one fixed
# cipher texture per block phase instead of a fresh texture per image.
PALETTE_STEP = 32
PALETTE_OFFSET = 16
NOISE_AMPLITUDE = 10  # uniform integer noise; covers +-8 attack shifts
TILT_AMPLITUDE = 5    # class-coded per-quadrant mean shift, see class_tilt


def quantize_palette(img: np.ndarray) -> np.ndarray:
    """Snap float pixel values to the coarse 8-level-per-channel lattice."""
    q = np.floor(np.clip(img, 0, 255) / PALETTE_STEP) * PALETTE_STEP + PALETTE_OFFSET
    return q.astype(np.float32)


def _smooth(mask: np.ndarray) -> np.ndarray:
    """3x3 binomial blur of a boolean mask, reflect-padded.

    Soft edges keep the plain-view shapes low-frequency (small per-pixel
    gradients); block shuffling turns the same shapes into sharp
    key-specific textures, which is the asymmetry the transfer
    experiments rely on.
    """
    b = np.array([1, 2, 1], dtype=np.float32) / 4.0
    w = np.pad(mask.astype(np.float32), 1, mode="reflect")
    w = sum(b[k] * w[:, k:k + IMG_W] for k in range(3))
    w = sum(b[k] * w[k:k + IMG_H, :] for k in range(3))
    return w


def _two_colors(rng):
    # well-separated random lattice colors so classes are not color-coded
    levels = np.arange(PALETTE_OFFSET, 256, PALETTE_STEP, dtype=np.float32)
    a = rng.choice(levels, size=3)
    b = rng.choice(levels, size=3)
    while np.abs(a - b).sum() < 180:
        b = rng.choice(levels, size=3)
    return a.astype(np.float32), b.astype(np.float32)


def _synth_one(cls: int, rng: np.random.Generator) -> np.ndarray:
    """One pattern image: shape family = cls // 2, polarity = cls % 2.

    The five shape families are shared between the two classes of each
    pair, with identical parameter distributions, so the shape carries no
    information about the pair member; the member is encoded only by the
    polarity shift added later (see `class_tilt`).
    """
    y, x = _coords()
    ca, cb = _two_colors(rng)
    period = rng.uniform(5.0, 11.0)
    phase = rng.uniform(0, period)
    family = cls // 2

    if family == 0:   # horizontal stripes
        mask = ((y + phase) % period) < period / 2
    elif family == 1:  # checkerboard
        cell = rng.integers(3, 7)
        mask = ((x // cell + y // cell) % 2) == 0
    elif family == 2:  # concentric rings
        cy, cx = rng.uniform(10, 22, size=2)
        r = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
        mask = ((r + phase) % period) < period / 2
    elif family == 3:  # single blob
        cy, cx = rng.uniform(8, 24, size=2)
        s = rng.uniform(3.0, 6.0)
        w = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))
        img = ca[None, None, :] * (1 - w[..., None]) + cb[None, None, :] * w[..., None]
        return img
    else:             # grid of thin lines
        gap = rng.integers(6, 10)
        off = rng.integers(0, gap)
        mask = (((y.astype(int) + off) % gap) < 2) | (((x.astype(int) + off) % gap) < 2)

    w = _smooth(mask)[..., None]
    img = ca[None, None, :] * w + cb[None, None, :] * (1.0 - w)
    return img.astype(np.float32)


def class_tilt(cls: int) -> np.ndarray:
    """Polarity of the class: a constant (2, 2, 3) pixel shift.

    Classes come in shape-family pairs (see `_synth_one`): even classes
    add +TILT_AMPLITUDE to every pixel, odd classes subtract it. Within a
    pair the image distributions are otherwise identical, so the global
    palette residual is the only evidence any model has for the pair
    member. The shift is a value-level feature: pixel-permuting
    transforms (SHF at any block size and key) preserve it exactly, while
    value-substituting transforms (FFX) destroy it. It is below the pixel
    noise amplitude but many standard deviations above it as an image
    mean, and it sits inside the evaluation perturbation budget, so it is
    learnable, robust to the training noise, and attackable.
    """
    sign = 1 if cls % 2 == 0 else -1
    return np.full((2, 2, IMG_C), sign * TILT_AMPLITUDE, dtype=np.int64)


def _apply_tilt(img: np.ndarray, cls: int) -> np.ndarray:
    tilt = class_tilt(cls)
    return img + np.repeat(np.repeat(tilt, IMG_H // 2, axis=0), IMG_W // 2, axis=1)


def make_synthetic(n_train: int, n_test: int, seed: int):
    """Deterministic synthetic 10-class pattern dataset."""
    def build(n, ss):
        rng = np.random.default_rng(ss)
        labels = np.tile(np.arange(NUM_CLASSES), n // NUM_CLASSES + 1)[:n].astype(np.int64)
        images = np.empty((n, IMG_H, IMG_W, IMG_C), dtype=np.uint8)
        for i in range(n):
            img = quantize_palette(_synth_one(int(labels[i]), rng))
            img = _apply_tilt(img, int(labels[i]))
            img = img + rng.integers(-NOISE_AMPLITUDE, NOISE_AMPLITUDE + 1,
                                     size=img.shape)
            images[i] = np.clip(img, 0, 255).astype(np.uint8)
        return LabeledImages(images, labels)

    return build(n_train, seed), build(n_test, seed + 10_007)
