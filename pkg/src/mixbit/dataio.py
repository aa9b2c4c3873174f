"""CIFAR-10 binary-format ingestion and a seeded synthetic substitute."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

CIFAR_HW = 32
CIFAR_PIXELS = 3 * CIFAR_HW * CIFAR_HW
CIFAR_RECORD = 1 + CIFAR_PIXELS
CIFAR_RECORDS_PER_FILE = 10_000
CIFAR_FILE_BYTES = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W, float64
    labels: np.ndarray  # N, int64
    num_classes: int
    splits: Dict[str, np.ndarray] = field(default_factory=dict)
    name: str = ""
    augment: bool = False
    normalization: Optional[Tuple[Tuple[float, ...], Tuple[float, ...]]] = None
    templates: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images must be N x C x H x W with one label per image")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def hw(self) -> int:
        return int(self.images.shape[-1])

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise KeyError(f"dataset has no split {name!r}; available: {sorted(self.splits)}")
        return self.splits[name]

    def inputs(self, idx: np.ndarray) -> np.ndarray:
        x = self.images[idx]
        if self.normalization is not None:
            mean, std = (np.asarray(v)[None, :, None, None] for v in self.normalization)
            x = (x - mean) / std
        return x


def search_split(dataset: Dataset, seed: int, source: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic 50/50 partition of ``source`` into (search-train, search-valid)."""
    idx = np.array(dataset.split(source), copy=True)
    np.random.default_rng(seed).shuffle(idx)
    half = len(idx) // 2
    return np.sort(idx[:half]), np.sort(idx[half:])


def iterate_batches(
    idx: np.ndarray, batch_size: int, rng: Optional[np.random.Generator] = None
) -> Iterator[np.ndarray]:
    order = np.array(idx, copy=True)
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random pad-and-crop plus horizontal flip, per image."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


# ---------------------------------------------------------------------------
# CIFAR-10 binary version
# ---------------------------------------------------------------------------

def read_cifar_batch(path, strict: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch file into (uint8 N x 3 x 32 x 32, labels)."""
    raw = Path(path).read_bytes()
    if strict and len(raw) != CIFAR_FILE_BYTES:
        raise DatasetFormatError(
            f"{path}: expected {CIFAR_FILE_BYTES} bytes, found {len(raw)}"
        )
    if len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(
            f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetFormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    pixels = records[:, 1:].reshape(-1, 3, CIFAR_HW, CIFAR_HW)
    return pixels, labels


def load_cifar10(
    dir_path,
    normalize: bool = False,
    subset: Optional[int] = None,
    seed: int = 0,
    strict: bool = True,
) -> Dataset:
    """Load the binary CIFAR-10 release from ``dir_path``.

    ``subset`` keeps a seeded random subset of that many training images (and
    the same fraction of test images) for quick runs.
    """
    d = Path(dir_path)
    missing = [f for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if not (d / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{d}: missing CIFAR-10 files {missing}")
    train = [read_cifar_batch(d / f, strict) for f in CIFAR_TRAIN_FILES]
    test_px, test_y = read_cifar_batch(d / CIFAR_TEST_FILE, strict)
    train_px = np.concatenate([p for p, _ in train])
    train_y = np.concatenate([y for _, y in train])

    if subset is not None and subset < len(train_y):
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(train_y), size=subset, replace=False))
        n_test = max(1, round(len(test_y) * subset / len(train_y)))
        keep_test = np.sort(rng.choice(len(test_y), size=n_test, replace=False))
        train_px, train_y = train_px[keep], train_y[keep]
        test_px, test_y = test_px[keep_test], test_y[keep_test]

    images = np.concatenate([train_px, test_px]).astype(np.float64) / 255.0
    labels = np.concatenate([train_y, test_y])
    n_train = len(train_y)
    splits = {"train": np.arange(n_train), "test": np.arange(n_train, len(labels))}
    logger.info("loaded CIFAR-10: %d train / %d test images", n_train, len(test_y))
    return Dataset(
        images, labels, 10, splits, name="cifar10", augment=True,
        normalization=(CIFAR_MEAN, CIFAR_STD) if normalize else None,
    )


def write_cifar_records(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write images in [0, 1] (N x 3 x 32 x 32) using the CIFAR-10 record layout."""
    if images.shape[1:] != (3, CIFAR_HW, CIFAR_HW):
        raise ValueError("CIFAR records hold 3 x 32 x 32 images")
    px = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).reshape(len(images), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], px], axis=1)
    tmp = f"{path}.tmp"
    rec.tofile(tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def class_templates(num_classes: int, hw: int, rng: np.random.Generator) -> np.ndarray:
    """One colored Gaussian blob per class, at distinct positions."""
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    templates = np.empty((num_classes, 3, hw, hw))
    margin = hw / 5.0
    for c in range(num_classes):
        cy, cx = rng.uniform(margin, hw - margin, size=2)
        sigma = rng.uniform(hw / 8.0, hw / 5.0)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        color = rng.uniform(0.2, 1.0, size=3)
        background = rng.uniform(0.05, 0.3, size=3)
        templates[c] = background[:, None, None] + (0.9 - background)[:, None, None] * color[:, None, None] * blob
    return np.clip(templates, 0.0, 1.0)


def gen_synthetic(
    num_classes: int = 10,
    n_per_class: int = 50,
    hw: int = 16,
    seed: int = 0,
    noise: float = 0.1,
    test_fraction: float = 0.2,
) -> Dataset:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    templates = class_templates(num_classes, hw, rng)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = templates[labels] + rng.normal(0.0, noise, size=(len(labels), 3, hw, hw))
    images = np.clip(images, 0.0, 1.0)

    n_test = int(round(n_per_class * test_fraction))
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in range(num_classes):
        test_mask[c * n_per_class + n_per_class - n_test:(c + 1) * n_per_class] = True
    splits = {"train": np.flatnonzero(~test_mask), "test": np.flatnonzero(test_mask)}
    return Dataset(images, labels.astype(np.int64), num_classes, splits,
                   name="synthetic", templates=templates)
