"""CIFAR-10 / CIFAR-100 binary parsing, normalization, deterministic
train/val splitting, and batch iteration.

Record layouts (bit-exact):
  CIFAR-10 : 1 label byte + 3072 pixel bytes (R plane, G plane, B plane),
             files data_batch_1..5.bin and test_batch.bin
  CIFAR-100: 1 coarse + 1 fine label byte + 3072 pixel bytes,
             files train.bin and test.bin (the fine label is used)
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .tensor import Rng

PIXELS = 3072
RECORD_SIZES = {"cifar10": 1 + PIXELS, "cifar100": 2 + PIXELS}
NUM_CLASSES = {"cifar10": 10, "cifar100": 100}

TRAIN_FILES = {
    "cifar10": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "cifar100": ["train.bin"],
}
TEST_FILES = {"cifar10": ["test_batch.bin"], "cifar100": ["test.bin"]}


class DataFormatError(Exception):
    """CIFAR binary file missing or malformed."""


@dataclass
class Dataset:
    images: np.ndarray  # [N,3,32,32] float32 in [0,1] until normalized
    labels: np.ndarray  # [N] int64
    num_classes: int
    norm_mean: np.ndarray | None = None  # per-channel, from the train split
    norm_std: np.ndarray | None = None
    normalized: bool = False

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       self.norm_mean, self.norm_std, self.normalized)


@dataclass
class BatchPlan:
    batch_size: int
    seed: int = 0
    drop_last: bool = False


def _parse_file(path: str, which: str):
    rec = RECORD_SIZES[which]
    if not os.path.exists(path):
        raise DataFormatError(f"missing file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % rec:
        raise DataFormatError(f"{path}: size {raw.size} is not a multiple of "
                              f"record size {rec}")
    recs = raw.reshape(-1, rec)
    label_col = 0 if which == "cifar10" else 1  # fine label for cifar100
    labels = recs[:, label_col].astype(np.int64)
    if labels.max(initial=0) >= NUM_CLASSES[which]:
        raise DataFormatError(f"{path}: label byte {labels.max()} out of range "
                              f"[0,{NUM_CLASSES[which]})")
    pixels = recs[:, rec - PIXELS:].reshape(-1, 3, 32, 32)
    return pixels.astype(np.float32) / 255.0, labels


def load_cifar(data_dir: str, which: str, split: str = "train") -> Dataset:
    if which not in RECORD_SIZES:
        raise ValueError(f"unknown dataset {which!r}")
    files = (TRAIN_FILES if split == "train" else TEST_FILES)[which]
    images, labels = [], []
    for fn in files:
        img, lab = _parse_file(os.path.join(data_dir, fn), which)
        images.append(img)
        labels.append(lab)
    return Dataset(np.concatenate(images), np.concatenate(labels), NUM_CLASSES[which])


def encode_record(image01: np.ndarray, label: int, which: str = "cifar10",
                  coarse_label: int = 0) -> bytes:
    """Inverse of parsing: [3,32,32] floats in [0,1] back to one binary record."""
    pix = np.round(image01 * 255.0).astype(np.uint8).reshape(-1)
    if which == "cifar10":
        return bytes([label]) + pix.tobytes()
    return bytes([coarse_label, label]) + pix.tobytes()


def compute_norm_stats(ds: Dataset):
    mean = ds.images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = ds.images.std(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    return mean, np.maximum(std, 1e-8)


def normalize(ds: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    """Per-channel standardization; applying twice is an error."""
    if ds.normalized:
        raise ValueError("dataset is already normalized")
    images = (ds.images - mean[:, None, None]) / std[:, None, None]
    return Dataset(images, ds.labels, ds.num_classes,
                   np.asarray(mean, dtype=np.float32),
                   np.asarray(std, dtype=np.float32), normalized=True)


def split_train_val(ds: Dataset, val_fraction: float, seed: int):
    """Disjoint, exhaustive, seed-deterministic split; norm stats come from
    the train part and are applied to both."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0,1), got {val_fraction}")
    if ds.normalized:
        raise ValueError("split before normalizing; stats must come from the train part")
    n = len(ds)
    perm = Rng(seed).shuffle(n)
    n_val = int(round(n * val_fraction))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    train, val = ds.subset(train_idx), ds.subset(val_idx)
    mean, std = compute_norm_stats(train)
    return normalize(train, mean, std), normalize(val, mean, std)


def epoch_order(n: int, plan: BatchPlan, epoch: int) -> np.ndarray:
    """Per-epoch permutation reseeded from (seed, epoch)."""
    mix = (plan.seed * 0x9E3779B97F4A7C15 + epoch) & ((1 << 64) - 1)
    return Rng(mix).shuffle(n)


def batches(ds: Dataset, plan: BatchPlan, epoch: int = 0, shuffle: bool = True):
    """Yield (images [B,3,32,32], labels [B]) covering each sample at most once."""
    if plan.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = epoch_order(n, plan, epoch) if shuffle else np.arange(n)
    for start in range(0, n, plan.batch_size):
        idx = order[start:start + plan.batch_size]
        if plan.drop_last and len(idx) < plan.batch_size:
            break
        yield ds.images[idx], ds.labels[idx]
