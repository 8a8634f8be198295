"""CIFAR-10 ingestion (binary format), preprocessing, batching, synthetic data.

The binary layout is one 3073-byte record per sample: 1 label byte followed
by 3072 pixel bytes (1024 red, 1024 green, 1024 blue, each plane row-major
32x32).  Pixels are scaled to [0, 1] by /255 at load time.
"""

import os
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"
RECORD_BYTES = 3073
NUM_CLASSES = 10


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, 32, 32) float64
    labels: np.ndarray  # (N,) int64
    split: str

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("Dataset: image/label count mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValueError("Dataset: label out of range [0, 10)")

    def __len__(self) -> int:
        return self.images.shape[0]

    def head(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,)


def parse_batch_file(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch file into (images scaled to [0,1], labels)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: length {len(raw)} is not a positive multiple of {RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def _resolve_dir(path: str) -> str:
    # accept either the batch directory itself or its parent
    nested = os.path.join(path, "cifar-10-batches-bin")
    if not os.path.exists(os.path.join(path, TEST_FILE)) and os.path.isdir(nested):
        return nested
    return path


def load_cifar10(path: str) -> Tuple[Dataset, Dataset]:
    """Load the five train batch files and the test batch file under path."""
    path = _resolve_dir(path)
    missing = [f for f in TRAIN_FILES + [TEST_FILE] if not os.path.exists(os.path.join(path, f))]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 files missing under {path}: {', '.join(missing)}")
    parts = [parse_batch_file(os.path.join(path, f)) for f in TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]),
                    np.concatenate([p[1] for p in parts]), split="train")
    test_images, test_labels = parse_batch_file(os.path.join(path, TEST_FILE))
    return train, Dataset(test_images, test_labels, split="test")


def compute_stats(train: Dataset) -> ChannelStats:
    if len(train) == 0:
        raise ValueError("compute_stats: empty dataset")
    mean = train.images.mean(axis=(0, 2, 3))
    std = train.images.std(axis=(0, 2, 3))
    if np.any(std == 0.0):
        raise ValueError("compute_stats: zero std in some channel")
    return ChannelStats(mean=mean, std=std)


def normalize(ds: Dataset, stats: ChannelStats) -> Dataset:
    if np.any(stats.std <= 0.0):
        raise ValueError("normalize: std must be positive")
    shifted = (ds.images - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return Dataset(shifted, ds.labels.copy(), ds.split)


def batches(ds: Dataset, batch_size: int, shuffle: bool = False,
            seed=0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ceil(N / batch_size) batches; every sample appears exactly once.

    Shuffling draws one full permutation from the seed; the last partial
    batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batches: batch_size must be >= 1")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def num_batches(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def synthetic_dataset(n: int, classes: int = NUM_CLASSES, seed=0) -> Dataset:
    """Class-conditional Gaussian images: per-class prototype plus mild noise.

    Labels are assigned round-robin so classes stay balanced; everything is
    drawn from the one seed, so equal seeds give identical tensors.
    """
    if classes < 1 or classes > NUM_CLASSES:
        raise ValueError(f"synthetic_dataset: classes must be in [1, {NUM_CLASSES}]")
    if n < classes:
        raise ValueError("synthetic_dataset: need at least one sample per class")
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(0.0, 1.0, size=(classes, 3, 32, 32))
    labels = np.arange(n, dtype=np.int64) % classes
    images = prototypes[labels] + 0.25 * rng.normal(size=(n, 3, 32, 32))
    return Dataset(images, labels, split="synthetic")
