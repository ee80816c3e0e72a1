"""CIFAR-10 binary ingestion, batching with train-time augmentation, and a
synthetic separable dataset for tests.

CIFAR-10 binary record layout: 1 label byte, then 3072 pixel bytes stored
as the full red plane, green plane, blue plane, each row-major 32x32.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError
from .tensor import Tensor

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)

TRAIN_FILES = ["data_batch_%d.bin" % i for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


@dataclass
class Dataset:
    images: np.ndarray  # (count, 3, 32, 32) float32
    labels: np.ndarray  # (count,) int64
    split: str = ""

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None):
        return Dataset(self.images[idx], self.labels[idx],
                       self.split if split is None else split)


def read_cifar_file(path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise DataFormatError(
            "%s: size %d is not a multiple of %d-byte records"
            % (path, raw.size, RECORD_BYTES))
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataFormatError(
            "%s: label byte %d > 9 at record %d" % (path, labels[bad[0]], bad[0]))
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / 255.0
    return images, labels


def standardize(images):
    return (images - CIFAR_MEAN[:, None, None]) / CIFAR_STD[:, None, None]


def load_cifar10(directory):
    """Load the 5 train batches + test batch; returns (train, test) Datasets
    scaled to [0,1] then standardized with the published per-channel stats."""
    def load_files(names, split):
        parts = []
        for name in names:
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise DataFormatError("missing CIFAR-10 batch file: %s" % path)
            parts.append(read_cifar_file(path))
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        return Dataset(standardize(images), labels, split)

    return load_files(TRAIN_FILES, "train"), load_files(TEST_FILES, "test")


def _augment_batch(images, rng):
    """Pad-4 reflect + random 32x32 crop + horizontal flip with p=0.5."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (4, 4), (4, 4)), mode="reflect")
    out = np.empty_like(images)
    offs = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def batch_iter(ds, batch, shuffle_seed=None, augment=False):
    """Seeded shuffled minibatches; the last partial batch is yielded."""
    if batch < 1:
        raise ValueError("batch size must be >= 1")
    n = len(ds)
    order = np.arange(n)
    rng = np.random.default_rng(shuffle_seed)
    if shuffle_seed is not None:
        rng.shuffle(order)
    for start in range(0, n, batch):
        idx = order[start:start + batch]
        images = ds.images[idx]
        if augment:
            images = _augment_batch(images, rng)
        yield Tensor(images), ds.labels[idx]


def synthetic_dataset(n, classes, seed):
    """Class-conditional Gaussian blobs in pixel space, linearly separable
    enough that a linear probe exceeds 90%. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    means = 0.5 + 0.35 * rng.choice([-1.0, 1.0], size=(classes,) + IMAGE_SHAPE) \
        * (rng.random((classes,) + IMAGE_SHAPE) > 0.5)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    noise = rng.normal(0.0, 0.08, size=(n,) + IMAGE_SHAPE)
    images = np.clip(means[labels] + noise, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), "synthetic")
