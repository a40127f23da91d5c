"""Datasets and the Dirichlet non-IID partitioner.

Two sources: the CIFAR-10 binary batches (bit-exact record format: 1 label
byte followed by 3072 pixel bytes, 1024 per channel in R, G, B order, each
channel row-major 32x32) and a synthetic Gaussian-blob generator that lets
full federated runs finish in minutes.

The partitioner draws one class-proportion vector per client from
Dir(alpha * p), p being the empirical class prior, and realizes it with
largest-remainder rounding. Train indices are globally disjoint across
clients; each client's test indices are drawn from the leftover pool with
the same proportions, so test sets never overlap any train set but may
overlap each other when the pool is small.
"""

from __future__ import annotations

import os

from dataclasses import dataclass

import numpy as np

CIFAR_RECORD_BYTES = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
# Repo-default channel statistics applied after scaling pixels to [0, 1].
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, C, H, W) or (N, D), float64
    labels: np.ndarray  # (N,), int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise ValueError("dataset must contain at least one sample")
        if len(self.labels) != len(self.inputs):
            raise ValueError(f"{len(self.labels)} labels for {len(self.inputs)} inputs")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.inputs)


@dataclass
class Partition:
    clients: list[tuple[np.ndarray, np.ndarray]]  # (train indices, test indices)
    alpha: float
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.clients)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def gen_synthetic(num_classes: int, dim: int, n_per_class: int,
                  class_separation: float, seed: int, noise: float = 1.0) -> Dataset:
    """Gaussian blobs: one unit-direction mean per class scaled by
    class_separation, isotropic noise around it."""
    if min(num_classes, dim, n_per_class) <= 0:
        raise ValueError("num_classes, dim and n_per_class must be positive")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    means *= class_separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    inputs = means[labels] + noise * rng.normal(size=(len(labels), dim))
    return Dataset(inputs, labels.astype(np.int64), num_classes)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------

def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch file into raw uint8 (images (N,3,32,32), labels)."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"CIFAR-10 batch file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % CIFAR_RECORD_BYTES:
        offset = len(raw) - len(raw) % CIFAR_RECORD_BYTES
        raise ValueError(f"truncated CIFAR-10 record in {path} at byte offset {offset}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ValueError(f"label byte {labels.max()} out of range 0-9 in {path}")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def normalize_cifar(images_u8: np.ndarray) -> np.ndarray:
    """Scale uint8 pixels to [0, 1], then standardize per channel."""
    x = images_u8.astype(np.float64) / 255.0
    return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def load_cifar10_file(path) -> Dataset:
    images, labels = read_cifar_batch(path)
    return Dataset(normalize_cifar(images), labels, 10)


def load_cifar10(directory) -> Dataset:
    """Load all six batch files from a directory into one pooled dataset."""
    parts = []
    for fname in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]:
        parts.append(read_cifar_batch(os.path.join(directory, fname)))
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(normalize_cifar(images), labels, 10)


# ---------------------------------------------------------------------------
# Dirichlet partition
# ---------------------------------------------------------------------------

def largest_remainder(q: np.ndarray, total: int) -> np.ndarray:
    """Round total*q to integers that sum exactly to total (ties to lower index)."""
    exact = q * total
    counts = np.floor(exact).astype(int)
    remainder = exact - counts
    deficit = total - counts.sum()
    if deficit > 0:
        order = np.argsort(-remainder, kind="stable")
        counts[order[:deficit]] += 1
    return counts


def _allocate_counts(q: np.ndarray, total: int, avail: np.ndarray) -> np.ndarray:
    """Largest-remainder counts for q, capped by per-class availability.

    When a class runs short, the shortfall is redistributed over the classes
    that still have samples (re-normalizing q there, or availability-weighted
    if q gives them no mass). Raises once the pool is globally exhausted.
    """
    counts = np.zeros(len(q), dtype=int)
    remaining = total
    while remaining > 0:
        headroom = avail - counts
        active = headroom > 0
        if not active.any():
            raise ValueError(
                f"sample pool exhausted: {remaining} draws cannot be satisfied")
        qa = np.where(active, q, 0.0)
        if qa.sum() <= 0.0:
            qa = np.where(active, headroom.astype(float), 0.0)
        qa = qa / qa.sum()
        want = largest_remainder(qa, remaining)
        take = np.minimum(want, headroom)
        counts += take
        remaining -= int(take.sum())
    return counts


def dirichlet_partition(dataset: Dataset, n_clients: int, alpha: float,
                        samples_per_client: int, test_per_client: int,
                        seed: int) -> Partition:
    """Per-client low-data splits with Dir(alpha * p) class proportions."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    needed = n_clients * (samples_per_client + test_per_client)
    if needed > len(dataset):
        raise ValueError(
            f"partition needs {needed} samples but dataset has {len(dataset)}")

    rng = np.random.default_rng(seed)
    labels = dataset.labels
    num_classes = dataset.num_classes
    class_counts = np.bincount(labels, minlength=num_classes)
    prior = class_counts / class_counts.sum()

    qs = rng.dirichlet(alpha * prior, size=n_clients)
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]
    cursors = np.zeros(num_classes, dtype=int)

    train_splits = []
    for i in range(n_clients):
        avail = np.array([len(pools[c]) - cursors[c] for c in range(num_classes)])
        counts = _allocate_counts(qs[i], samples_per_client, avail)
        idx = np.concatenate([
            pools[c][cursors[c]:cursors[c] + counts[c]] for c in range(num_classes)
        ])
        cursors += counts
        train_splits.append(np.sort(idx))

    leftovers = [pools[c][cursors[c]:] for c in range(num_classes)]
    leftover_sizes = np.array([len(v) for v in leftovers])

    clients = []
    for i in range(n_clients):
        counts = _allocate_counts(qs[i], test_per_client, leftover_sizes)
        idx = np.concatenate([
            rng.choice(leftovers[c], size=counts[c], replace=False)
            for c in range(num_classes) if counts[c] > 0
        ]) if counts.sum() else np.array([], dtype=int)
        clients.append((train_splits[i], np.sort(idx)))
    return Partition(clients, alpha, seed)


def client_class_histogram(dataset: Dataset, indices: np.ndarray) -> np.ndarray:
    counts = np.bincount(dataset.labels[indices], minlength=dataset.num_classes)
    return counts / max(counts.sum(), 1)


def client_label_entropy(dataset: Dataset, indices: np.ndarray) -> float:
    """Shannon entropy (nats) of one client's class distribution."""
    h = client_class_histogram(dataset, indices)
    nz = h[h > 0]
    return float(-(nz * np.log(nz)).sum())
