"""Datasets and non-IID client partitions."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, PartitionError
from .tensor_nn import as_tensor


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.labels) < 1 or len(self.samples) != len(self.labels):
            raise ContractError("dataset needs N >= 1 samples with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> tuple:
        idx = np.asarray(indices, dtype=np.int64)
        return self.samples[idx], self.labels[idx]


def partition_iid(ds: Dataset, num_clients: int, seed: int) -> list:
    order = np.random.default_rng(seed).permutation(len(ds))
    return [np.sort(part) for part in np.array_split(order, num_clients)]


def partition_shards(ds: Dataset, num_clients: int, shards_per_client: int, seed: int) -> list:
    """Split into ``M * K'`` single-class shards of ``N // (M * K')`` samples;
    each client receives ``K'`` of them at random.

    Samples that do not fill a whole shard are dropped.
    """
    n_shards = num_clients * shards_per_client
    if n_shards < 1:
        raise PartitionError("need at least one client and one shard per client")
    size = len(ds) // n_shards
    if size < 1:
        raise PartitionError(f"{len(ds)} samples cannot fill {n_shards} shards")
    rng = np.random.default_rng(seed)
    per_class = []
    for k in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == k))
        per_class.append([idx[i * size:(i + 1) * size] for i in range(len(idx) // size)])
    available = sum(len(s) for s in per_class)
    if available < n_shards:
        counts = np.bincount(ds.labels, minlength=ds.num_classes)
        worst = int(np.argmin([len(s) for s in per_class]))
        raise PartitionError(
            f"class {worst} has {counts[worst]} samples; shards of {size} yield only "
            f"{available} of the {n_shards} required")
    # round-robin over classes keeps the shard pool class-balanced when there is surplus
    shards = []
    depth = 0
    while len(shards) < n_shards:
        for k in range(ds.num_classes):
            if depth < len(per_class[k]) and len(shards) < n_shards:
                shards.append(per_class[k][depth])
        depth += 1
    order = rng.permutation(n_shards)
    return [np.sort(np.concatenate([shards[j] for j in order[c * shards_per_client:(c + 1) * shards_per_client]]))
            for c in range(num_clients)]


def partition_dirichlet(ds: Dataset, num_clients: int, concentration: float, seed: int) -> list:
    """Per class, split samples across clients by Dirichlet(concentration) proportions.

    Empty clients are repaired by moving one sample from the largest client.
    """
    if concentration <= 0:
        raise ContractError("concentration must be positive")
    if len(ds) < num_clients:
        raise PartitionError(f"{len(ds)} samples cannot cover {num_clients} clients")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in range(num_clients)]
    for k in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == k))
        if idx.size == 0:
            continue
        props = rng.dirichlet(np.full(num_clients, float(concentration)))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
        for c, chunk in enumerate(np.split(idx, cuts)):
            parts[c].extend(chunk.tolist())
    while True:
        sizes = [len(p) for p in parts]
        empty = [c for c, s in enumerate(sizes) if s == 0]
        if not empty:
            break
        donor = int(np.argmax(sizes))
        parts[empty[0]].append(parts[donor].pop())
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def split_clients(parts, test_fraction: float, seed: int):
    """Split every client's index set into (train, test) parts, same label mix."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for idx in parts:
        idx = rng.permutation(idx)
        n_test = int(round(test_fraction * len(idx)))
        if len(idx) > 1:
            n_test = min(max(n_test, 1), len(idx) - 1)
        test.append(np.sort(idx[:n_test]))
        train.append(np.sort(idx[n_test:]))
    return train, test


def partition_stats(ds: Dataset, parts) -> list:
    return [{"client": c, "n": int(len(idx)),
             "class_counts": np.bincount(ds.labels[idx], minlength=ds.num_classes).tolist()}
            for c, idx in enumerate(parts)]


POSITIVE_MEAN = (2.0, 2.0)
NEGATIVE_MEAN = (-2.0, -2.0)


def make_synthetic_2d(n_per_class: int, seed: int, cov=None) -> Dataset:
    """Two Gaussian classes at +-[2, 2]; label 1 for the positive class, 0 otherwise."""
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    cov = np.eye(2) if cov is None else np.asarray(cov, dtype=np.float64)
    rng = np.random.default_rng(seed)
    pos = rng.multivariate_normal(POSITIVE_MEAN, cov, size=n_per_class)
    neg = rng.multivariate_normal(NEGATIVE_MEAN, cov, size=n_per_class)
    x = np.vstack([pos, neg])
    y = np.concatenate([np.ones(n_per_class, dtype=np.int64), np.zeros(n_per_class, dtype=np.int64)])
    order = rng.permutation(2 * n_per_class)
    return Dataset(x[order], y[order], 2)


def class_templates(num_classes: int, channels: int, side: int, rng: np.random.Generator,
                    blobs: int = 3) -> np.ndarray:
    """Unit-norm class prototypes built from a few signed Gaussian blobs per channel."""
    grid = np.arange(side)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    templates = np.zeros((num_classes, channels, side, side))
    for k in range(num_classes):
        for c in range(channels):
            for _ in range(blobs):
                cy, cx = rng.uniform(0, side - 1, size=2)
                width = rng.uniform(0.8, 0.25 * side + 0.8)
                sign = rng.choice([-1.0, 1.0])
                templates[k, c] += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        templates[k] /= np.linalg.norm(templates[k])
    return templates


def make_mixture_images(num_classes: int, channels: int, side: int, n: int, separation: float,
                        seed: int, template_seed: int | None = None) -> Dataset:
    """Images = ``separation`` * class prototype + unit Gaussian pixel noise.

    Prototypes have unit norm, so ``separation`` is the distance of each class
    mean from the origin in noise-standard-deviation units. Classes are
    balanced (``n`` is rounded down to a multiple of ``num_classes``).
    ``template_seed`` fixes the prototypes independently of the noise, so
    train and test draws can share classes.
    """
    if num_classes < 2:
        raise ContractError("need at least two classes")
    per_class = n // num_classes
    if per_class < 1:
        raise ContractError(f"n={n} is too small for {num_classes} classes")
    templates = class_templates(num_classes, channels, side,
                                np.random.default_rng(seed if template_seed is None else template_seed))
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.standard_normal((labels.size, channels, side, side))
    x = separation * templates[labels] + noise
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], num_classes)


def load_csv(path, label_column: str = "label") -> Dataset:
    """Tabular data: header row, a ``label`` column, all other columns numeric."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or label_column not in header:
            raise ContractError(f"{path}: missing header or {label_column!r} column")
        li = header.index(label_column)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                labels.append(int(row[li]))
                feats.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError as exc:
                raise ContractError(f"{path}:{lineno}: {exc}") from None
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise ContractError(f"{path}: no data rows")
    return Dataset(as_tensor(feats, str(path)), y, int(y.max()) + 1)
