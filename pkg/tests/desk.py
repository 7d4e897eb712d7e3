"""Desk-scale non-IID task shared by the trend checks: 10 Gaussian-mixture
image classes, 10 clients holding two single-class shards each, and a
two-layer CNN that is either decomposed or monolithic."""

from fedatoms.data_partition import make_mixture_images, partition_shards, split_clients
from fedatoms.fl_core import ConvSpec, ModelSpec

NUM_CLASSES = 10
CLIENTS = 10
SHARDS_PER_CLIENT = 2
SIDE = 8
SEEDS = range(5)


def mixture_task(seed, n=1000, n_test=500, separation=2.5):
    """Train set, pooled test set, and per-client index shards."""
    train = make_mixture_images(NUM_CLASSES, 1, SIDE, n, separation, seed=seed, template_seed=1000 + seed)
    test = make_mixture_images(NUM_CLASSES, 1, SIDE, n_test, separation, seed=seed + 5000,
                               template_seed=1000 + seed)
    parts = partition_shards(train, CLIENTS, SHARDS_PER_CLIENT, seed)
    return train, test, parts


def client_splits(train, parts, seed, test_fraction=0.25):
    """Per-client (train, test) data drawn from the same two classes."""
    tr, te = split_clients(parts, test_fraction, seed)
    return [train.subset(i) for i in tr], [train.subset(i) for i in te]


def small_cnn(decomposed: bool, atoms: int = 9) -> ModelSpec:
    return ModelSpec((1, SIDE, SIDE), NUM_CLASSES,
                     (ConvSpec(1, 8, 3, atoms, 1, 1), ConvSpec(8, 16, 3, atoms, 2, 1)),
                     decomposed=decomposed)

# plain local SGD as in the local update rule; shared by every trend check
SGD = dict(batch_size=10, lr=0.05, momentum=0.0)
