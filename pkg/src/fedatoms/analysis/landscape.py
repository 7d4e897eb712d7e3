"""Loss surface of the two-parameter linear model on the 2-D Gaussian task,
plus the client-count sweep that shows averaging over more clients settles
closer to the optimum."""

from __future__ import annotations

import csv
import io

import numpy as np

from ..data_partition import Dataset, make_synthetic_2d
from ..errors import ContractError
from ..fl_core.federation import FederationSettings, derived_rng, run_federation
from ..fl_core.model import ModelSpec
from ..fl_core.server import Strategy
from .variance import variance_estimate

LINEAR_2D = ModelSpec(input_shape=(2,), num_outputs=1, decomposed=False, head_bias=False, loss="mse")


def _features(ds: Dataset) -> np.ndarray:
    x = np.asarray(ds.samples, dtype=np.float64).reshape(len(ds.labels), -1)
    if x.shape[1] != 2:
        raise ContractError(f"loss grid needs exactly 2 parameters, data has {x.shape[1]} features")
    return x


def least_squares_optimum(ds: Dataset) -> np.ndarray:
    """Minimizer of mean (x . w - y)^2 via the normal equations."""
    x = _features(ds)
    return np.linalg.solve(x.T @ x, x.T @ ds.labels.astype(np.float64))


def loss_grid(ds: Dataset, w_range=((-1.0, 1.0), (-1.0, 1.0)), resolution: int = 50):
    """MSE at the centers of a ``resolution x resolution`` grid of (w1, w2) cells.

    Returns ``(w1_centers, w2_centers, losses)`` with ``losses[i, j]`` at
    ``(w1_centers[i], w2_centers[j])``.
    """
    if resolution < 1:
        raise ContractError("resolution must be >= 1")
    x = _features(ds)
    y = ds.labels.astype(np.float64)
    n = len(y)
    A, b, c = x.T @ x / n, x.T @ y / n, float(y @ y / n)
    (lo1, hi1), (lo2, hi2) = w_range
    w1 = lo1 + (np.arange(resolution) + 0.5) * (hi1 - lo1) / resolution
    w2 = lo2 + (np.arange(resolution) + 0.5) * (hi2 - lo2) / resolution
    g1, g2 = np.meshgrid(w1, w2, indexing="ij")
    losses = (A[0, 0] * g1 * g1 + 2.0 * A[0, 1] * g1 * g2 + A[1, 1] * g2 * g2
              - 2.0 * (b[0] * g1 + b[1] * g2) + c)
    return w1, w2, losses


def grid_csv(w1, w2, losses) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "loss"])
    for i, a in enumerate(w1):
        for j, b in enumerate(w2):
            writer.writerow([repr(float(a)), repr(float(b)), repr(float(losses[i, j]))])
    return buf.getvalue()


def trajectory_overlay(result) -> list:
    """Global (w1, w2) after each round, starting with the initial model."""
    if not result.trajectory:
        raise ContractError("run was not recorded; set record_params=True")
    points = []
    for vec in result.trajectory:
        if vec.size != 2:
            raise ContractError(f"trajectory needs a 2-parameter model, got {vec.size}")
        points.append((float(vec[0]), float(vec[1])))
    return points


def synthetic_client_sweep(client_counts=(5, 25), seeds=range(20), rounds: int = 5,
                           n_per_class: int = 2, epochs: int = 2, lr: float = 0.05,
                           batch_size: int = 1, start=(-1.0, 1.0)) -> dict:
    """Federate the 2-D task with different client counts over many seeds.

    Every client holds its own ``n_per_class`` samples per class and all
    clients join every round. Reports, per client count, the mean distance
    of the averaged model to the pooled least-squares optimum and the
    cross-seed variance of the final parameters.
    """
    settings = FederationSettings(rounds=rounds, fraction=1.0, epochs=epochs, batch_size=batch_size,
                                  lr=lr, momentum=0.0, strategy=Strategy.PLAIN, record_params=True)
    out = {}
    for m in client_counts:
        distances, finals, trajectories = [], [], []
        for seed in seeds:
            rng = derived_rng(seed, 100, m)
            shards = [make_synthetic_2d(n_per_class, seed=int(rng.integers(2**31))) for _ in range(m)]
            pooled = Dataset(np.concatenate([s.samples for s in shards]),
                             np.concatenate([s.labels for s in shards]), 2)
            optimum = least_squares_optimum(pooled)
            params = {"head.weight": np.array(start, dtype=np.float64).reshape(2, 1)}
            result = run_federation(LINEAR_2D, [(s.samples, s.labels) for s in shards], settings,
                                    seed, params=params)
            final = result.model.params["head.weight"].ravel()
            distances.append(float(np.linalg.norm(final - optimum)))
            finals.append(final)
            trajectories.append(trajectory_overlay(result))
        out[m] = {"mean_distance": float(np.mean(distances)),
                  "param_variance": variance_estimate(finals),
                  "distances": distances, "trajectories": trajectories}
    return out
