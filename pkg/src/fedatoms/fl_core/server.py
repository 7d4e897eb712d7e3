"""Server-side logic: client sampling, aggregation strategies, transmission ledger."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ..decomposition import expand_aggregation
from ..errors import ContractError, DimensionError
from .model import GlobalModel, param_kind

IDENTITY_TOL = 1e-10


class Strategy(str, enum.Enum):
    PLAIN = "plain"
    DECOMPOSED = "decomposed"
    FAST_SLOW = "fast_slow"
    PERSONALIZED = "personalized"


def coefficient_sync(beta: float, t: int) -> bool:
    """True when ``beta * t`` is a natural number (t = 0 included)."""
    if not 0 < beta <= 1:
        raise ContractError(f"beta must lie in (0, 1], got {beta}")
    return (Fraction(beta).limit_denominator(10**6) * t).denominator == 1


@dataclass(frozen=True)
class RoundPlan:
    round: int
    selected: tuple
    sync_coefficients: bool = True

    @property
    def m(self) -> int:
        return len(self.selected)


def num_selected(num_clients: int, fraction: float) -> int:
    return max(int(math.floor(fraction * num_clients + 1e-9)), 1)


def select_clients(num_clients: int, fraction: float, rng: np.random.Generator,
                   round_index: int = 0, beta: float = 1.0) -> RoundPlan:
    """Uniformly sample ``max(floor(C*M), 1)`` distinct clients, returned in id order."""
    if not 0 < fraction <= 1:
        raise ContractError(f"client fraction must lie in (0, 1], got {fraction}")
    m = num_selected(num_clients, fraction)
    chosen = rng.choice(num_clients, size=m, replace=False)
    return RoundPlan(round_index, tuple(int(i) for i in np.sort(chosen)), coefficient_sync(beta, round_index))


def client_weights(sample_counts) -> np.ndarray:
    counts = np.asarray(sample_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts < 1):
        raise ContractError("aggregation needs at least one client, each with n_k >= 1")
    return counts / counts.sum()


def _weighted_sum(weights, tensors):
    # fixed left-to-right reduction in client order
    acc = weights[0] * tensors[0]
    for p, t in zip(weights[1:], tensors[1:]):
        acc = acc + p * t
    return acc


def _check_shapes(updates):
    ref = updates[0][1]
    for _, params in updates[1:]:
        if params.keys() != ref.keys() or any(params[k].shape != ref[k].shape for k in ref):
            raise DimensionError("client parameter shapes differ")


def aggregate_plain(model: GlobalModel, updates) -> GlobalModel:
    """Sample-weighted average of every uploaded parameter. ``updates`` = [(n_k, params)].

    Parameters absent from the uploads keep their current global value.
    """
    updates = list(updates)
    _check_shapes(updates)
    p = client_weights([n for n, _ in updates])
    params = {name: value.copy() for name, value in model.params.items()}
    for name in updates[0][1]:
        params[name] = _weighted_sum(p, [u[name] for _, u in updates])
    return GlobalModel(model.spec, params, model.round + 1, dict(model.meta))


def check_latent_identity(model: GlobalModel, updates, tol: float = IDENTITY_TOL) -> int:
    """Verify product-of-averages == clients + latent clients for every layer.

    Returns the number of latent terms per layer (m^2 - m).
    """
    p = client_weights([n for n, _ in updates])
    n_latent = 0
    for i in range(len(model.spec.conv)):
        rows = [(w, u[f"conv{i}.alpha"], u[f"conv{i}.atoms"]) for w, (_, u) in zip(p, updates)]
        product, summed, latent = expand_aggregation(rows)
        diff = float(np.max(np.abs(product - summed)))
        if diff > tol:
            raise ContractError(f"conv{i}: latent-client expansion off by {diff:.3e}")
        n_latent = len(latent)
    return n_latent


def aggregate_decomposed(model: GlobalModel, updates, check_identity: bool = False) -> GlobalModel:
    """Average coefficients, atoms and head separately; filters are their product."""
    updates = list(updates)
    if not model.spec.decomposed:
        raise ContractError("decomposed aggregation on a model without decomposed layers")
    new = aggregate_plain(model, updates)
    if check_identity:
        new.meta["latent_terms"] = check_latent_identity(model, updates)
    return new


def upload_payload(params: dict, strategy: Strategy, sync_coefficients: bool = True) -> dict:
    """What a client sends back: everything, minus coefficients on fast/slow off-rounds."""
    if strategy is Strategy.FAST_SLOW and not sync_coefficients:
        return {k: v for k, v in params.items() if not k.endswith(".alpha")}
    return dict(params)


def fast_slow_aggregate(model: GlobalModel, updates, beta: float, check_identity: bool = False) -> GlobalModel:
    """Atoms and head every round; coefficients only when ``beta * t`` is an integer.

    Off-round uploads may include coefficients; they are ignored.
    """
    sync = coefficient_sync(beta, model.round)
    updates = [(n, upload_payload(u, Strategy.FAST_SLOW, sync)) for n, u in updates]
    if sync:
        new = aggregate_decomposed(model, updates, check_identity=check_identity)
    else:
        new = aggregate_plain(model, updates)
    new.meta["coefficient_sync"] = sync
    return new


def aggregate(strategy: Strategy, model: GlobalModel, updates, beta: float = 1.0,
              check_identity: bool = False) -> GlobalModel:
    if strategy is Strategy.PLAIN:
        return aggregate_plain(model, updates)
    if strategy is Strategy.FAST_SLOW:
        return fast_slow_aggregate(model, updates, beta, check_identity)
    # personalized: private atoms never reach the server, so the shared parts use the decomposed rule
    return aggregate_decomposed(model, updates, check_identity)


@dataclass
class TransmissionLedger:
    """Parameter counts moved between server and clients, per round and per group."""
    upload: list = field(default_factory=list)     # per round: {group: count}
    download: list = field(default_factory=list)
    uploaded_names: set = field(default_factory=set)

    def record(self, payloads, global_params: dict) -> None:
        """Log one round: the client upload dicts and the broadcast model."""
        up: dict = {}
        for payload in payloads:
            for name, value in payload.items():
                kind = param_kind(name)
                up[kind] = up.get(kind, 0) + int(value.size)
                self.uploaded_names.add(name)
        down: dict = {}
        for name, value in global_params.items():
            kind = param_kind(name)
            down[kind] = down.get(kind, 0) + int(value.size) * len(payloads)
        self.upload.append(up)
        self.download.append(down)

    def uploaded_per_round(self) -> list:
        return [sum(r.values()) for r in self.upload]

    @property
    def total_uploaded(self) -> int:
        return sum(self.uploaded_per_round())

    def cumulative_uploaded(self) -> list:
        return list(np.cumsum(self.uploaded_per_round(), dtype=np.int64).tolist())
