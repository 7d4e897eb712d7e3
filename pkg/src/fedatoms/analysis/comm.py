"""Communication accounting for full-model vs fast/slow (atoms every round,
coefficients every 1/beta rounds) transmission."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..fl_core.model import ModelSpec, param_kind
from ..fl_core.server import Strategy, coefficient_sync


def parameter_groups(spec: ModelSpec) -> dict:
    """Parameter count per transmission group (coefficients / atoms / filters / head)."""
    groups: dict = {}
    for name, shape in spec.param_shapes().items():
        kind = param_kind(name)
        groups[kind] = groups.get(kind, 0) + int(np.prod(shape))
    return groups


@dataclass
class CommLedger:
    upload: list = field(default_factory=list)    # per round {group: count}
    download: list = field(default_factory=list)

    def uploaded_per_round(self) -> list:
        return [sum(r.values()) for r in self.upload]

    def cumulative_uploaded(self) -> list:
        return np.cumsum(self.uploaded_per_round(), dtype=np.int64).tolist()

    @property
    def total_uploaded(self) -> int:
        return int(sum(self.uploaded_per_round()))

    @property
    def total_downloaded(self) -> int:
        return int(sum(sum(r.values()) for r in self.download))

    def breakdown(self) -> dict:
        totals: dict = {}
        for r in self.upload:
            for k, v in r.items():
                totals[k] = totals.get(k, 0) + v
        return totals


def reduction_rate(spec: ModelSpec, beta: float) -> float:
    """(beta * full + (1 - beta) * (atoms + head)) / full, where ``full`` is everything."""
    groups = parameter_groups(spec)
    full = sum(groups.values())
    light = full - groups.get("coefficients", 0)
    return (beta * full + (1.0 - beta) * light) / full


def comm_cost(spec: ModelSpec, strategy: Strategy | str, beta: float = 1.0, rounds: int = 1,
              clients_per_round: int = 1):
    """Exact per-round upload/download counts and the asymptotic reduction rate.

    Uploads skip the coefficients on fast/slow off-rounds. Downloads always
    carry the whole model because a newly sampled client may hold stale
    coefficients.
    """
    strategy = Strategy(strategy)
    groups = parameter_groups(spec)
    ledger = CommLedger()
    for t in range(rounds):
        up = dict(groups)
        if strategy is Strategy.FAST_SLOW and not coefficient_sync(beta, t):
            up.pop("coefficients", None)
        ledger.upload.append({k: v * clients_per_round for k, v in up.items()})
        ledger.download.append({k: v * clients_per_round for k, v in groups.items()})
    rate = reduction_rate(spec, beta) if strategy is Strategy.FAST_SLOW else 1.0
    return ledger, rate
