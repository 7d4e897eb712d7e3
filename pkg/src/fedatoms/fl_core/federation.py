"""The round loop: select, broadcast, train locally, aggregate, reconstruct."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..analysis.variance import variance_estimate
from ..errors import ConfigError, FedAtomsError, RunAborted
from .client import ClientState, constant_lr, init_local_atoms, local_train, personalized_local_step, theoretical_lr
from .model import GlobalModel, ModelSpec, evaluate, init_params
from .server import Strategy, TransmissionLedger, aggregate, select_clients, upload_payload

log = logging.getLogger(__name__)

# stream tags for derived RNGs
_INIT, _SELECT, _TRAIN, _PERSONAL = 0, 1, 2, 3


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed by (seed, *key); scheduling order never matters."""
    return np.random.default_rng([int(seed), *(int(k) for k in key)])


@dataclass
class FederationSettings:
    rounds: int = 10
    fraction: float = 0.1
    epochs: int = 1
    batch_size: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    mu_prox: float = 0.0
    strategy: Strategy = Strategy.DECOMPOSED
    beta: float = 1.0
    personal_head: bool = False
    personal_epochs: int | None = None
    lr_schedule: str = "constant"  # or "theoretical"
    lr_mu: float = 1.0
    lr_gamma: float = 8.0
    variance_repeats: int = 0
    workers: int = 1
    check_identity: bool = False
    record_params: bool = False
    record_time: bool = False

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if self.rounds < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds >= 0, epochs >= 1 and batch_size >= 1 required")
        if not 0 < self.beta <= 1:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if self.variance_repeats == 1 or self.variance_repeats < 0:
            raise ConfigError("variance_repeats must be 0 (off) or >= 2")

    def schedule(self) -> Callable[[int], float]:
        if self.lr_schedule == "theoretical":
            return theoretical_lr(self.lr_mu, self.lr_gamma)
        if self.lr_schedule == "constant":
            return constant_lr(self.lr)
        raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class RoundMetrics:
    round: int
    strategy: str
    train_loss: float
    test_acc: float
    variance: float
    params_tx_cum: int
    ms: float

    FIELDS = ("round", "strategy", "train_loss", "test_acc", "variance", "params_tx_cum", "ms")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class FederationResult:
    model: GlobalModel
    metrics: list
    ledger: TransmissionLedger
    clients: list
    trajectory: list = field(default_factory=list)


def make_clients(datasets, model: GlobalModel | None = None, strategy: Strategy | None = None,
                 personal_head: bool = False) -> list:
    clients = [ClientState(i, np.asarray(x), np.asarray(y)) for i, (x, y) in enumerate(datasets)]
    if strategy is Strategy.PERSONALIZED:
        clients = [init_local_atoms(c, model, personal_head) for c in clients]
    return clients


class Federation:
    """Holds the evolving global model and client states for one run."""

    def __init__(self, spec: ModelSpec, datasets, settings: FederationSettings, seed: int,
                 test=None, params: dict | None = None):
        if settings.strategy is not Strategy.PLAIN and not spec.decomposed:
            raise ConfigError(f"strategy {settings.strategy.value!r} requires decomposed conv layers")
        self.spec = spec
        self.settings = settings
        self.seed = int(seed)
        self.test = test
        if params is None:
            params = init_params(spec, derived_rng(seed, _INIT))
        self.model = GlobalModel(spec, params, 0)
        self.clients = make_clients(datasets, self.model, settings.strategy, settings.personal_head)
        self.ledger = TransmissionLedger()
        self.lr = settings.schedule()
        self._train_x = np.concatenate([c.x for c in self.clients if c.n_k]) if self.clients else None
        self._train_y = np.concatenate([c.y for c in self.clients if c.n_k]) if self.clients else None

    def _map(self, fn, items):
        if self.settings.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.settings.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def _train_round(self, model: GlobalModel, repeat: int):
        s = self.settings
        plan = select_clients(len(self.clients), s.fraction, derived_rng(self.seed, _SELECT, model.round, repeat),
                              model.round, s.beta)

        def train(cid):
            rng = derived_rng(self.seed, _TRAIN, cid, model.round, repeat)
            return local_train(self.clients[cid], model, s.epochs, s.batch_size, self.lr,
                               s.momentum, s.mu_prox, rng)

        trained = self._map(train, list(plan.selected))
        for c in trained:
            if c.status != "ok":
                log.warning("round %d: client %d %s", model.round, c.id, c.status)
        trained = [c for c in trained if c.status == "ok"]
        if not trained:
            raise FedAtomsError(f"round {model.round}: no client produced an update")
        payloads = [upload_payload(c.params, s.strategy, plan.sync_coefficients) for c in trained]
        new = aggregate(s.strategy, model, [(c.n_k, p) for c, p in zip(trained, payloads)],
                        s.beta, s.check_identity and repeat == 0)
        return plan, trained, payloads, new

    def _personalize(self, model: GlobalModel, ids) -> None:
        s = self.settings
        epochs = s.personal_epochs or s.epochs

        def step(cid):
            rng = derived_rng(self.seed, _PERSONAL, cid, model.round)
            return personalized_local_step(self.clients[cid], model, epochs, s.batch_size, self.lr,
                                           s.momentum, rng)

        for c in self._map(step, list(ids)):
            self.clients[c.id] = c

    def step(self) -> RoundMetrics:
        s = self.settings
        start = time.perf_counter()
        model = self.model
        plan, trained, payloads, new = self._train_round(model, 0)
        self.ledger.record(payloads, model.params)
        if s.strategy is Strategy.PERSONALIZED:
            # private atoms adapt against the coefficients just broadcast, never uploaded
            self._personalize(model, [c.id for c in trained])

        variance = float("nan")
        if s.variance_repeats:
            filters = [np.concatenate([f.ravel() for f in new.filters()])]
            for r in range(1, s.variance_repeats):
                filters.append(np.concatenate([f.ravel() for f in self._train_round(model, r)[3].filters()]))
            variance = variance_estimate(filters)

        self.model = new
        train_loss = evaluate(self.spec, new.params, self._train_x, self._train_y)[0]
        test_acc = evaluate(self.spec, new.params, *self.test)[1] if self.test is not None else float("nan")
        ms = (time.perf_counter() - start) * 1000.0 if s.record_time else 0.0
        return RoundMetrics(new.round, s.strategy.value, train_loss, test_acc, variance,
                            self.ledger.total_uploaded, ms)


def run_federation(spec: ModelSpec, datasets, settings: FederationSettings, seed: int, test=None,
                   params: dict | None = None,
                   on_round: Callable[[RoundMetrics, GlobalModel], None] | None = None
                   ) -> FederationResult:
    """Run ``settings.rounds`` rounds and return the final model plus per-round metrics.

    ``datasets`` is one ``(x, y)`` pair per client. ``on_round`` sees every
    metrics record, with the new global model, as soon as it exists. On failure a ``RunAborted`` carrying
    the completed rounds is raised.
    """
    fed = Federation(spec, datasets, settings, seed, test, params)
    metrics = []
    trajectory = [np.concatenate([v.ravel() for v in fed.model.params.values()])] if settings.record_params else []
    for t in range(settings.rounds):
        try:
            record = fed.step()
        except Exception as exc:
            raise RunAborted(f"round {t} failed: {exc}", metrics) from exc
        metrics.append(record)
        if settings.record_params:
            trajectory.append(np.concatenate([v.ravel() for v in fed.model.params.values()]))
        if on_round is not None:
            on_round(record, fed.model)
    if settings.strategy is Strategy.PERSONALIZED and settings.rounds:
        # bring every client's private atoms up to date with the final coefficients
        fed._personalize(fed.model, [c.id for c in fed.clients if c.n_k])
    return FederationResult(fed.model, metrics, fed.ledger, fed.clients, trajectory)


def personalized_accuracy(result: FederationResult, client_tests) -> tuple:
    """Per-client accuracy of (personal model, shared global model) on each client's test split."""
    personal, shared = [], []
    for client, (x, y) in zip(result.clients, client_tests):
        if len(y) == 0:
            continue
        shared.append(evaluate(result.model.spec, result.model.params, x, y)[1])
        personal.append(evaluate(result.model.spec, client.personal_params(result.model.params), x, y)[1])
    return np.array(personal), np.array(shared)
