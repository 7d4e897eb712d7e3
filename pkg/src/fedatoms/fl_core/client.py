"""Client-side training: plain local SGD, FedProx, and local-atom personalization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np

from ..errors import ConfigError, ContractError
from ..tensor_nn import sgd_step
from .model import GlobalModel, ModelSpec, loss_and_grad

LearningRate = Union[float, Callable[[int], float]]


def constant_lr(lr: float) -> Callable[[int], float]:
    return lambda t: lr


def theoretical_lr(mu: float, gamma: float) -> Callable[[int], float]:
    """Decaying schedule ``2 / (mu * (gamma + t))`` used by the convergence bound."""
    if mu <= 0 or gamma <= 0:
        raise ContractError("theoretical schedule needs mu > 0 and gamma > 0")
    return lambda t: 2.0 / (mu * (gamma + t))


def _rate(lr: LearningRate, t: int) -> float:
    return float(lr(t)) if callable(lr) else float(lr)


@dataclass
class ClientState:
    id: int
    x: np.ndarray
    y: np.ndarray
    params: dict | None = None
    # personalization: private atoms per layer ("conv{i}.atoms") and optional private head
    local_atoms: dict | None = None
    local_head: dict | None = None
    velocities: dict = field(default_factory=dict)
    status: str = "idle"
    last_loss: float = float("nan")

    @property
    def n_k(self) -> int:
        return len(self.y)

    def personal_params(self, global_params: dict) -> dict:
        """Global coefficients combined with this client's private atoms (and head)."""
        if self.local_atoms is None:
            raise ContractError(f"client {self.id} holds no local atoms")
        params = dict(global_params)
        params.update(self.local_atoms)
        if self.local_head is not None:
            params.update(self.local_head)
        return params


def init_local_atoms(client: ClientState, model: GlobalModel, personal_head: bool = False) -> ClientState:
    if not model.spec.decomposed:
        raise ConfigError("personalization requires decomposed conv layers")
    atoms = {k: v.copy() for k, v in model.params.items() if k.endswith(".atoms")}
    head = {k: v.copy() for k, v in model.params.items() if k.startswith("head.")} if personal_head else None
    return replace(client, local_atoms=atoms, local_head=head)


def run_sgd(spec: ModelSpec, params: dict, trainable, x, y, epochs: int, batch_size: int,
            lr: float, momentum: float, rng: np.random.Generator,
            mu_prox: float = 0.0, anchor: dict | None = None):
    """Mini-batch SGD over ``trainable`` names; the rest of ``params`` stays fixed.

    Returns ``(params, velocities, mean_loss_of_last_epoch)``. The final short
    batch of each epoch is kept.
    """
    params = {k: v.copy() for k, v in params.items()}
    velocities = {k: np.zeros_like(params[k]) for k in trainable}
    n = len(y)
    last = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grad(spec, params, x[idx], y[idx])
            total += loss * len(idx)
            for name in trainable:
                g = grads[name]
                if mu_prox > 0.0:
                    g = g + mu_prox * (params[name] - anchor[name])
                params[name], velocities[name] = sgd_step(params[name], g, lr, momentum, velocities[name])
        last = total / n
    return params, velocities, last


def local_train(client: ClientState, model: GlobalModel, epochs: int, batch_size: int,
                lr: LearningRate, momentum: float = 0.0, mu_prox: float = 0.0,
                rng: np.random.Generator | None = None) -> ClientState:
    """Start from the global parameters and run ``epochs`` of local SGD.

    ``mu_prox > 0`` adds the FedProx term ``mu_prox * (w - w_global)`` to every
    gradient. A client without data comes back with ``status == "skipped"``.
    """
    if epochs < 1:
        raise ContractError("epochs must be >= 1")
    if mu_prox < 0:
        raise ContractError("mu_prox must be >= 0")
    if client.n_k == 0:
        return replace(client, params=None, status="skipped: empty local dataset")
    rng = rng if rng is not None else np.random.default_rng(client.id)
    params, velocities, loss = run_sgd(
        model.spec, model.params, list(model.params), client.x, client.y, epochs, batch_size,
        _rate(lr, model.round), momentum, rng, mu_prox, model.params)
    return replace(client, params=params, velocities=velocities, status="ok", last_loss=loss)


def personalized_local_step(client: ClientState, model: GlobalModel, epochs: int, batch_size: int,
                            lr: LearningRate, momentum: float = 0.0,
                            rng: np.random.Generator | None = None) -> ClientState:
    """Train the client's private atoms against the frozen global coefficients.

    Only ``local_atoms`` change (plus ``local_head`` when the client keeps a
    private head). Nothing here is ever uploaded.
    """
    if not model.spec.decomposed:
        raise ConfigError("personalization requires decomposed conv layers")
    if client.local_atoms is None:
        client = init_local_atoms(client, model)
    if client.n_k == 0:
        return replace(client, status="skipped: empty local dataset")
    rng = rng if rng is not None else np.random.default_rng(client.id)
    trainable = list(client.local_atoms)
    if client.local_head is not None:
        trainable += list(client.local_head)
    params, _, loss = run_sgd(
        model.spec, client.personal_params(model.params), trainable, client.x, client.y,
        epochs, batch_size, _rate(lr, model.round), momentum, rng)
    atoms = {k: params[k] for k in client.local_atoms}
    head = {k: params[k] for k in client.local_head} if client.local_head is not None else None
    return replace(client, local_atoms=atoms, local_head=head, status="ok", last_loss=loss)
