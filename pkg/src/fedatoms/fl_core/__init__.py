"""Federated training: models, clients, server aggregation and the round loop."""

from .client import ClientState, constant_lr, local_train, personalized_local_step, theoretical_lr
from .federation import (
    Federation, FederationResult, FederationSettings, RoundMetrics, derived_rng, personalized_accuracy,
    run_federation,
)
from .model import ConvSpec, GlobalModel, ModelSpec, evaluate, init_params
from .server import (
    RoundPlan, Strategy, TransmissionLedger, aggregate, aggregate_decomposed, aggregate_plain,
    coefficient_sync, fast_slow_aggregate, select_clients,
)
