"""Round orchestration for FedAvg, DP-FedAvg and DPxFin."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dpxfin import nn
from dpxfin.data import TransactionDataset, partition_dirichlet, partition_iid
from dpxfin.dp import (STREAM_NOISE, STREAM_PROBE, STREAM_SELECT, STREAM_TRAIN, DpConfig,
                       effective_sigma, privatize_update, stream_seed)
from dpxfin.metrics import ConfusionCounts, accuracy, classification_report
from dpxfin.reputation import ReputationLedger, run_reputation_round, temp_aggregate

log = logging.getLogger(__name__)

METHODS = ("FedAvg", "DP-FedAvg", "DPxFin")
SERVER_ID = 1_000_000  # stream id for server-side randomness (init, selection)


@dataclass(frozen=True)
class FederationConfig:
    method: str = "DPxFin"
    n_clients: int = 5
    participation_fraction: float = 1.0
    rounds: int = 20
    dp: DpConfig = field(default_factory=DpConfig)
    hidden_dims: tuple[int, ...] = (64, 32)
    epochs: int = 1
    batch_size: int = 64
    lr: float = 0.01
    experiment_seed: int = 0
    partition: str = "dirichlet"
    alpha: float = 1.0
    local_test_fraction: float = 0.1
    # pins uniform aggregation weights and lambda = 1 on the DPxFin path
    force_uniform_reputation: bool = False
    store_updates: bool = False
    probe_batch_size: int = 64

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 0 < self.participation_fraction <= 1:
            raise ValueError("participation_fraction must lie in (0, 1]")
        if self.partition not in ("iid", "dirichlet"):
            raise ValueError(f"partition must be 'iid' or 'dirichlet', got {self.partition!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")

    @property
    def is_private(self) -> bool:
        return self.method != "FedAvg"


@dataclass
class ClientState:
    client_id: int
    train: TransactionDataset
    test: TransactionDataset
    lam: float = 1.0


@dataclass(frozen=True, eq=False)
class UpdateProbe:
    """A single-step update one client would reveal on one batch, kept for the attack harness."""

    round_index: int
    client_id: int
    method: str
    sigma: float
    clip_norm: float
    lr: float
    layer_dims: tuple[int, ...]
    global_params: np.ndarray
    observed: np.ndarray
    batch: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round_index: int
    method: str
    weighted_accuracy: float
    client_ids: tuple[int, ...]
    local_accuracies: tuple[float, ...]
    test_counts: tuple[int, ...]
    confusion: ConfusionCounts
    participants: tuple[int, ...]
    lambdas: tuple[float, ...]
    sigmas: tuple[float, ...]
    ledger: ReputationLedger | None = None
    probes: tuple[UpdateProbe, ...] = ()


def select_clients(client_ids: Sequence[int], fraction: float, rng) -> list[int]:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    ids = list(client_ids)
    k = math.ceil(round(fraction * len(ids), 9))
    if k >= len(ids):
        return ids
    rng = np.random.default_rng(rng)
    chosen = rng.choice(len(ids), size=k, replace=False)
    return [ids[i] for i in sorted(chosen)]


def weighted_accuracy(local_accuracies, sample_counts) -> float:
    acc = np.asarray(local_accuracies, dtype=np.float64)
    n = np.asarray(sample_counts, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("no client accuracies given")
    if acc.size != n.size:
        raise ValueError("accuracies and counts differ in length")
    if (n < 1).any():
        raise ValueError("sample counts must be >= 1")
    return float(np.dot(acc, n) / n.sum())


def build_clients(train: TransactionDataset, config: FederationConfig) -> list[ClientState]:
    seed = stream_seed(config.experiment_seed, SERVER_ID, 0, STREAM_SELECT)
    part_seed, *split_seeds = seed.spawn(config.n_clients + 1)
    if config.partition == "iid":
        plan = partition_iid(train, config.n_clients, part_seed)
    else:
        plan = partition_dirichlet(train, config.n_clients, config.alpha, part_seed)
    clients = []
    for cid, (rows, s) in enumerate(zip(plan.shards(), split_seeds)):
        if rows.size < 2:
            raise ValueError(f"client {cid} holds {rows.size} row(s); needs >= 2 for a local test split")
        perm = np.random.default_rng(s).permutation(rows)
        n_test = min(max(1, int(round(config.local_test_fraction * rows.size))), rows.size - 1)
        clients.append(ClientState(cid, train.take(np.sort(perm[n_test:])), train.take(np.sort(perm[:n_test]))))
    return clients


def initial_model(n_features: int, config: FederationConfig) -> nn.MlpModel:
    dims = (n_features, *config.hidden_dims, 2)
    return nn.init_model(dims, stream_seed(config.experiment_seed, SERVER_ID, 0, STREAM_TRAIN))


def _probe(global_model: nn.MlpModel, client: ClientState, config: FederationConfig,
           round_index: int, sigma: float) -> UpdateProbe:
    rng = np.random.default_rng(stream_seed(config.experiment_seed, client.client_id, round_index, STREAM_PROBE))
    n = len(client.train)
    rows = rng.permutation(n)[: min(config.probe_batch_size, n)]
    batch, labels = client.train.features[rows], client.train.labels[rows]
    clean = -config.lr * nn.backward(global_model, batch, labels)
    if config.is_private:
        observed = privatize_update(clean, DpConfig(config.dp.clip_norm, sigma), 1.0, 1, rng)
    else:
        observed = clean
    return UpdateProbe(round_index, client.client_id, config.method, sigma if config.is_private else 0.0,
                       config.dp.clip_norm, config.lr, global_model.layer_dims, global_model.params.copy(), observed, batch, labels)


def run_round(global_model: nn.MlpModel, clients: list[ClientState], config: FederationConfig,
              round_index: int) -> tuple[nn.MlpModel, RoundRecord]:
    """One server round: local training, privatization, aggregation, client-side evaluation."""
    if round_index < 1:
        raise ValueError("round_index starts at 1")
    by_id = {c.client_id: c for c in clients}
    selector = np.random.default_rng(stream_seed(config.experiment_seed, SERVER_ID, round_index, STREAM_SELECT))
    participants = select_clients(sorted(by_id), config.participation_fraction, selector)

    models, lambdas, sigmas, probes = [], [], [], []
    for cid in participants:
        client = by_id[cid]
        delta = nn.train_local(global_model, client.train, config.epochs, config.batch_size, config.lr,
                               stream_seed(config.experiment_seed, cid, round_index, STREAM_TRAIN))
        lam = client.lam if config.method == "DPxFin" else 1.0
        if config.is_private:
            sigma = effective_sigma(lam, config.dp.base_sigma, round_index)
            noise_rng = np.random.default_rng(stream_seed(config.experiment_seed, cid, round_index, STREAM_NOISE))
            delta = privatize_update(delta, config.dp, lam, round_index, noise_rng)
        else:
            sigma = 0.0
        models.append(global_model.params + delta)
        lambdas.append(lam)
        sigmas.append(sigma)
        if config.store_updates:
            probes.append(_probe(global_model, client, config, round_index, sigma))

    ledger = None
    if config.method == "DPxFin":
        new_params, ledger = run_reputation_round(models, round_index, participants,
                                                  force_uniform=config.force_uniform_reputation)
        for cid, lam in zip(participants, ledger.lambdas):
            by_id[cid].lam = float(lam)
    else:
        new_params = temp_aggregate(models)
    new_global = global_model.with_params(new_params)

    ids = sorted(by_id)
    counts = [nn.evaluate(new_global, by_id[c].test) for c in ids]
    accs = [accuracy(c) for c in counts]
    n_test = [len(by_id[c].test) for c in ids]
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    record = RoundRecord(
        round_index=round_index,
        method=config.method,
        weighted_accuracy=weighted_accuracy(accs, n_test),
        client_ids=tuple(ids),
        local_accuracies=tuple(accs),
        test_counts=tuple(n_test),
        confusion=total,
        participants=tuple(participants),
        lambdas=tuple(lambdas),
        sigmas=tuple(sigmas),
        ledger=ledger,
        probes=tuple(probes),
    )
    return new_global, record


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    config: FederationConfig
    best_model: nn.MlpModel
    best_round: int
    records: list[RoundRecord]
    final_metrics: dict | None


def run_experiment(config: FederationConfig, train: TransactionDataset,
                   holdout: TransactionDataset | None = None,
                   on_round: Callable[[RoundRecord], None] | None = None) -> ExperimentResult:
    """Run ``config.rounds`` rounds and keep the global model with the best weighted accuracy.

    The best model is scored on ``holdout`` (when given) for the final report.
    """
    clients = build_clients(train, config)
    model = initial_model(train.features.shape[1], config)
    best_model, best_acc, best_round = model, -1.0, 0
    records = []
    for t in range(1, config.rounds + 1):
        model, record = run_round(model, clients, config, t)
        records.append(record)
        log.info("%s round %d: weighted accuracy %.4f", config.method, t, record.weighted_accuracy)
        if on_round is not None:
            on_round(record)
        if record.weighted_accuracy >= best_acc:
            best_model, best_acc, best_round = model, record.weighted_accuracy, t
    final = None
    if holdout is not None:
        final = classification_report(nn.evaluate(best_model, holdout))
        final["best_round"] = best_round
        final["best_weighted_accuracy"] = best_acc
    return ExperimentResult(config, best_model, best_round, records, final)
