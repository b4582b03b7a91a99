"""Federated round loop: broadcast, local SGD, aggregation, metrics.

The engine is deterministic by construction.  All randomness flows from
one experiment seed through tagged streams (data, partition, model init,
and one stream per (round, client) pair), client results are reduced in
client id order, and local training is a pure function of the broadcast
snapshot, so running clients on 1 or many worker threads produces
bit-identical metrics.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .aggregation import (
    ClientUpdate,
    KuramotoMode,
    ScaffoldState,
    SyncDiagnostics,
    fedavg_aggregate,
    fedprox_gradient_adjustment,
    kappa_schedule,
    kuramoto_aggregate,
    scaffold_server_step,
)
from .objectives import NoiseModel, SoftmaxClassifier

__all__ = [
    "AggregatorSpec",
    "ClientProblem",
    "ConfigError",
    "DatasetSpec",
    "EngineState",
    "FederatedConfig",
    "LocalOutcome",
    "ModelSpec",
    "RoundRecord",
    "build_problem",
    "cosine_lr",
    "gradient_diversity",
    "local_train",
    "loss_variance",
    "run_experiment",
    "run_federated",
    "run_round",
]

# stream tags keep the seeded rng domains disjoint
_TAG_DATA = 11
_TAG_PARTITION = 13
_TAG_INIT = 14
_TAG_TRAIN = 15

AGGREGATOR_KINDS = ("fedavg", "kuramoto", "scaffold", "fedprox")


class ConfigError(ValueError):
    """An experiment configuration failed validation."""


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "fedavg"
    kappa0: float = 0.1
    beta: float = 0.0
    mode: KuramotoMode = field(default_factory=KuramotoMode)
    mu_prox: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigError(f"unknown aggregator kind {self.kind!r}")
        if self.kind == "kuramoto" and self.kappa0 <= 0.0:
            raise ConfigError("kappa0 must be > 0")
        if self.beta < 0.0:
            raise ConfigError("beta must be >= 0")
        if self.mu_prox < 0.0:
            raise ConfigError("mu_prox must be >= 0")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"          # synthetic | idx
    classes: int = 10
    per_class: int = 100
    dim: int = 32
    spread: float = 0.35
    test_per_class: int = 20
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    subset: int = 0                  # 0 means use everything


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"                # mlp | logreg
    hidden: tuple = (64, 64)


@dataclass(frozen=True)
class FederatedConfig:
    """Full experiment description; see README for the file format."""

    num_clients: int = 10
    rounds: int = 100
    local_epochs: int = 2
    batch_size: int = 64
    lr0: float = 0.01
    momentum: float = 0.9
    lr_schedule: str = "cosine"      # cosine | constant
    lr_restart_each_round: bool = False
    shards_per_client: int = 3
    seed: int = 1
    threads: int = 1
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    noise: NoiseModel = field(default_factory=lambda: NoiseModel("minibatch"))

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr0 <= 0.0:
            raise ConfigError("lr0 must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.shards_per_client < 1:
            raise ConfigError("shards_per_client must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass(frozen=True)
class ClientProblem:
    """One client's objective and private data.

    ``features is None`` marks an analytic objective (quadratic) trained
    full-batch, one step per local epoch.
    """

    client_id: int
    objective: object
    features: np.ndarray | None
    labels: np.ndarray | None
    noise: NoiseModel
    p_weight: float
    num_samples: int

    def full_batch(self):
        if self.features is None:
            return None
        return self.features, self.labels


@dataclass(frozen=True)
class LocalOutcome:
    update: ClientUpdate
    mean_gradient: np.ndarray
    broadcast_digest: str


@dataclass
class EngineState:
    w: np.ndarray
    scaffold: ScaffoldState | None = None
    round_idx: int = 0


@dataclass(frozen=True)
class RoundRecord:
    """Metrics for one completed round, evaluated on the new global model."""

    round: int
    client_losses: tuple
    mean_train_loss: float
    loss_variance: float
    test_accuracy: float | None
    gamma: float
    gamma_weighted: float
    kappa_t: float | None
    sync: SyncDiagnostics | None
    wall_time: float


def cosine_lr(lr0: float, step: int, total_steps: int) -> float:
    """Half-cosine ramp from ``lr0`` at step 0 down to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _steps_per_epoch(client: ClientProblem, cfg: FederatedConfig) -> int:
    if client.features is None or client.noise.mode != "minibatch":
        return 1
    return max(1, math.ceil(client.num_samples / cfg.batch_size))


def _epoch_batches(client: ClientProblem, cfg: FederatedConfig,
                   rng: np.random.Generator):
    """Batches for one local epoch: sampled without replacement."""
    if client.features is None:
        yield None
        return
    if client.noise.mode != "minibatch":
        yield client.features, client.labels
        return
    perm = rng.permutation(client.num_samples)
    for start in range(0, client.num_samples, cfg.batch_size):
        idx = perm[start:start + cfg.batch_size]
        yield client.features[idx], client.labels[idx]


def _step_lr(cfg: FederatedConfig, round_idx: int, epoch: int,
             step_in_epoch: int, steps_per_epoch: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr0
    if cfg.lr_restart_each_round:
        step = epoch * steps_per_epoch + step_in_epoch
        total = cfg.local_epochs * steps_per_epoch
    else:
        step = (round_idx * cfg.local_epochs + epoch) * steps_per_epoch \
            + step_in_epoch
        total = cfg.rounds * cfg.local_epochs * steps_per_epoch
    return cosine_lr(cfg.lr0, step, total)


def local_train(w_global: np.ndarray, client: ClientProblem,
                cfg: FederatedConfig, round_idx: int,
                scaffold_correction: np.ndarray | None = None) -> LocalOutcome:
    """E local epochs of minibatch SGD with momentum from the broadcast model.

    The momentum buffer resets at round start (clients are stateless
    between rounds).  The returned mean gradient is the average of the raw
    per-step gradient estimates, which SCAFFOLD uses to refresh its client
    control.
    """
    digest = hashlib.sha256(w_global.tobytes()).hexdigest()
    rng = np.random.default_rng(
        [cfg.seed, _TAG_TRAIN, round_idx, client.client_id])
    w = w_global.copy()
    velocity = np.zeros_like(w)
    grad_sum = np.zeros_like(w)
    steps = 0
    spe = _steps_per_epoch(client, cfg)
    for epoch in range(cfg.local_epochs):
        for b, batch in enumerate(_epoch_batches(client, cfg, rng)):
            g = client.noise.perturb(client.objective.gradient(w, batch), rng)
            grad_sum += g
            steps += 1
            g_eff = g
            if scaffold_correction is not None:
                g_eff = g_eff + scaffold_correction
            if cfg.aggregator.kind == "fedprox":
                g_eff = fedprox_gradient_adjustment(
                    g_eff, w, w_global, cfg.aggregator.mu_prox)
            eta = _step_lr(cfg, round_idx, epoch, b, spe)
            velocity = cfg.momentum * velocity + g_eff
            w = w - eta * velocity
    update = ClientUpdate(client.client_id, w - w_global, client.p_weight,
                          client.num_samples)
    return LocalOutcome(update, grad_sum / steps, digest)


def loss_variance(per_client_losses) -> float:
    """Population variance (divide by K) of per-client train losses."""
    losses = np.asarray(per_client_losses, dtype=np.float64)
    if losses.size < 1:
        raise ValueError("need at least one client loss")
    return float(np.mean((losses - losses.mean()) ** 2))


def gradient_diversity(w: np.ndarray, clients, p, rho=None):
    """Drift metrics from exact full-batch gradients.

    Returns ``(gamma, gamma_weighted)`` where gamma uses the
    data-proportional weights linearly and gamma_weighted uses the given
    squared per-client weights (falling back to ``p`` when ``rho`` is
    None).  gamma is nonnegative up to rounding by Jensen's inequality.
    """
    p = np.asarray(p, dtype=np.float64)
    rho = p if rho is None else np.asarray(rho, dtype=np.float64)
    grads = [c.objective.gradient(w, c.full_batch()) for c in clients]
    norms_sq = np.array([float(g @ g) for g in grads])
    global_grad = np.zeros_like(grads[0])
    for pk, g in zip(p, grads):
        global_grad += pk * g
    global_sq = float(global_grad @ global_grad)
    gamma = float(np.sum(p * norms_sq) - global_sq)
    gamma_weighted = float(np.sum(rho ** 2 * norms_sq) - global_sq)
    return gamma, gamma_weighted


def run_round(state: EngineState, clients, cfg: FederatedConfig,
              test_set=None, pool: ThreadPoolExecutor | None = None):
    """Run one full round and evaluate metrics on the post-aggregation model."""
    t_start = time.perf_counter()
    w = state.w
    broadcast_digest = hashlib.sha256(w.tobytes()).hexdigest()
    round_idx = state.round_idx

    corrections = [None] * len(clients)
    if cfg.aggregator.kind == "scaffold":
        sc = state.scaffold
        corrections = [sc.server_control - sc.client_controls[c.client_id]
                       for c in clients]

    def _train(args):
        client, corr = args
        return local_train(w, client, cfg, round_idx, corr)

    jobs = list(zip(clients, corrections))
    if pool is not None:
        outcomes = list(pool.map(_train, jobs))
    else:
        outcomes = [_train(job) for job in jobs]

    if any(o.broadcast_digest != broadcast_digest for o in outcomes):
        raise RuntimeError("broadcast mismatch: clients saw different models")

    updates = [o.update for o in outcomes]
    kappa_t: float | None = None
    sync: SyncDiagnostics | None = None
    new_scaffold = state.scaffold

    agg = cfg.aggregator
    if agg.kind == "kuramoto":
        kappa_t = kappa_schedule(agg.kappa0, agg.beta, round_idx)
        new_w, sync = kuramoto_aggregate(w, updates, agg.mode, kappa_t)
    elif agg.kind == "scaffold":
        control_deltas = [o.mean_gradient -
                          state.scaffold.client_controls[o.update.client_id]
                          for o in outcomes]
        new_w, new_scaffold = scaffold_server_step(
            state.scaffold, w, updates, control_deltas)
    else:  # fedavg, fedprox
        new_w = fedavg_aggregate(w, updates)

    losses = tuple(float(c.objective.value(new_w, c.full_batch()))
                   for c in clients)
    var = loss_variance(losses)
    acc = None
    if test_set is not None:
        acc = clients[0].objective.accuracy(new_w, test_set[0], test_set[1])
    p = [c.p_weight for c in clients]
    rho = sync.rho if sync is not None else None
    gamma, gamma_weighted = gradient_diversity(new_w, clients, p, rho)

    record = RoundRecord(
        round=round_idx + 1,
        client_losses=losses,
        mean_train_loss=float(np.mean(losses)),
        loss_variance=var,
        test_accuracy=acc,
        gamma=gamma,
        gamma_weighted=gamma_weighted,
        kappa_t=kappa_t,
        sync=sync,
        wall_time=time.perf_counter() - t_start,
    )
    new_state = EngineState(w=new_w, scaffold=new_scaffold,
                            round_idx=round_idx + 1)
    return new_state, record


def run_federated(clients, w0: np.ndarray, cfg: FederatedConfig,
                  test_set=None, progress=None):
    """Drive ``cfg.rounds`` rounds from ``w0``; returns (records, final state)."""
    cfg.validate()
    clients = sorted(clients, key=lambda c: c.client_id)
    total_p = sum(c.p_weight for c in clients)
    if abs(total_p - 1.0) > 1e-6:
        raise ConfigError(f"client weights sum to {total_p!r}, expected 1")

    state = EngineState(w=np.array(w0, dtype=np.float64, copy=True))
    if cfg.aggregator.kind == "scaffold":
        state.scaffold = ScaffoldState.zeros(state.w.shape[0], len(clients))

    records = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for _ in range(cfg.rounds):
            state, record = run_round(state, clients, cfg, test_set, pool)
            records.append(record)
            if progress is not None:
                progress(record)
    finally:
        if pool is not None:
            pool.shutdown()
    return records, state


def build_problem(cfg: FederatedConfig):
    """Materialize dataset, partition, model, and clients from a config.

    Returns ``(clients, test_set, model, w0, partition, train_ds)``.
    """
    cfg.validate()
    ds_spec = cfg.dataset
    if ds_spec.kind == "synthetic":
        # draw train and test from one call so they share class centers
        block = ds_spec.per_class + ds_spec.test_per_class
        full = data_mod.synthesize_clusters(
            ds_spec.classes, block, ds_spec.dim, ds_spec.spread,
            seed=[cfg.seed, _TAG_DATA])
        offsets = np.arange(ds_spec.classes) * block
        train_idx = (offsets[:, None]
                     + np.arange(ds_spec.per_class)[None, :]).ravel()
        test_idx = (offsets[:, None] + ds_spec.per_class
                    + np.arange(ds_spec.test_per_class)[None, :]).ravel()
        train_ds = full.subset(train_idx)
        test_ds = full.subset(test_idx)
    elif ds_spec.kind == "idx":
        train_ds = data_mod.load_idx(ds_spec.train_images, ds_spec.train_labels)
        if ds_spec.subset:
            train_ds = train_ds.subset(np.arange(min(ds_spec.subset,
                                                     len(train_ds))))
        test_ds = data_mod.load_idx(ds_spec.test_images, ds_spec.test_labels)
    else:
        raise ConfigError(f"unknown dataset kind {ds_spec.kind!r}")

    total_shards = cfg.num_clients * cfg.shards_per_client
    if total_shards > len(train_ds):
        raise ConfigError(
            f"K*s = {total_shards} shards exceed the {len(train_ds)} "
            "training samples"
        )
    partition = data_mod.label_shard_partition(
        train_ds, cfg.num_clients, cfg.shards_per_client,
        seed=[cfg.seed, _TAG_PARTITION])

    if cfg.model.kind == "mlp":
        sizes = [train_ds.dim, *cfg.model.hidden, train_ds.num_classes]
    elif cfg.model.kind == "logreg":
        sizes = [train_ds.dim, train_ds.num_classes]
    else:
        raise ConfigError(f"unknown model kind {cfg.model.kind!r}")
    model = SoftmaxClassifier(sizes)
    w0 = model.init_params([cfg.seed, _TAG_INIT])

    total = sum(len(idx) for idx in partition.assignments)
    clients = []
    for k in range(cfg.num_clients):
        idx = partition.assignments[k]
        clients.append(ClientProblem(
            client_id=k,
            objective=model,
            features=train_ds.features[idx],
            labels=train_ds.labels[idx],
            noise=cfg.noise,
            p_weight=len(idx) / total,
            num_samples=len(idx),
        ))
    test_set = (test_ds.features, test_ds.labels)
    return clients, test_set, model, w0, partition, train_ds


def run_experiment(cfg: FederatedConfig, progress=None):
    """Config-to-records pipeline; deterministic for a fixed seed."""
    clients, test_set, _, w0, _, _ = build_problem(cfg)
    return run_federated(clients, w0, cfg, test_set, progress)
