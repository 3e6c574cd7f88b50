"""Federated round loop: party sampling, local training, aggregation.

Algorithms share one local SGD loop. fedavg trains on the plain loss,
fedprox adds a proximal pull toward the round's global model, scaffold
corrects each gradient with server/client control variates, and fednova
only changes the server-side combination (local-step-count normalization).

Determinism: every random choice is drawn from a stream addressed by
(master_seed, purpose, round, party), so local trainings may run on any
thread schedule and still produce bit-identical results. Aggregation always
sums in ascending party id order.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng
from .compensated import combine_updates
from .datasets import LabeledDataset
from .errors import ConfigError, NumericError, ProtocolError
from .nn import Batch, MlpArch, ParamVector, backward, init_mlp, predict_accuracy, sgd_momentum_step, zeros_like
from .partition import PartitionSpec, PartyView, build_views

ALGORITHMS = ("fedavg", "fedprox", "scaffold", "fednova")

BYTES_PER_COORD = 8  # float64 on the wire


@dataclass(frozen=True)
class FedRunConfig:
    """Hyperparameters of one federation run."""

    algorithm: str
    rounds: int = 50
    n_parties: int = 10
    sample_fraction: float = 1.0
    local_epochs: int = 10
    batch_size: int = 64
    local_lr: float = 0.01
    momentum: float = 0.9
    server_lr: float = 1.0
    prox_mu: float = 0.0
    scaffold_c_option: str = "ii"
    master_seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(
                f"unknown algorithm {self.algorithm!r}, expected one of {ALGORITHMS}"
            )
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.n_parties < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("n_parties, local_epochs and batch_size must be >= 1")
        if not self.local_lr > 0 or not self.server_lr > 0:
            raise ConfigError("learning rates must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.prox_mu < 0:
            raise ConfigError(f"prox_mu must be >= 0, got {self.prox_mu}")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError(
                f"sample_fraction must be in (0, 1], got {self.sample_fraction}"
            )
        if self.sample_fraction * self.n_parties < 1.0:
            raise ConfigError("sample_fraction * n_parties must be >= 1")
        if self.scaffold_c_option not in ("i", "ii"):
            raise ConfigError(
                f"scaffold_c_option must be 'i' or 'ii', got {self.scaffold_c_option!r}"
            )
        if self.master_seed < 0:
            raise ConfigError("master_seed must be non-negative")


@dataclass(frozen=True)
class GlobalState:
    """Server state: round counter, global model, control variate (scaffold)."""

    round: int
    params: ParamVector
    control: ParamVector | None = None


@dataclass(frozen=True)
class LocalUpdate:
    """What a party reports back after local training.

    delta is global-minus-final (w_t - w_final); final_params rides along so
    the server can aggregate without re-deriving it from the rounded delta.
    """

    party_id: int
    delta: ParamVector
    tau: int
    n_samples: int
    train_loss: float
    final_params: ParamVector
    delta_control: ParamVector | None = None
    diverged: bool = False


@dataclass
class ClientState:
    """Per-party persistent state; control is scaffold's c_i, zero at start."""

    party_id: int
    view: PartyView
    control: ParamVector | None = None


@dataclass(frozen=True)
class RoundRecord:
    """One evaluated round; round 0 is the untrained model."""

    round: int
    test_accuracy: float
    mean_train_loss: float | None
    bytes: int
    wall_ms: int
    diverged: bool


class MlpObjective:
    """Bundles the model family local training optimizes.

    Any object with the same four methods can drive the engine, which is how
    tests exercise the update rules on hand-checkable scalar objectives.
    """

    def __init__(self, arch: MlpArch):
        self.arch = arch

    def init_params(self, seed: int) -> ParamVector:
        return init_mlp(self.arch, seed)

    def loss_grad(self, params, features, labels, prox_mu=0.0, prox_anchor=None):
        batch = Batch(features, labels)
        return backward(params, self.arch, batch, prox_mu, prox_anchor)

    def full_grad(self, params, features, labels) -> ParamVector:
        return self.loss_grad(params, features, labels)[1]

    def accuracy(self, params, dataset) -> float:
        return predict_accuracy(params, self.arch, dataset)


def sample_parties(
    n_parties: int, fraction: float, round_idx: int, master_seed: int
) -> list[int]:
    """Uniform without-replacement sample of round(fraction * N) party ids, sorted."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    size = int(round(fraction * n_parties))
    size = max(1, min(size, n_parties))
    if size == n_parties:
        return list(range(n_parties))
    generator = rng.stream(master_seed, rng.TAG_SAMPLING, round_idx)
    return sorted(int(p) for p in generator.choice(n_parties, size=size, replace=False))


def _epoch_batches(generator, n_samples: int, batch_size: int):
    perm = generator.permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        yield perm[start : start + batch_size]


def _local_loop(w_start, view, cfg, round_idx, objective, prox_mu=0.0, grad_hook=None):
    """Shared minibatch loop. grad_hook maps each raw gradient before the
    momentum step (scaffold's control correction); returns the last finite
    model if a step goes non-finite."""
    generator = rng.stream(cfg.master_seed, rng.TAG_LOCAL, round_idx, view.party_id)
    params = w_start
    velocity = zeros_like(w_start)
    anchor = w_start if prox_mu > 0 else None
    tau = 0
    losses = []
    diverged = False
    for _ in range(cfg.local_epochs):
        for batch_idx in _epoch_batches(generator, view.n_samples, cfg.batch_size):
            try:
                loss, grad = objective.loss_grad(
                    params,
                    view.features[batch_idx],
                    view.labels[batch_idx],
                    prox_mu,
                    anchor,
                )
                if not np.isfinite(loss):
                    raise NumericError("non-finite loss")
                if grad_hook is not None:
                    grad = grad_hook(grad)
                params, velocity = sgd_momentum_step(
                    params, grad, velocity, cfg.local_lr, cfg.momentum
                )
            except NumericError:
                # Abort with the last finite model; the caller flags the record.
                diverged = True
                break
            losses.append(loss)
            tau += 1
        if diverged:
            break
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return params, max(tau, 1), mean_loss, diverged


def local_train_sgd(
    w_t: ParamVector,
    view: PartyView,
    cfg: FedRunConfig,
    prox_mu: float,
    round_idx: int,
    objective,
) -> LocalUpdate:
    """Local epochs of minibatch SGD with momentum; velocity starts at zero.

    prox_mu > 0 adds the proximal pull toward this round's global model
    (the anchor stays w_t for the whole round); prox_mu == 0 is bit-identical
    to plain training.
    """
    final, tau, mean_loss, diverged = _local_loop(
        w_t, view, cfg, round_idx, objective, prox_mu=prox_mu
    )
    return LocalUpdate(
        party_id=view.party_id,
        delta=ParamVector(w_t.values - final.values, w_t.shapes),
        tau=tau,
        n_samples=view.n_samples,
        train_loss=mean_loss,
        final_params=final,
        diverged=diverged,
    )


def local_train_scaffold(
    w_t: ParamVector,
    server_control: ParamVector,
    client: ClientState,
    cfg: FedRunConfig,
    round_idx: int,
    objective,
) -> tuple[LocalUpdate, ParamVector]:
    """Control-variate-corrected local training.

    Every minibatch gradient is shifted by (c - c_i) before the momentum
    step. The refreshed client control c* is either the full local-data
    gradient at the incoming global model (option "i") or the cheap reuse
    c_i - c + (w_t - w_final) / (tau * lr) (option "ii"). Returns the update
    (carrying delta_control = c* - c_i) and the new c_i.
    """
    c_i = client.control
    if c_i is None or server_control is None:
        raise ProtocolError("scaffold training requires both control variates")
    if c_i.shapes != w_t.shapes or server_control.shapes != w_t.shapes:
        raise ProtocolError("control variate shapes do not match the model")
    view = client.view
    # Round-constant correction; computing the difference once keeps the
    # zero-control case exactly equal to plain SGD.
    correction = server_control.values - c_i.values

    def corrected(grad: ParamVector) -> ParamVector:
        return ParamVector(grad.values + correction, grad.shapes)

    final, tau, mean_loss, diverged = _local_loop(
        w_t, view, cfg, round_idx, objective, grad_hook=corrected
    )
    if cfg.scaffold_c_option == "i":
        new_control = objective.full_grad(w_t, view.features, view.labels)
    else:
        step_scale = 1.0 / (tau * cfg.local_lr)
        new_control = ParamVector(
            c_i.values - server_control.values + step_scale * (w_t.values - final.values),
            w_t.shapes,
        )
    update = LocalUpdate(
        party_id=view.party_id,
        delta=ParamVector(w_t.values - final.values, w_t.shapes),
        tau=tau,
        n_samples=view.n_samples,
        train_loss=mean_loss,
        final_params=final,
        delta_control=ParamVector(new_control.values - c_i.values, w_t.shapes),
        diverged=diverged,
    )
    return update, new_control


def _sorted_updates(updates) -> list[LocalUpdate]:
    if not updates:
        raise ProtocolError("no local updates to aggregate")
    return sorted(updates, key=lambda u: u.party_id)


def aggregate_weighted(
    w_t: ParamVector, updates, server_lr: float
) -> ParamVector:
    """w' = w - server_lr * sum_i (n_i / n) * delta_i, ascending party order.

    Evaluated with compensated arithmetic so that zero deltas leave w intact
    and a single unit-weight party hands back exactly its final model.
    """
    ordered = _sorted_updates(updates)
    total = sum(u.n_samples for u in ordered)
    coeffs = [u.n_samples / total for u in ordered]
    finals = [u.final_params.values for u in ordered]
    return ParamVector(
        combine_updates(w_t.values, coeffs, finals, server_lr), w_t.shapes
    )


def aggregate_fednova(
    w_t: ParamVector, updates, server_lr: float
) -> ParamVector:
    """Normalized averaging: local deltas are rescaled by step counts.

    Party i's effective coefficient is

        (sum_j n_j * tau_j) * n_i / (n^2 * tau_i)

    formed from exact integer products with a single rounding, so when every
    tau is equal it is bitwise the plain weighted coefficient n_i / n and the
    whole aggregate matches aggregate_weighted bit for bit.
    """
    ordered = _sorted_updates(updates)
    if any(u.tau < 1 for u in ordered):
        raise ProtocolError("fednova requires every local step count >= 1")
    total = sum(u.n_samples for u in ordered)
    step_mass = sum(u.n_samples * u.tau for u in ordered)
    coeffs = [step_mass * u.n_samples / (total * total * u.tau) for u in ordered]
    finals = [u.final_params.values for u in ordered]
    return ParamVector(
        combine_updates(w_t.values, coeffs, finals, server_lr), w_t.shapes
    )


def aggregate_scaffold(
    state: GlobalState, updates, n_parties: int, server_lr: float
) -> GlobalState:
    """Weighted parameter aggregate plus c' = c + (1/N) * sum of delta_c.

    The control sum runs over the sampled parties but is divided by the
    total party count.
    """
    ordered = _sorted_updates(updates)
    if state.control is None:
        raise ProtocolError("scaffold aggregation requires a server control variate")
    if any(u.delta_control is None for u in ordered):
        raise ProtocolError("scaffold aggregation requires delta_control on every update")
    new_params = aggregate_weighted(state.params, ordered, server_lr)
    control_sum = np.zeros_like(state.control.values)
    for update in ordered:
        control_sum = control_sum + update.delta_control.values
    new_control = ParamVector(
        state.control.values + control_sum / n_parties, state.control.shapes
    )
    return GlobalState(state.round + 1, new_params, new_control)


def round_bytes(n_selected: int, n_coords: int, algorithm: str) -> int:
    """Per-round traffic: model down + update up, doubled for scaffold."""
    per_party = 2 * BYTES_PER_COORD * n_coords
    if algorithm == "scaffold":
        per_party *= 2
    return n_selected * per_party


def run_round(
    state: GlobalState,
    clients: list[ClientState],
    cfg: FedRunConfig,
    round_idx: int,
    objective,
    executor: ThreadPoolExecutor | None = None,
) -> tuple[GlobalState, list[LocalUpdate], int]:
    """One full round: sample, train the sampled parties, aggregate.

    Local trainings are independent and may run on the given executor; the
    result is bit-identical either way because each party draws from its own
    (seed, round, party) stream and aggregation order is fixed.
    """
    selected = sample_parties(
        cfg.n_parties, cfg.sample_fraction, round_idx, cfg.master_seed
    )

    if cfg.algorithm == "scaffold":
        def train(party_id):
            return local_train_scaffold(
                state.params, state.control, clients[party_id], cfg, round_idx, objective
            )
    else:
        prox_mu = cfg.prox_mu if cfg.algorithm == "fedprox" else 0.0

        def train(party_id):
            return local_train_sgd(
                state.params, clients[party_id].view, cfg, prox_mu, round_idx, objective
            )

    if executor is not None:
        results = list(executor.map(train, selected))
    else:
        results = [train(party_id) for party_id in selected]

    if cfg.algorithm == "scaffold":
        updates = [update for update, _ in results]
        new_state = aggregate_scaffold(state, updates, cfg.n_parties, cfg.server_lr)
        # Client control swap happens after aggregation, on the caller's thread.
        for (update, new_control), party_id in zip(results, selected):
            clients[party_id].control = new_control
    else:
        updates = results
        if cfg.algorithm == "fednova":
            new_params = aggregate_fednova(state.params, updates, cfg.server_lr)
        else:
            new_params = aggregate_weighted(state.params, updates, cfg.server_lr)
        new_state = GlobalState(state.round + 1, new_params, None)

    return new_state, updates, round_bytes(len(selected), len(state.params), cfg.algorithm)


def _weighted_mean_loss(updates) -> float:
    weights = np.array([u.n_samples for u in updates], dtype=np.float64)
    losses = np.array([u.train_loss for u in updates])
    return float((weights * losses).sum() / weights.sum())


def run_experiment(
    ds_train: LabeledDataset,
    ds_test: LabeledDataset,
    partition_spec: PartitionSpec,
    arch: MlpArch,
    cfg: FedRunConfig,
    n_threads: int = 1,
    objective=None,
) -> list[RoundRecord]:
    """Partition, initialize, run T rounds, evaluate after every round.

    Returns T + 1 records; record 0 is the untrained model (no traffic, no
    training loss). A party whose training goes non-finite contributes its
    last finite model and flags the round, but the run continues.
    """
    if objective is None:
        objective = MlpObjective(arch)
    _, views = build_views(
        ds_train,
        partition_spec,
        cfg.n_parties,
        rng.derive_seed(cfg.master_seed, rng.TAG_PARTITION),
    )
    params = objective.init_params(rng.derive_seed(cfg.master_seed, rng.TAG_INIT))
    control = zeros_like(params) if cfg.algorithm == "scaffold" else None
    state = GlobalState(0, params, control)
    clients = [
        ClientState(view.party_id, view, zeros_like(params) if control is not None else None)
        for view in views
    ]

    records = [
        RoundRecord(0, objective.accuracy(state.params, ds_test), None, 0, 0, False)
    ]
    executor = ThreadPoolExecutor(max_workers=n_threads) if n_threads > 1 else None
    try:
        for round_idx in range(cfg.rounds):
            started = time.perf_counter()
            state, updates, n_bytes = run_round(
                state, clients, cfg, round_idx, objective, executor
            )
            accuracy = objective.accuracy(state.params, ds_test)
            wall_ms = int((time.perf_counter() - started) * 1000)
            records.append(
                RoundRecord(
                    round=round_idx + 1,
                    test_accuracy=accuracy,
                    mean_train_loss=_weighted_mean_loss(updates),
                    bytes=n_bytes,
                    wall_ms=wall_ms,
                    diverged=any(u.diverged for u in updates),
                )
            )
    finally:
        if executor is not None:
            executor.shutdown()
    return records


def make_update(
    w_t: ParamVector,
    party_id: int,
    delta: ParamVector,
    tau: int,
    n_samples: int,
    delta_control: ParamVector | None = None,
) -> LocalUpdate:
    """Build a consistent LocalUpdate from a delta (final = w_t - delta)."""
    return LocalUpdate(
        party_id=party_id,
        delta=delta,
        tau=tau,
        n_samples=n_samples,
        train_loss=0.0,
        final_params=ParamVector(w_t.values - delta.values, w_t.shapes),
        delta_control=delta_control,
    )
