"""The federated round loop, aggregation, ledger, and experiment driver.

One round: sample clients, broadcast the model (optionally quantized per
client), locally train each client from its own shuffled batches, upload
per-tensor deltas (optionally quantized), aggregate deltas by example-count
weights over the clients that trained each tensor, and apply one server
optimizer step with pseudo-gradient -mean_delta.  Server SGD at lr 1.0 is
exactly federated averaging; Adam is the default.

Algorithms: fedavg; fedprox (adds mu * (w - w_received) to local gradients
each step); mimelite (local Adagrad steps against the broadcast accumulator,
which stays frozen during the round; clients also return the example-weighted
mean gradient at the received model, and the server advances the accumulator
with its aggregate while averaging models at lr 1.0).

Communication ledger: ideal fractional bits (uniform b, terngrad log2 3,
uncompressed 32), downloads charged for the full model, uploads only for the
round's trainable tensors.  The cumulative columns in the metrics history
follow the per-participating-client convention: each round contributes the
mean cost over that round's selected clients, so with no compression the
cumulative download after R rounds is exactly R * n * 4 bytes.

Every random decision derives from (seed, path); paths are
("round", r, "sample") and ("round", r, "client", cid, purpose) with
purpose in down/pvt/batch/up, so streams never depend on execution order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .compress import QuantConfig, compress_tensors, restore_tensors
from .data import make_batches
from .optim import AdagradState, SgdState, served_optimizer, server_apply, sgd_step
from .params import ParameterSet
from .prng import Prng
from .pvt import apply_mask, select_mask
from .tensor import clip_global_norm

__all__ = [
    "CSV_HEADER",
    "ClientUpdate",
    "CommLedger",
    "EvalRecord",
    "ExperimentResult",
    "FederatedConfig",
    "RoundRecord",
    "ServerState",
    "aggregate",
    "centralized_pretrain",
    "client_local_train",
    "history_to_csv",
    "run_experiment",
    "run_round",
    "sample_clients",
]

EVAL_BATCH_SIZE = 64

CSV_HEADER = "round,test_perplexity,cum_download_bytes,cum_upload_bytes,trainable_params"


@dataclass
class FederatedConfig:
    rounds: int
    clients_per_round: int
    client_lr: float = 0.5
    batch_size: int = 16
    max_examples: int = 1200
    local_epochs: int = 1
    clipnorm: float = 0.0
    server_optimizer: str = "adam"
    server_lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    algorithm: str = "fedavg"
    fedprox_mu: float = 0.0
    mime_lr: float = 0.1
    mime_eps: float = 1e-3
    pvt_fraction: float | None = None  # None disables partial variable training
    download: QuantConfig = field(default_factory=QuantConfig)
    upload: QuantConfig = field(default_factory=QuantConfig)
    eval_period: int = 10

    def validate(self) -> "FederatedConfig":
        positive = ("rounds", "clients_per_round", "batch_size", "max_examples", "local_epochs", "eval_period")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("client_lr", "server_lr", "mime_lr", "mime_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("clipnorm", "fedprox_mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.server_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown server optimizer {self.server_optimizer!r}")
        if self.algorithm not in ("fedavg", "fedprox", "mimelite"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.pvt_fraction is not None and not 0.0 < self.pvt_fraction <= 1.0:
            raise ValueError(f"pvt_fraction must be in (0, 1], got {self.pvt_fraction}")
        self.download.validate("download")
        self.upload.validate("upload")
        return self


@dataclass
class ClientUpdate:
    client_id: str
    delta: dict  # name -> array, trainable tensors only
    weight: float  # number of examples trained
    mean_grad: dict | None = None  # mimelite: gradient at the received model
    trainable_count: int = 0


@dataclass
class RoundRecord:
    round_index: int
    clients: list
    down_bytes_mean: float
    up_bytes_mean: float
    trainable_mean: float


class CommLedger:
    """Per-client actual transfer bytes plus per-round slot means."""

    def __init__(self):
        self.per_client: dict[str, list] = {}  # cid -> [down_bytes, up_bytes]
        self.round_records: list[RoundRecord] = []
        self.cum_download_bytes = 0.0
        self.cum_upload_bytes = 0.0

    def record_round(self, round_index: int, rows):
        """rows: (client_id, down_bytes, up_bytes, trainable_count) per client."""
        if not rows:
            raise ValueError("a round must involve at least one client")
        for cid, down, up, _ in rows:
            totals = self.per_client.setdefault(cid, [0.0, 0.0])
            totals[0] += down
            totals[1] += up
        down_mean = sum(r[1] for r in rows) / len(rows)
        up_mean = sum(r[2] for r in rows) / len(rows)
        trainable_mean = sum(r[3] for r in rows) / len(rows)
        self.cum_download_bytes += down_mean
        self.cum_upload_bytes += up_mean
        self.round_records.append(
            RoundRecord(round_index, [r[0] for r in rows], down_mean, up_mean, trainable_mean)
        )


@dataclass
class ServerState:
    params: ParameterSet
    optimizer: object
    mime: AdagradState | None = None
    round_index: int = 0
    ledger: CommLedger = field(default_factory=CommLedger)


def sample_clients(population_size: int, count: int, rng: Prng) -> list:
    """Uniform without replacement; returned sorted for deterministic visits."""
    if population_size < 1:
        raise ValueError("empty client population")
    count = min(count, population_size)
    picks = rng.generator().choice(population_size, size=count, replace=False)
    return sorted(int(i) for i in picks)


def _mean_gradient(pset: ParameterSet, mcfg, batches) -> dict:
    sums: dict[str, np.ndarray] = {}
    total = 0.0
    for batch in batches:
        _, grads, _ = model.loss_and_grads(pset, mcfg, batch)
        w = float(batch.num_examples)
        for name, g in grads.items():
            sums[name] = sums.get(name, 0.0) + w * g
        total += w
    return {name: s / total for name, s in sums.items()}


def client_local_train(
    client_pset: ParameterSet,
    mcfg,
    fcfg: FederatedConfig,
    sequences,
    rng: Prng,
    mime_acc: dict | None = None,
) -> ClientUpdate:
    """Local SGD (or frozen-state Adagrad for mimelite) from the received model."""
    values = client_pset.values_map()
    received = {name: v.copy() for name, v in values.items()}
    trainable = client_pset.trainable_names()
    mean_grad = None
    examples_trained = 0
    for epoch in range(fcfg.local_epochs):
        cap = fcfg.max_examples - examples_trained
        if cap <= 0:
            break
        batches = make_batches(sequences, fcfg.batch_size, mcfg.max_seq_len, rng.child("epoch", epoch), cap)
        if epoch == 0 and fcfg.algorithm == "mimelite":
            mean_grad = _mean_gradient(client_pset, mcfg, batches)
        for batch in batches:
            _, grads, _ = model.loss_and_grads(client_pset, mcfg, batch)
            if fcfg.algorithm == "fedprox":
                for name in grads:
                    grads[name] = grads[name] + fcfg.fedprox_mu * (values[name] - received[name])
            grads, _ = clip_global_norm(grads, fcfg.clipnorm)
            if fcfg.algorithm == "mimelite":
                acc = mime_acc or {}
                for name in sorted(grads):
                    g = grads[name]
                    slot = acc.get(name)
                    denom = (np.sqrt(slot) if slot is not None else 0.0) + fcfg.mime_eps
                    values[name] -= fcfg.mime_lr * g / denom
            else:
                sgd_step(values, grads, fcfg.client_lr)
            examples_trained += batch.num_examples
    delta = {name: values[name] - received[name] for name in trainable}
    return ClientUpdate("", delta, float(examples_trained), mean_grad, client_pset.trainable_count())


def _weighted_mean(entries) -> dict:
    """entries: (client_id, weight, name -> array).  Sorted, trainers-only."""
    sums: dict[str, np.ndarray] = {}
    weights: dict[str, float] = {}
    for _, weight, tensors in sorted(entries, key=lambda e: e[0]):
        if weight <= 0:
            continue
        for name, t in tensors.items():
            if name in sums:
                sums[name] = sums[name] + weight * t
            else:
                sums[name] = weight * t
            weights[name] = weights.get(name, 0.0) + weight
    return {name: sums[name] / weights[name] for name in sorted(sums)}


def aggregate(updates) -> tuple:
    """Example-weighted per-tensor means over the clients that trained each tensor."""
    mean_delta = _weighted_mean([(u.client_id, u.weight, u.delta) for u in updates])
    with_grads = [(u.client_id, u.weight, u.mean_grad) for u in updates if u.mean_grad is not None]
    mean_grad = _weighted_mean(with_grads) if with_grads else {}
    return mean_delta, mean_grad


@dataclass
class RoundStats:
    round_index: int
    down_bytes_mean: float
    up_bytes_mean: float
    trainable_mean: float


def run_round(state: ServerState, population, mcfg, fcfg: FederatedConfig, master_rng: Prng) -> RoundStats:
    r = state.round_index + 1
    base = master_rng.child("round", r)
    selected = sample_clients(len(population), fcfg.clients_per_round, base.child("sample"))
    server_values = state.params.values_map()
    shapes = {name: v.shape for name, v in server_values.items()}
    total_count = state.params.total_count()

    updates = []
    rows = []
    for i in selected:
        ds = population[i]
        crng = base.child("client", ds.client_id)
        if fcfg.download.scheme == "none":
            client_arrays = {name: v.copy() for name, v in server_values.items()}
            down_bits = 32.0 * total_count
        else:
            payload = compress_tensors(server_values, fcfg.download, crng.child("down"))
            client_arrays = restore_tensors(payload, shapes)
            down_bits = payload.ideal_bits
        client_pset = model.params_from_arrays(mcfg, client_arrays)
        if fcfg.pvt_fraction is not None:
            mask = select_mask(client_pset, fcfg.pvt_fraction, crng.child("pvt"))
            client_pset = apply_mask(client_pset, mask)
        mime_acc = state.mime.acc if state.mime is not None else None
        update = client_local_train(client_pset, mcfg, fcfg, ds.sequences, crng.child("batch"), mime_acc)
        update.client_id = ds.client_id
        if fcfg.upload.scheme == "none":
            up_bits = 32.0 * update.trainable_count
        else:
            payload = compress_tensors(update.delta, fcfg.upload, crng.child("up"))
            update.delta = restore_tensors(payload, {n: update.delta[n].shape for n in update.delta})
            up_bits = payload.ideal_bits
        updates.append(update)
        rows.append((ds.client_id, down_bits / 8.0, up_bits / 8.0, update.trainable_count))

    mean_delta, mean_grad = aggregate(updates)
    server_apply(state.params, state.optimizer, mean_delta)
    if state.mime is not None:
        for name in sorted(mean_grad):
            acc = state.mime.accumulator_for(name, mean_grad[name])
            acc += mean_grad[name] * mean_grad[name]
    state.round_index = r
    state.ledger.record_round(r, rows)
    return RoundStats(
        r,
        sum(row[1] for row in rows) / len(rows),
        sum(row[2] for row in rows) / len(rows),
        sum(row[3] for row in rows) / len(rows),
    )


@dataclass
class EvalRecord:
    round_index: int
    perplexity: float
    cum_download_bytes: float
    cum_upload_bytes: float
    trainable_params: float


@dataclass
class ExperimentResult:
    params: ParameterSet
    history: list
    ledger: CommLedger

    @property
    def final_perplexity(self) -> float:
        return self.history[-1].perplexity


def history_to_csv(history) -> str:
    lines = [CSV_HEADER]
    for rec in history:
        lines.append(
            f"{rec.round_index},{rec.perplexity!r},{rec.cum_download_bytes!r},"
            f"{rec.cum_upload_bytes!r},{rec.trainable_params!r}"
        )
    return "\n".join(lines) + "\n"


def run_experiment(
    mcfg,
    fcfg: FederatedConfig,
    population,
    eval_sequences,
    seed: int,
    metrics_path=None,
    initial_arrays: dict | None = None,
) -> ExperimentResult:
    """Full federated run with periodic evaluation on the held-out pool.

    Evaluates before round 1 and then every eval_period rounds (plus the
    final round); with eval_period | rounds that is rounds/eval_period + 1
    metrics rows.  initial_arrays (e.g. a pretrained checkpoint) replaces
    the seed-derived initialization for warm starts.
    """
    mcfg.validate()
    fcfg.validate()
    if not population:
        raise ValueError("empty client population")
    master = Prng(seed)
    if initial_arrays is not None:
        params = model.params_from_arrays(mcfg, {n: np.array(v) for n, v in initial_arrays.items()})
    else:
        params = model.init_params(mcfg, master.child("model"))
    if fcfg.algorithm == "mimelite":
        optimizer = SgdState(1.0)
        mime = AdagradState(fcfg.mime_lr, fcfg.mime_eps)
    else:
        optimizer = served_optimizer(
            fcfg.server_optimizer, fcfg.server_lr, fcfg.adam_beta1, fcfg.adam_beta2, fcfg.adam_eps
        )
        mime = None
    state = ServerState(params, optimizer, mime)
    eval_batches = make_batches(eval_sequences, EVAL_BATCH_SIZE, mcfg.max_seq_len)
    history = [
        EvalRecord(0, model.evaluate_perplexity(params, mcfg, eval_batches), 0.0, 0.0, float(params.total_count()))
    ]
    for r in range(1, fcfg.rounds + 1):
        stats = run_round(state, population, mcfg, fcfg, master)
        if r % fcfg.eval_period == 0 or r == fcfg.rounds:
            history.append(
                EvalRecord(
                    r,
                    model.evaluate_perplexity(state.params, mcfg, eval_batches),
                    state.ledger.cum_download_bytes,
                    state.ledger.cum_upload_bytes,
                    stats.trainable_mean,
                )
            )
    if metrics_path is not None:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write(history_to_csv(history))
    return ExperimentResult(state.params, history, state.ledger)


def centralized_pretrain(
    mcfg,
    sequences,
    steps: int,
    lr: float = 5e-5,
    batch_size: int = 16,
    seed: int = 0,
    clipnorm: float = 0.0,
) -> tuple:
    """Plain minibatch Adam over the pooled corpus; returns (params, loss curve)."""
    from .optim import AdamState

    mcfg.validate()
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if not sequences:
        raise ValueError("no training sequences")
    master = Prng(seed)
    params = model.init_params(mcfg, master.child("model"))
    values = params.values_map()
    opt = AdamState(lr)
    losses = []
    step = 0
    epoch = 0
    while step < steps:
        batches = make_batches(sequences, batch_size, mcfg.max_seq_len, master.child("pretrain", epoch))
        for batch in batches:
            loss, grads, _ = model.loss_and_grads(params, mcfg, batch)
            grads, _ = clip_global_norm(grads, clipnorm)
            opt.step(values, grads)
            losses.append(loss)
            step += 1
            if step >= steps:
                break
        epoch += 1
    return params, losses
