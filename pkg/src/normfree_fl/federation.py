"""Server/client protocol: sampling, parameter partitioning, local training, aggregation.

Rounds are reproducible and independent of client execution order: every
client trains on its own stream ``fed/round/r/client/id`` and the server
reduces updates in ascending client id order.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .datagen import Shard
from .errors import (
    ConstraintViolation,
    DegenerateBatch,
    EmptyShard,
    EmptyUpdateSet,
    InvalidFraction,
    InvalidSpec,
    ShapeMismatch,
    VariantMismatch,
)
from .model import NORM_ROLES, ModelState, ParamRole, accuracy, backward, forward_loss
from .optim import OptimSpec, sgd_step
from .tensor_core import RngStream


class AlgorithmKind(str, enum.Enum):
    FedAvg = "FedAvg"
    FedProx = "FedProx"
    FedAvgGN = "FedAvgGN"
    FedAvgLN = "FedAvgLN"
    FedBN = "FedBN"
    SiloBN = "SiloBN"
    FixBN = "FixBN"
    FedWon = "FedWon"


_VARIANT = {
    AlgorithmKind.FedAvgGN: "gn",
    AlgorithmKind.FedAvgLN: "ln",
    AlgorithmKind.FedWon: "wsconv",
}
STATEFUL = frozenset({AlgorithmKind.FedBN, AlgorithmKind.SiloBN})
_LOCAL_ROLES = {
    AlgorithmKind.FedBN: NORM_ROLES,
    AlgorithmKind.SiloBN: frozenset({ParamRole.NormRunningStat}),
}


@dataclass(frozen=True)
class AlgorithmSpec:
    kind: AlgorithmKind
    optim: OptimSpec
    freeze_round: Optional[int] = None
    # FedWon only: False keeps ordinary convolutions (normalization-free ablation)
    weight_standardization: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", AlgorithmKind(self.kind))
        if self.optim.prox_mu > 0 and self.kind is not AlgorithmKind.FedProx:
            raise InvalidSpec(f"{self.kind.value} does not use a proximal term")
        if self.freeze_round is not None and self.kind is not AlgorithmKind.FixBN:
            raise InvalidSpec("freeze_round only applies to FixBN")
        if not self.weight_standardization and self.kind is not AlgorithmKind.FedWon:
            raise InvalidSpec("weight_standardization=False only applies to FedWon")

    @property
    def variant(self) -> str:
        if self.kind is AlgorithmKind.FedWon and not self.weight_standardization:
            return "plain"
        return _VARIANT.get(self.kind, "bn")

    @property
    def stateful(self) -> bool:
        return self.kind in STATEFUL

    @property
    def prox_mu(self) -> float:
        return self.optim.prox_mu


@dataclass
class ClientState:
    client_id: int
    domain_id: int
    shard: Shard
    stream: RngStream
    local_overlay: dict = field(default_factory=dict)  # name -> array, private entries only


@dataclass
class RoundRecord:
    round: int
    client_ids: list
    domain_acc: list
    mean_acc: float
    mean_loss: float
    seconds: float = 0.0


@dataclass
class LocalResult:
    model: ModelState
    n_samples: int
    mean_loss: float
    client: ClientState


@dataclass
class ServerState:
    global_model: ModelState
    clients: list
    tests: list  # one test Shard per domain
    algo: AlgorithmSpec
    stream: RngStream
    fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 32
    total_rounds: int = 100


@dataclass
class RoundResult:
    global_model: ModelState
    record: RoundRecord
    clients: list
    updates: dict  # client id -> trained ModelState


# -- sampling and partitioning -----------------------------------------------


def num_sampled(total: int, fraction: float) -> int:
    """``round(C * N)`` (halves rounded up), at least 1."""
    return max(1, min(total, int(math.floor(fraction * total + 0.5))))


def sample_clients(total: int, fraction: float, stream: RngStream) -> list[int]:
    """Uniform sample without replacement, returned in ascending id order."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidFraction(f"client fraction must be in (0, 1], got {fraction}")
    if total < 1:
        raise InvalidFraction("need at least one client")
    k = num_sampled(total, fraction)
    if k == total:
        return list(range(total))
    return sorted(int(i) for i in stream.permutation(total)[:k])


def _check_variant(state: ModelState, algo_kind: AlgorithmKind) -> None:
    expected = {"plain", "wsconv"} if algo_kind is AlgorithmKind.FedWon else {_VARIANT.get(algo_kind, "bn")}
    if state.variant not in expected:
        raise VariantMismatch(f"{algo_kind.value} cannot run on a {state.variant!r} model")


def partition_params(state: ModelState, kind) -> tuple[list[str], list[str]]:
    """Split entry names into (shared with the server, kept on the client)."""
    kind = AlgorithmKind(kind)
    _check_variant(state, kind)
    local_roles = _LOCAL_ROLES.get(kind, frozenset())
    local = state.keys_with_roles(local_roles)
    shared = [k for k in state.keys() if k not in set(local)]
    return shared, local


def fixbn_apply(model: ModelState, round_index: int, freeze_round: int) -> str:
    """Normalization directive for a FixBN round: ``"batch"`` before the switch, ``"frozen"`` after."""
    if model.variant != "bn":
        raise VariantMismatch("FixBN needs a batch-norm model")
    return "batch" if round_index < freeze_round else "frozen"


# -- client side -------------------------------------------------------------


def make_clients(shards: Sequence[Shard], global_model: ModelState, algo: AlgorithmSpec,
                 stream: RngStream) -> list[ClientState]:
    _, local = partition_params(global_model, algo.kind)
    out = []
    for cid, shard in enumerate(shards):
        local_overlay = {k: global_model[k] for k in local}
        out.append(ClientState(cid, shard.domain_id, shard, stream.split("client", cid), local_overlay))
    return out


def _batches(n: int, batch_size: int, min_batch: int, perm: np.ndarray):
    for s in range(0, n, batch_size):
        idx = perm[s : s + batch_size]
        if len(idx) >= min_batch:
            yield idx


def local_train(client: ClientState, global_model: ModelState, algo: AlgorithmSpec, epochs: int,
                batch_size: int, stream: RngStream, norm_stats: str = "batch") -> LocalResult:
    """E epochs of shuffled mini-batch SGD starting from the global model plus the client overlay.

    Batch-norm models need ``batch_size >= 2``; a trailing batch of a single
    sample is skipped for them.
    """
    n = len(client.shard)
    if n == 0:
        raise EmptyShard(f"client {client.client_id} has no training samples")
    if batch_size < 1:
        raise InvalidSpec("batch_size must be >= 1")
    bn = global_model.variant == "bn"
    if bn and batch_size < 2:
        raise DegenerateBatch(f"{algo.kind.value} uses batch norm and cannot train with batch size {batch_size}")
    start = global_model.replace(client.local_overlay) if client.local_overlay else global_model
    anchor = start if algo.prox_mu > 0 else None
    model = start
    losses = []
    x, y = client.shard.x, client.shard.y
    for epoch in range(epochs):
        es = stream.split("epoch", epoch)
        perm = es.split("shuffle").permutation(n)
        for j, idx in enumerate(_batches(n, batch_size, 2 if bn else 1, perm)):
            loss, _, cache = forward_loss(model, (x[idx], y[idx]), "train", es.split("batch", j), norm_stats)
            grads = backward(model, cache)
            model = sgd_step(model, grads, algo.optim, anchor)
            if cache.new_buffers:
                model = model.replace(cache.new_buffers)
            losses.append(loss)
    if client.local_overlay:
        client = replace(client, local_overlay={k: model[k] for k in client.local_overlay})
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return LocalResult(model, n, mean_loss, client)


# -- server side -------------------------------------------------------------


def aggregate(updates: Sequence[tuple[ModelState, int]], shared_keys: Sequence[str],
              previous: Optional[ModelState] = None) -> ModelState:
    """Sample-size weighted mean of the shared entries.

    Computed as ``a_0 + sum_k p_k (a_k - a_0)`` with ``p_k = n_k / sum n``,
    which equals the weighted mean and returns ``a_0`` bit for bit when all
    updates agree. Entries outside ``shared_keys`` come from ``previous``
    (or the first update when no previous model is given).
    """
    if not updates:
        raise EmptyUpdateSet("nothing to aggregate")
    counts = np.array([n for _, n in updates], dtype=np.float64)
    if np.any(counts < 0) or counts.sum() <= 0:
        raise EmptyUpdateSet("sample counts must be non-negative with a positive total")
    p = counts / counts.sum()
    first = updates[0][0]
    base = previous if previous is not None else first
    for m, _ in updates:
        if list(m.keys()) != list(first.keys()):
            raise ShapeMismatch("updates have different key sets")
    new = {}
    for k in shared_keys:
        a0 = first[k]
        acc = np.zeros_like(a0)
        for (m, _), pk in zip(updates[1:], p[1:]):
            if m[k].shape != a0.shape:
                raise ShapeMismatch(f"{k}: shape {m[k].shape} vs {a0.shape}")
            acc += pk * (m[k] - a0)
        new[k] = a0 + acc
    return base.replace(new)


def evaluate(global_model: ModelState, clients: Sequence[ClientState], tests: Sequence[Shard],
             algo: AlgorithmSpec) -> list[float]:
    """Test accuracy per domain.

    Stateless algorithms evaluate the global model. Stateful ones evaluate
    each client's personalised model (global plus overlay) and average over
    the clients of that domain.
    """
    accs = []
    for test in tests:
        if not algo.stateful:
            accs.append(accuracy(global_model, test.x, test.y))
            continue
        owners = [c for c in clients if c.domain_id == test.domain_id] or list(clients)
        vals = [accuracy(global_model.replace(c.local_overlay), test.x, test.y) for c in owners]
        accs.append(float(np.mean(vals)))
    return accs


def run_round(state: ServerState, round_index: int) -> RoundResult:
    """Sample, train locally, aggregate, evaluate."""
    t0 = time.perf_counter()
    algo = state.algo
    if algo.stateful and state.fraction < 1.0:
        raise ConstraintViolation(
            f"{algo.kind.value} keeps client state and needs every client in every round (fraction 1)"
        )
    rs = state.stream.split("round", round_index)
    ids = sample_clients(len(state.clients), state.fraction, rs.split("sample"))
    norm_stats = "batch"
    if algo.kind is AlgorithmKind.FixBN:
        freeze = algo.freeze_round if algo.freeze_round is not None else state.total_rounds // 2
        norm_stats = fixbn_apply(state.global_model, round_index, freeze)
    results = {}
    for cid in ids:
        results[cid] = local_train(state.clients[cid], state.global_model, algo, state.local_epochs,
                                   state.batch_size, rs.split("client", cid), norm_stats)
    shared, _ = partition_params(state.global_model, algo.kind)
    new_global = aggregate([(results[c].model, results[c].n_samples) for c in ids], shared, state.global_model)
    clients = list(state.clients)
    for cid in ids:
        clients[cid] = results[cid].client
    accs = evaluate(new_global, clients, state.tests, algo)
    n = np.array([results[c].n_samples for c in ids], dtype=np.float64)
    losses = np.array([results[c].mean_loss for c in ids])
    mean_loss = float(np.sum(n * losses) / n.sum())
    record = RoundRecord(round_index, list(ids), accs, float(np.mean(accs)), mean_loss,
                         time.perf_counter() - t0)
    return RoundResult(new_global, record, clients, {c: results[c].model for c in ids})


# -- reporting ---------------------------------------------------------------


def csv_header(num_domains: int) -> list[str]:
    return ["round", "client_ids"] + [f"acc_domain_{d}" for d in range(num_domains)] + [
        "mean_acc", "mean_loss", "seconds"]


def csv_row(record: RoundRecord, record_timing: bool = False) -> list[str]:
    """Floats use ``repr`` so rows are byte-stable; wall time is blank unless requested."""
    return ([str(record.round), " ".join(str(i) for i in record.client_ids)]
            + [repr(float(a)) for a in record.domain_acc]
            + [repr(float(record.mean_acc)), repr(float(record.mean_loss)),
               repr(round(record.seconds, 3)) if record_timing else ""])


def format_csv(records: Sequence[RoundRecord], num_domains: int, record_timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(num_domains))
    for r in records:
        w.writerow(csv_row(r, record_timing))
    return buf.getvalue()


def bn_stats_report(models: Mapping[int, ModelState], layer_index: int) -> list[dict]:
    """Channel-wise running mean/variance of batch-norm layer ``layer_index`` (1-based) per client."""
    if not models:
        raise EmptyUpdateSet("no client models given")
    rows = None
    for cid, m in models.items():
        if m.variant != "bn":
            raise VariantMismatch("batch-norm statistics need a batch-norm model")
        key = f"norm{layer_index}.running_mean"
        if key not in m.entries:
            raise VariantMismatch(f"model has no batch-norm layer {layer_index}")
        mean, var = m[key], m[f"norm{layer_index}.running_var"]
        if rows is None:
            rows = [{"channel": c} for c in range(len(mean))]
        for c, row in enumerate(rows):
            row[f"client{cid}_mean"] = float(mean[c])
            row[f"client{cid}_var"] = float(var[c])
    return rows


def bn_mean_gap(report: Sequence[dict], a: int, b: int) -> float:
    """Mean absolute difference of channel running means between two clients."""
    return float(np.mean([abs(r[f"client{a}_mean"] - r[f"client{b}_mean"]) for r in report]))
