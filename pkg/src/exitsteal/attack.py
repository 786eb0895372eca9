"""The extraction attack: query, estimate exit labels, train a substitute.

The attacker sees probability vectors and runtimes only. Exit labels are
estimated by changepoint detection on the runtimes of a small i.i.d.
calibration set; every query sample is then labeled by which runtime
segment it falls into. Training minimizes

    performance loss + lambda * strategy loss

where the performance loss pulls every substitute exit toward the victim's
output (KL with the victim as target), and the strategy loss shapes
confidences so the substitute can reproduce *where* the victim exited: for
each non-final exit i, samples estimated to exit at i should clear a high
bar phi1 there, and samples estimated to exit later should stay below a
lower bar phi2 at exit i. Both margin terms average within their sample
sets and use confidences evaluated at the earlier exit i.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .changepoint import ChangepointResult, assign_exits, detect_changepoints
from .errors import ContractError
from .multiexit import MultiExitNet, forward_all_exits
from .victimlab import VictimDeployment, query_timed_many

Array = np.ndarray


@dataclass(frozen=True)
class AttackConfig:
    """Knobs for substitute training. phi1 is the own-exit confidence bar,
    phi2 the cap earlier exits must hold later-exiting samples under; the
    margins only make sense when phi1 >= phi2."""

    phi1: float = 0.95
    phi2: float = 0.90
    lambda_strategy: float = 0.5
    epochs: int = 40
    lr: float = 0.05
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.phi1 <= 1.0 and 0.0 < self.phi2 <= 1.0):
            raise ContractError("phi1 and phi2 must lie in (0, 1]")
        if self.phi1 < self.phi2:
            raise ContractError("phi1 must be >= phi2")
        if self.lambda_strategy < 0.0:
            raise ContractError("lambda_strategy must be >= 0")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.lr <= 0.0:
            raise ContractError("lr must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass(frozen=True)
class QueryRecord:
    """One answered query: the input sent, the victim's probability vector,
    the observed runtime and the exit label estimated from it (1-based)."""

    input: Array
    victim_probs: Array
    runtime: float
    estimated_exit: int

    def __post_init__(self):
        probs = np.asarray(self.victim_probs, dtype=np.float64)
        if probs.ndim != 1 or probs.shape[0] < 2:
            raise ContractError("victim_probs must be a probability vector")
        if np.any(probs < 0.0) or abs(float(probs.sum()) - 1.0) > nm.PROB_ATOL:
            raise ContractError("victim_probs must sum to 1 and be nonnegative")
        if self.estimated_exit < 1:
            raise ContractError("estimated_exit is 1-based")


@dataclass(frozen=True)
class QuerySet:
    """Provenance-tagged query inputs: is_iid[i] marks samples drawn from
    the victim's data distribution (the rest come from the unrelated pool)."""

    inputs: Array
    is_iid: Array

    def __post_init__(self):
        if self.inputs.shape[0] != self.is_iid.shape[0]:
            raise ContractError("inputs and provenance tags must align")


def build_query_set(
    iid_inputs,
    unrelated_inputs,
    n_iid: int,
    n_unrelated: int,
    seed: int,
) -> QuerySet:
    """Deterministic draw (without replacement) of n_iid + n_unrelated query
    inputs from the two pools, i.i.d. samples first."""
    iid = nm.as_array(iid_inputs)
    unrel = nm.as_array(unrelated_inputs)
    if n_iid < 0 or n_unrelated < 0:
        raise ContractError("query counts must be >= 0")
    if n_iid + n_unrelated == 0:
        raise ContractError("query set must be non-empty")
    if n_iid > iid.shape[0]:
        raise ContractError(f"asked for {n_iid} i.i.d. samples, pool has {iid.shape[0]}")
    if n_unrelated > unrel.shape[0]:
        raise ContractError(
            f"asked for {n_unrelated} unrelated samples, pool has {unrel.shape[0]}"
        )
    if n_iid and n_unrelated and iid.shape[1:] != unrel.shape[1:]:
        raise ContractError("i.i.d. and unrelated samples must share a shape")
    rng = np.random.default_rng(seed)
    parts, tags = [], []
    if n_iid:
        parts.append(iid[rng.choice(iid.shape[0], size=n_iid, replace=False)])
        tags.append(np.ones(n_iid, dtype=bool))
    if n_unrelated:
        parts.append(unrel[rng.choice(unrel.shape[0], size=n_unrelated, replace=False)])
        tags.append(np.zeros(n_unrelated, dtype=bool))
    return QuerySet(inputs=np.concatenate(parts), is_iid=np.concatenate(tags))


def estimate_exit_labels(
    dep: VictimDeployment,
    calibration_inputs,
    query_inputs,
) -> tuple[ChangepointResult, list[QueryRecord]]:
    """Query the calibration set (timed), fit changepoints on those runtimes
    only, then query and label every query sample. The calibration queries
    consume the deployment's noise stream first, in order."""
    calib = nm.as_array(calibration_inputs)
    queries = nm.as_array(query_inputs)
    _, calib_runtimes = query_timed_many(dep, calib)
    result = detect_changepoints(calib_runtimes)
    probs, runtimes = query_timed_many(dep, queries)
    exits = assign_exits(runtimes, result)
    records = [
        QueryRecord(
            input=queries[i].copy(),
            victim_probs=probs[i].copy(),
            runtime=float(runtimes[i]),
            estimated_exit=int(exits[i]),
        )
        for i in range(queries.shape[0])
    ]
    return result, records


class RecordBatch:
    """Query records packed into arrays for training."""

    def __init__(self, inputs: Array, victim_probs: Array, exits: Array):
        if inputs.shape[0] != victim_probs.shape[0] or inputs.shape[0] != exits.shape[0]:
            raise ContractError("record arrays must align")
        if inputs.shape[0] == 0:
            raise ContractError("record batch must be non-empty")
        self.inputs = inputs
        self.victim_probs = victim_probs
        self.exits = exits.astype(int)

    @classmethod
    def from_records(cls, records) -> "RecordBatch":
        records = list(records)
        if not records:
            raise ContractError("record batch must be non-empty")
        return cls(
            inputs=np.stack([nm.as_array(r.input) for r in records]),
            victim_probs=np.stack([nm.as_array(r.victim_probs) for r in records]),
            exits=np.asarray([r.estimated_exit for r in records]),
        )

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "RecordBatch":
        return RecordBatch(self.inputs[idx], self.victim_probs[idx], self.exits[idx])


def _as_batch(records) -> RecordBatch:
    return records if isinstance(records, RecordBatch) else RecordBatch.from_records(records)


def performance_loss(net: MultiExitNet, records, params=None):
    """Mean over the batch of the summed KL(victim || exit_i) across all
    exits (the victim's answer is the target at every exit). Differentiable
    when `params` is a bound-node list."""
    batch = _as_batch(records)
    probs = forward_all_exits(net, batch.inputs, params=params)
    total = None
    for p in probs:
        term = nm.mean_all(nm.kl_div(batch.victim_probs, p))
        total = term if total is None else total + term
    return total


def _strategy_terms(probs, exits: Array, phi1: float, phi2: float, exit_count: int):
    """Shared margin arithmetic for strategy_loss; `probs` may be plain
    arrays or tape nodes. Empty sample sets contribute nothing."""
    conf = [nm.max_last(p) for p in probs]
    groups = [np.flatnonzero(exits == i) for i in range(1, exit_count + 1)]
    total = None
    for i in range(exit_count - 1):  # exit i+1, 1-based
        own = groups[i]
        if own.size:
            term = nm.mean_all(nm.hinge(phi1, nm.take_rows(conf[i], own)))
            total = term if total is None else total + term
        for j in range(i + 1, exit_count):
            later = groups[j]
            if later.size:
                term = nm.mean_all(nm.hinge_excess(nm.take_rows(conf[i], later), phi2))
                total = term if total is None else total + term
    if total is None:
        total = np.float64(0.0)
    return total


def strategy_loss(net: MultiExitNet, records, phi1: float, phi2: float, params=None):
    """Confidence-shaping margins over estimated exit groups D_1..D_K:

        sum over non-final exits i of
            mean_{x in D_i}  max(0, phi1 - conf_i(x))
          + sum over j > i of mean_{x in D_j} max(0, conf_i(x) - phi2)

    conf_i is the max softmax confidence at exit i. Groups absent from the
    batch contribute zero.
    """
    if phi1 < phi2:
        raise ContractError("phi1 must be >= phi2")
    batch = _as_batch(records)
    if int(batch.exits.max()) > net.exit_count:
        raise ContractError(
            f"records labeled up to exit {int(batch.exits.max())}, net has {net.exit_count}"
        )
    probs = forward_all_exits(net, batch.inputs, params=params)
    return _strategy_terms(probs, batch.exits, phi1, phi2, net.exit_count)


@dataclass(frozen=True)
class EpochLoss:
    epoch: int
    performance: float
    strategy: float
    total: float


def train_substitute(
    net: MultiExitNet,
    records,
    cfg: AttackConfig,
) -> tuple[MultiExitNet, list[EpochLoss]]:
    """Mini-batch SGD on performance + lambda * strategy loss.

    Returns the net (trained in place) and the per-epoch loss trace. With
    lambda_strategy == 0 the parameter trajectory is bit-identical to
    train_baseline under the same seed: the strategy term is still measured
    for the trace but never contributes a gradient.
    """
    batch = _as_batch(records)
    if int(batch.exits.max()) > net.exit_count:
        raise ContractError(
            f"records labeled up to exit {int(batch.exits.max())}, net has {net.exit_count}"
        )
    rng = np.random.default_rng(cfg.seed)
    n = len(batch)
    lam = cfg.lambda_strategy
    trace: list[EpochLoss] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        perf_sum = strat_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            take = order[start : start + cfg.batch_size]
            sub = batch.subset(take)
            tape = nm.GradTape()
            bound = net.bind(tape)
            probs = forward_all_exits(net, sub.inputs, params=bound)
            perf = None
            for p in probs:
                term = nm.mean_all(nm.kl_div(sub.victim_probs, p))
                perf = term if perf is None else perf + term
            strat = _strategy_terms(probs, sub.exits, cfg.phi1, cfg.phi2, net.exit_count)
            loss = perf if lam == 0.0 else perf + lam * strat
            grads = nm.grad(loss, tape)
            for arr, node in zip(net.parameters(), bound):
                arr -= cfg.lr * grads[node]
            perf_sum += float(nm.value_of(perf)) * len(take)
            strat_sum += float(nm.value_of(strat)) * len(take)
        perf_epoch = perf_sum / n
        strat_epoch = strat_sum / n
        trace.append(
            EpochLoss(
                epoch=epoch,
                performance=perf_epoch,
                strategy=strat_epoch,
                total=perf_epoch + lam * strat_epoch,
            )
        )
    return net, trace


def train_baseline(
    net: MultiExitNet,
    records,
    cfg: AttackConfig,
) -> tuple[MultiExitNet, list[EpochLoss]]:
    """Conventional extraction: performance loss only (lambda forced to 0).
    Everything else — batching, shuffling, updates — matches
    train_substitute exactly."""
    return train_substitute(net, records, dataclasses.replace(cfg, lambda_strategy=0.0))


def write_loss_trace(trace: list[EpochLoss], path) -> None:
    """Loss trace CSV: epoch, performance_loss, strategy_loss, total."""
    lines = ["epoch,performance_loss,strategy_loss,total"]
    for row in trace:
        lines.append(f"{row.epoch},{row.performance!r},{row.strategy!r},{row.total!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
