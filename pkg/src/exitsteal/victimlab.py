"""Victim side of the laboratory: training, deployment, timed queries.

A deployed victim exposes exactly two things to the outside: the taken
exit's probability vector, and (optionally) a runtime. The query functions'
return types cannot express the exit index or intermediate activations, so
opacity holds by construction. Runtimes come from a simulated timing model
(per-block and per-head costs plus Gaussian noise from a seeded stream); a
wall-clock mode exists for demos but is never used by the experiments.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ContractError
from .multiexit import (
    MultiExitNet,
    OutputStrategy,
    cascade,
    forward_all_exits,
)

Array = np.ndarray

# Grid scanned by select_traditional_strategy: 0.05 steps up to 0.95, then
# the conventional 0.99 endpoint.
TAU_GRID = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2)) + (0.99,)


@dataclass(frozen=True)
class TimingModel:
    """Simulated inference cost: one positive cost per backbone block, one
    per exit head, plus N(0, noise_sigma) measurement noise."""

    block_costs: tuple[float, ...]
    head_costs: tuple[float, ...]
    noise_sigma: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "block_costs", tuple(float(c) for c in self.block_costs))
        object.__setattr__(self, "head_costs", tuple(float(c) for c in self.head_costs))
        if not self.block_costs or not self.head_costs:
            raise ContractError("timing model needs block and head costs")
        if min(self.block_costs) <= 0.0 or min(self.head_costs) <= 0.0:
            raise ContractError("timing costs must be positive")
        if self.noise_sigma < 0.0:
            raise ContractError("noise_sigma must be >= 0")

    @classmethod
    def proportional(cls, net: MultiExitNet, per_flop: float, noise_sigma: float, seed: int) -> "TimingModel":
        """Costs proportional to each block's and head's FLOPs."""
        if per_flop <= 0.0:
            raise ContractError("per_flop must be positive")
        return cls(
            block_costs=tuple(f * per_flop for f in net._block_flops),
            head_costs=tuple(f * per_flop for f in net._head_flops),
            noise_sigma=float(noise_sigma),
            seed=int(seed),
        )


def exit_base_times(net: MultiExitNet, timing: TimingModel) -> Array:
    """Noise-free runtime of stopping at each exit, shallowest first."""
    if len(timing.block_costs) != len(net.backbone.blocks):
        raise ContractError(
            f"timing has {len(timing.block_costs)} block costs, net has {len(net.backbone.blocks)} blocks"
        )
    if len(timing.head_costs) != net.exit_count:
        raise ContractError(
            f"timing has {len(timing.head_costs)} head costs, net has {net.exit_count} exits"
        )
    cb = np.cumsum(timing.block_costs)
    ch = np.cumsum(timing.head_costs)
    idx = np.asarray(net.exit_indices) - 1
    return cb[idx] + ch[: net.exit_count]


class VictimDeployment:
    """A frozen victim: network copy (write-protected), a uniform-threshold
    output strategy, and a timing model whose noise stream advances
    deterministically from its seed, one draw per timed query."""

    def __init__(
        self,
        net: MultiExitNet,
        strategy: OutputStrategy,
        timing: TimingModel,
        wall_clock: bool = False,
    ):
        if strategy.exit_count != net.exit_count:
            raise ContractError(
                f"strategy has {strategy.exit_count} exits, net has {net.exit_count}"
            )
        self.net = net.copy(frozen=True)
        self.strategy = strategy
        self.timing = timing
        self.wall_clock = bool(wall_clock)
        self._base_times = exit_base_times(self.net, timing)
        self._rng = np.random.default_rng(timing.seed)

    @property
    def exit_base_times(self) -> Array:
        return self._base_times.copy()


def query_many(dep: VictimDeployment, x) -> Array:
    """Probability vectors for a batch of inputs. Nothing else leaves the
    deployment: no exit index, no intermediate activations."""
    _, _, _, probs = cascade(dep.net, x, dep.strategy)
    return probs


def query_timed_many(dep: VictimDeployment, x) -> tuple[Array, Array]:
    """(probability vectors, runtimes) for a batch. Runtimes are the taken
    exit's base cost plus one noise draw per sample, in sample order."""
    if dep.wall_clock:
        xv = nm.as_array(x)
        probs = np.empty((xv.shape[0], dep.net.class_count))
        runtimes = np.empty(xv.shape[0])
        for i in range(xv.shape[0]):
            t0 = time.perf_counter()
            _, _, _, p = cascade(dep.net, xv[i : i + 1], dep.strategy)
            runtimes[i] = time.perf_counter() - t0
            probs[i] = p[0]
        return probs, runtimes
    exits, _, _, probs = cascade(dep.net, x, dep.strategy)
    runtimes = dep._base_times[exits - 1]
    if dep.timing.noise_sigma > 0.0:
        runtimes = runtimes + dep._rng.normal(0.0, dep.timing.noise_sigma, size=exits.shape[0])
    return probs, runtimes


def query(dep: VictimDeployment, x) -> Array:
    """Black-box query for a single input: the taken exit's probabilities."""
    xv = nm.as_array(x)
    return query_many(dep, xv[None])[0]


def query_timed(dep: VictimDeployment, x) -> tuple[Array, float]:
    """Black-box timed query for a single input: (probabilities, runtime).
    Shares the batched code path, so a sequence of single queries consumes
    the noise stream exactly like one batched call."""
    xv = nm.as_array(x)
    probs, runtimes = query_timed_many(dep, xv[None])
    return probs[0], float(runtimes[0])


def train_victim(
    net: MultiExitNet,
    inputs,
    labels,
    *,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 128,
    momentum: float = 0.0,
) -> MultiExitNet:
    """Joint training: the cross-entropy losses of all exits are added
    together and minimized by mini-batch SGD. Deterministic for a fixed
    seed; zero epochs leaves the parameters untouched. The net is updated
    in place and returned."""
    x = nm.as_array(inputs)
    y = np.asarray(labels)
    if x.ndim < 2 or x.shape[0] == 0:
        raise ContractError("training needs a non-empty batch of inputs")
    if y.shape != (x.shape[0],):
        raise ContractError("labels must be 1-D and match the inputs")
    if epochs < 0:
        raise ContractError("epochs must be >= 0")
    if lr <= 0.0:
        raise ContractError("lr must be positive")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    velocity = [np.zeros_like(p) for p in net.parameters()] if momentum > 0.0 else None
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            take = order[start : start + batch_size]
            tape = nm.GradTape()
            bound = net.bind(tape)
            logits = net.forward_exit_logits(x[take], params=bound)
            loss = nm.cross_entropy(logits[0], y[take])
            for lg in logits[1:]:
                loss = loss + nm.cross_entropy(lg, y[take])
            grads = nm.grad(loss, tape)
            for i, (arr, node) in enumerate(zip(net.parameters(), bound)):
                g = grads[node]
                if velocity is not None:
                    velocity[i] = momentum * velocity[i] + g
                    g = velocity[i]
                arr -= lr * g
    return net


def select_traditional_strategy(
    net: MultiExitNet,
    inputs,
    labels,
    accuracy_slack: float,
    grid: tuple[float, ...] = TAU_GRID,
) -> OutputStrategy:
    """Pick a uniform threshold the conventional way: scan the grid, keep
    thresholds whose cascade accuracy on the calibration set stays within
    `accuracy_slack` of the final exit's accuracy, and among those return
    the one with the smallest total computation (ties break toward the
    smaller threshold). If nothing is feasible the result routes everything
    to the last exit and carries fallback=True."""
    x = nm.as_array(inputs)
    y = np.asarray(labels)
    if x.shape[0] == 0:
        raise ContractError("calibration set must be non-empty")
    if y.shape != (x.shape[0],):
        raise ContractError("labels must be 1-D and match the inputs")
    probs = forward_all_exits(net, x)
    stacked = np.stack(probs, axis=1)  # (B, K, C)
    conf = stacked.max(axis=2)
    classes = stacked.argmax(axis=2)
    flop_table = np.asarray([net._flops_to_exit[k] for k in range(net.exit_count)])
    final_acc = float((classes[:, -1] == y).mean())

    best_tau = None
    best_cost = None
    for tau in grid:
        strat = OutputStrategy.uniform(tau, net.exit_count)
        thr = np.asarray(strat.thresholds)
        hits = conf[:, :-1] >= thr[None, :]
        full = np.concatenate([hits, np.ones((conf.shape[0], 1), dtype=bool)], axis=1)
        exits = full.argmax(axis=1)
        acc = float((classes[np.arange(len(y)), exits] == y).mean())
        if acc < final_acc - accuracy_slack:
            continue
        cost = int(flop_table[exits].sum())
        if best_cost is None or cost < best_cost:
            best_tau, best_cost = float(tau), cost
    if best_tau is None:
        return OutputStrategy.never_early(net.exit_count, fallback=True)
    return OutputStrategy.uniform(best_tau, net.exit_count)
