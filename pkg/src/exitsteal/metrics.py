"""Evaluation: accuracy, closeness, computation cost, report assembly.

Closeness is stricter than class agreement: a sample counts only when the
substitute predicts the victim's class *and* stops at the same exit index.
Computation cost is the summed per-sample FLOPs of the cascade, reported
both raw and scaled by 1e-9.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ContractError
from .multiexit import ExitOutcome, MultiExitNet, OutputStrategy, cascade
from .victimlab import VictimDeployment

Array = np.ndarray

GFLOP = 1e-9

# Column order used by every CSV row of results.
CSV_COLUMNS = ("acc", "clo", "cc_gflops", "cc_ratio")


def accuracy(outcomes, labels) -> float:
    """Fraction of outcomes whose predicted class matches the true label."""
    outcomes = list(outcomes)
    y = np.asarray(labels)
    if len(outcomes) == 0:
        raise ContractError("accuracy of an empty evaluation")
    if y.shape != (len(outcomes),):
        raise ContractError("labels must align with outcomes")
    pred = np.asarray([o.predicted_class for o in outcomes])
    return float((pred == y).mean())


def closeness(sub_outcomes, victim_outcomes) -> float:
    """Fraction of samples where substitute and victim agree on both the
    predicted class and the exit index."""
    sub = list(sub_outcomes)
    vic = list(victim_outcomes)
    if len(sub) == 0:
        raise ContractError("closeness of an empty evaluation")
    if len(sub) != len(vic):
        raise ContractError(f"outcome lengths differ: {len(sub)} vs {len(vic)}")
    hits = sum(
        1
        for s, v in zip(sub, vic)
        if s.predicted_class == v.predicted_class and s.exit_index == v.exit_index
    )
    return hits / len(sub)


@dataclass(frozen=True)
class ComputationCost:
    flops: int

    @property
    def gflops(self) -> float:
        return self.flops * GFLOP


def computation_cost(outcomes) -> ComputationCost:
    """Total FLOPs spent across all outcomes."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ContractError("computation cost of an empty evaluation")
    return ComputationCost(flops=int(sum(o.flops for o in outcomes)))


@dataclass(frozen=True)
class EvalReport:
    """One model's evaluation against the victim on a labeled test set."""

    acc: float
    clo: float
    cc_flops: int
    cc_gflops: float
    cc_ratio: float
    per_exit_agreement: tuple[int, ...]
    sample_count: int

    def to_json_dict(self) -> dict:
        return {
            "acc": self.acc,
            "clo": self.clo,
            "cc_flops": self.cc_flops,
            "cc_gflops": self.cc_gflops,
            "cc_ratio": self.cc_ratio,
            "per_exit_agreement": list(self.per_exit_agreement),
            "sample_count": self.sample_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        return cls(
            acc=obj["acc"],
            clo=obj["clo"],
            cc_flops=obj["cc_flops"],
            cc_gflops=obj["cc_gflops"],
            cc_ratio=obj["cc_ratio"],
            per_exit_agreement=tuple(obj["per_exit_agreement"]),
            sample_count=obj["sample_count"],
        )

    def csv_row(self) -> list[str]:
        """Values in CSV_COLUMNS order: ACC, CLO, CC (GFLOPs), CC-ratio."""
        return [repr(self.acc), repr(self.clo), repr(self.cc_gflops), repr(self.cc_ratio)]


def make_report(
    sub_net: MultiExitNet,
    victim_dep: VictimDeployment,
    sub_strategy: OutputStrategy,
    inputs,
    labels,
) -> EvalReport:
    """Evaluate a substitute (or the victim itself) on a labeled test set.

    cc_ratio divides the substitute's total cost by the victim's on the same
    inputs. per_exit_agreement[k] counts samples where both models stopped
    at exit k+1 with matching predicted classes; comparing a deployment to
    itself gives clo == 1.0 and cc_ratio == 1.0 exactly.
    """
    x = nm.as_array(inputs)
    y = np.asarray(labels)
    if x.shape[0] == 0:
        raise ContractError("test set must be non-empty")
    if y.shape != (x.shape[0],):
        raise ContractError("labels must align with the test inputs")
    s_exit, s_pred, s_flops, _ = cascade(sub_net, x, sub_strategy)
    v_exit, v_pred, v_flops, _ = cascade(victim_dep.net, x, victim_dep.strategy)
    match = (s_pred == v_pred) & (s_exit == v_exit)
    hist = np.zeros(sub_net.exit_count, dtype=int)
    for k in range(1, sub_net.exit_count + 1):
        hist[k - 1] = int((match & (s_exit == k)).sum())
    sub_cost = int(s_flops.sum())
    victim_cost = int(v_flops.sum())
    return EvalReport(
        acc=float((s_pred == y).mean()),
        clo=float(match.mean()),
        cc_flops=sub_cost,
        cc_gflops=sub_cost * GFLOP,
        cc_ratio=sub_cost / victim_cost,
        per_exit_agreement=tuple(int(h) for h in hist),
        sample_count=int(x.shape[0]),
    )
