"""Metric tests: hand-counted closeness/accuracy fixtures, cost additivity,
self-comparison exactness, and report serialization."""

import numpy as np
import pytest

from exitsteal.errors import ContractError
from exitsteal.metrics import (
    CSV_COLUMNS,
    EvalReport,
    accuracy,
    closeness,
    computation_cost,
    make_report,
)
from exitsteal.multiexit import (
    ExitOutcome,
    OutputStrategy,
    cascade_outcomes,
    flops_to_exit,
)
from exitsteal.victimlab import TimingModel, VictimDeployment

from _utils import binary_conf_logit
from test_attack import conf_driven_net


def out(pred, exit_index, flops=10):
    return ExitOutcome(
        predicted_class=pred, exit_index=exit_index, probs=np.array([0.5, 0.5]), flops=flops
    )


def test_closeness_hand_count():
    sub = [out(0, 1), out(1, 2), out(0, 2)]
    vic = [out(0, 1), out(1, 1), out(0, 2)]
    # middle sample agrees on the class but not the exit: 2 of 3 count
    assert closeness(sub, vic) == pytest.approx(2.0 / 3.0)
    assert closeness(vic, vic) == 1.0


def test_closeness_requires_both_class_and_exit():
    vic = [out(0, 1)]
    assert closeness([out(0, 2)], vic) == 0.0
    assert closeness([out(1, 1)], vic) == 0.0
    assert closeness([out(0, 1)], vic) == 1.0


def test_closeness_validation():
    with pytest.raises(ContractError):
        closeness([], [])
    with pytest.raises(ContractError):
        closeness([out(0, 1)], [out(0, 1), out(0, 1)])


def test_accuracy_hand_count():
    outs = [out(0, 1), out(1, 1), out(2, 2), out(1, 2), out(0, 1)]
    assert accuracy(outs, [0, 1, 0, 1, 1]) == pytest.approx(0.6)
    with pytest.raises(ContractError):
        accuracy([], [])
    with pytest.raises(ContractError):
        accuracy(outs, [0, 1])


def test_computation_cost_additivity():
    outs = [out(0, 1, flops=5), out(0, 2, flops=7), out(0, 1, flops=5), out(0, 2, flops=9)]
    total = computation_cost(outs)
    assert total.flops == 26
    assert total.gflops == pytest.approx(26e-9)
    a, b = computation_cost(outs[:2]), computation_cost(outs[2:])
    assert a.flops + b.flops == total.flops
    with pytest.raises(ContractError):
        computation_cost([])


def test_cascade_cost_equals_exit_histogram_dot_product():
    net = conf_driven_net()
    xs = np.array(
        [[binary_conf_logit(p)] for p in (0.99, 0.95, 0.6, 0.7, 0.92, 0.55)]
    )
    outs = cascade_outcomes(net, xs, OutputStrategy.uniform(0.9, 2))
    per_exit = np.array([flops_to_exit(net, 1), flops_to_exit(net, 2)])
    hist = np.bincount([o.exit_index for o in outs], minlength=3)[1:]
    assert computation_cost(outs).flops == int(hist @ per_exit)


def fixture_deployment():
    net = conf_driven_net()
    timing = TimingModel.proportional(net, per_flop=1e-3, noise_sigma=0.0, seed=0)
    return VictimDeployment(net, OutputStrategy.uniform(0.9, 2), timing)


def test_make_report_self_comparison_is_exact():
    dep = fixture_deployment()
    xs = np.array([[binary_conf_logit(p)] for p in (0.99, 0.95, 0.6, 0.7)])
    labels = np.array([0, 1, 0, 1])
    rep = make_report(dep.net, dep, dep.strategy, xs, labels)
    assert rep.clo == 1.0
    assert rep.cc_ratio == 1.0
    # this net predicts class 0 whenever x > 0
    assert rep.acc == 0.5
    assert rep.sample_count == 4
    f1, f2 = flops_to_exit(dep.net, 1), flops_to_exit(dep.net, 2)
    assert rep.cc_flops == 2 * f1 + 2 * f2
    assert rep.per_exit_agreement == (2, 2)


def test_make_report_counts_exit_mismatches():
    dep = fixture_deployment()
    xs = np.array([[binary_conf_logit(p)] for p in (0.99, 0.95, 0.6, 0.7)])
    labels = np.array([0, 0, 0, 0])
    # same net, stricter thresholds: the 0.95 sample now falls through to
    # exit 2 while the victim stops at exit 1
    rep = make_report(dep.net, dep, OutputStrategy.uniform(0.97, 2), xs, labels)
    assert rep.clo == 0.75
    assert rep.per_exit_agreement == (1, 2)
    f1, f2 = flops_to_exit(dep.net, 1), flops_to_exit(dep.net, 2)
    assert rep.cc_ratio == pytest.approx((f1 + 3 * f2) / (2 * f1 + 2 * f2))
    assert rep.acc == 1.0


def test_make_report_validation():
    dep = fixture_deployment()
    with pytest.raises(ContractError):
        make_report(dep.net, dep, dep.strategy, np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(ContractError):
        make_report(dep.net, dep, dep.strategy, np.zeros((2, 1)), np.zeros(3))


def test_report_json_roundtrip_is_byte_stable():
    rep = EvalReport(
        acc=0.8125,
        clo=2.0 / 3.0,
        cc_flops=123456,
        cc_gflops=123456e-9,
        cc_ratio=1.0 / 3.0,
        per_exit_agreement=(5, 3, 1),
        sample_count=16,
    )
    text = rep.to_json()
    again = EvalReport.from_json(text)
    assert again == rep
    assert again.to_json() == text
    # keys are sorted, so the exact byte layout is reproducible
    assert text.index('"acc"') < text.index('"cc_flops"') < text.index('"clo"')


def test_csv_row_matches_column_order():
    assert CSV_COLUMNS == ("acc", "clo", "cc_gflops", "cc_ratio")
    rep = EvalReport(
        acc=0.5,
        clo=0.25,
        cc_flops=1000,
        cc_gflops=1e-6,
        cc_ratio=0.75,
        per_exit_agreement=(1,),
        sample_count=4,
    )
    row = rep.csv_row()
    assert row == [repr(0.5), repr(0.25), repr(1e-6), repr(0.75)]
    assert [float(v) for v in row] == [0.5, 0.25, 1e-6, 0.75]
