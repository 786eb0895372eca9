"""Changepoint oracles.

The segment marginal is checked against an independent route: the chain rule
of sequential Student-t posterior predictives under the same conjugate
Normal model. The DP segmentation is checked against brute-force
enumeration of all cut placements.
"""

import itertools
import math

import numpy as np
import pytest
from scipy import stats

from exitsteal.changepoint import (
    ChangepointResult,
    SegmentPrior,
    assign_exit,
    assign_exits,
    detect_changepoints,
    segment_log_marginal,
)
from exitsteal.errors import ContractError


def sequential_predictive_oracle(xs, prior: SegmentPrior) -> float:
    """log p(x_1..x_n) as a product of Student-t one-step predictives.

    Independent of the closed-form route: only the standard conjugate
    posterior updates and scipy's t density are used.
    """
    mu, kap = prior.mu0, prior.kappa0
    al, be = prior.alpha0, prior.beta0
    total = 0.0
    for x in xs:
        scale = math.sqrt(be * (kap + 1.0) / (al * kap))
        total += stats.t.logpdf(x, df=2.0 * al, loc=mu, scale=scale)
        be = be + kap * (x - mu) ** 2 / (2.0 * (kap + 1.0))
        mu = (kap * mu + x) / (kap + 1.0)
        kap += 1.0
        al += 0.5
    return total


def enumeration_oracle(x, min_segment, k_max, p=0.5):
    """Best segmentation of sorted x by brute force over cut positions.

    Mirrors the detection objective term for term: standardized values,
    NIG marginals with the local-scale prior b_0 = k_0 * var, the
    sorted-contiguity factorials, a uniform position prior per cut, and
    the geometric count prior.
    """
    x = np.sort(np.asarray(x, dtype=float))
    n = x.shape[0]
    z = (x - x.mean()) / x.std(ddof=1)
    base = SegmentPrior.from_data(z)
    prior = SegmentPrior(
        mu0=base.mu0,
        beta0=max(base.kappa0 * base.beta0, 1e-12),
        kappa0=base.kappa0,
        alpha0=base.alpha0,
    )
    best_score, best_cuts = -np.inf, None
    max_segments = min(k_max + 1, n // min_segment)
    for m in range(1, max_segments + 1):
        for cuts in itertools.combinations(range(1, n), m - 1):
            edges = (0,) + cuts + (n,)
            if any(b - a < min_segment for a, b in zip(edges, edges[1:])):
                continue
            score = sum(
                segment_log_marginal(z[a:b], prior) + math.lgamma(b - a + 1)
                for a, b in zip(edges, edges[1:])
            )
            score += (m - 1) * (math.log(1.0 - p) - math.log(n - 1.0))
            score += math.log(p) - math.lgamma(n + 1)
            if score > best_score:
                best_score, best_cuts = score, cuts
    boundaries = tuple((x[c - 1] + x[c]) / 2.0 for c in best_cuts)
    return best_score, boundaries


# ---------------------------------------------------------------------------
# segment marginal


def test_marginal_matches_sequential_predictive_oracle():
    rng = np.random.default_rng(0)
    for trial in range(60):
        n = int(rng.integers(1, 40))
        xs = rng.normal(rng.uniform(-3, 3), rng.uniform(0.1, 2.0), size=n)
        prior = SegmentPrior(
            mu0=float(rng.uniform(-2, 2)),
            beta0=float(rng.uniform(0.05, 3.0)),
            kappa0=float(rng.uniform(0.005, 1.0)),
            alpha0=float(rng.uniform(0.5, 4.0)),
        )
        ours = segment_log_marginal(xs, prior)
        ref = sequential_predictive_oracle(xs, prior)
        assert ours == pytest.approx(ref, abs=1e-9)


def test_marginal_default_prior_from_slice():
    xs = np.random.default_rng(5).normal(0.0, 1.0, size=50)
    prior = SegmentPrior.from_data(xs)
    assert segment_log_marginal(xs) == pytest.approx(
        sequential_predictive_oracle(xs, prior), abs=1e-9
    )


def test_marginal_prefers_tight_segments():
    prior = SegmentPrior(mu0=0.0, beta0=1.0)
    tight = np.full(20, 0.5) + np.linspace(-1e-3, 1e-3, 20)
    loose = np.linspace(-2.0, 3.0, 20)
    assert segment_log_marginal(tight, prior) > segment_log_marginal(loose, prior)


def test_marginal_empty_rejected():
    with pytest.raises(ContractError):
        segment_log_marginal(np.array([]))


def test_marginal_single_point_finite():
    val = segment_log_marginal(np.array([1.3]), SegmentPrior(mu0=0.0, beta0=1.0))
    assert np.isfinite(val)


# ---------------------------------------------------------------------------
# DP vs enumeration


def test_dp_equals_enumeration():
    rng = np.random.default_rng(42)
    for trial in range(100):
        n = int(rng.integers(10, 21))
        kind = trial % 3
        if kind == 0:
            x = rng.normal(0.0, 1.0, size=n)
        elif kind == 1:
            half = n // 2
            x = np.concatenate(
                [rng.normal(0.0, 0.05, half), rng.normal(1.0, 0.05, n - half)]
            )
        else:
            third = n // 3
            x = np.concatenate(
                [
                    rng.normal(0.0, 0.05, third),
                    rng.normal(1.0, 0.05, third),
                    rng.normal(2.0, 0.05, n - 2 * third),
                ]
            )
        got = detect_changepoints(x, min_segment=3, k_max=3)
        want_score, want_bounds = enumeration_oracle(x, min_segment=3, k_max=3)
        assert got.log_posterior == pytest.approx(want_score, abs=1e-9)
        assert got.boundaries == pytest.approx(want_bounds, abs=0)


def test_permutation_invariance():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.normal(1, 0.02, 30), rng.normal(2, 0.02, 30)])
    a = detect_changepoints(x)
    b = detect_changepoints(rng.permutation(x))
    assert a.boundaries == b.boundaries
    assert a.log_posterior == b.log_posterior


def test_affine_equivariance():
    rng = np.random.default_rng(4)
    x = np.concatenate([rng.normal(1, 0.03, 25), rng.normal(3, 0.03, 25)])
    base = detect_changepoints(x)
    scaled = detect_changepoints(4.0 * x + 7.0)
    assert scaled.exit_count == base.exit_count
    for got, want in zip(scaled.boundaries, base.boundaries):
        assert got == pytest.approx(4.0 * want + 7.0, rel=1e-9)
    # detection standardizes internally, so the score itself is invariant
    assert scaled.log_posterior == pytest.approx(base.log_posterior, abs=1e-8)


# ---------------------------------------------------------------------------
# recovery on constructed mixtures


def test_two_cluster_recovery():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(1.0, 0.01, 10), rng.normal(2.0, 0.01, 10)])
    res = detect_changepoints(x)
    assert res.exit_count == 2
    assert 1.05 < res.boundaries[0] < 1.95


def test_single_cluster_no_changepoints():
    rng = np.random.default_rng(2)
    res = detect_changepoints(rng.normal(1.0, 0.01, 40))
    assert res.exit_count == 1
    assert res.boundaries == ()
    assert res.changepoint_count == 0


def test_four_cluster_recovery_with_boundary_locations():
    rng = np.random.default_rng(6)
    centers = [1.0, 2.0, 3.0, 4.0]
    x = np.concatenate([rng.normal(c, 0.05, 50) for c in centers])
    res = detect_changepoints(x)
    assert res.exit_count == 4
    for got, mid in zip(res.boundaries, [1.5, 2.5, 3.5]):
        assert abs(got - mid) < 0.25


def test_large_tight_clusters_do_not_oversegment():
    # calibration sets put hundreds of near-identical runtimes in one
    # cluster; sorted order statistics must not masquerade as changepoints
    rng = np.random.default_rng(7)
    sizes = (600, 200, 150, 50)
    centers = (1.0, 2.0, 3.0, 4.0)
    x = np.concatenate(
        [rng.normal(c, 0.05, s) for c, s in zip(centers, sizes)]
    )
    res = detect_changepoints(x)
    assert res.exit_count == 4


def test_min_segment_enforced():
    rng = np.random.default_rng(8)
    # 3 stray points below a 30-point cluster cannot form their own segment
    x = np.concatenate([np.array([0.0, 0.01, 0.02]), rng.normal(5.0, 0.01, 30)])
    res = detect_changepoints(x, min_segment=5)
    if res.exit_count > 1:
        srt = np.sort(x)
        edges = np.searchsorted(srt, res.boundaries)
        sizes = np.diff(np.concatenate([[0], edges, [len(srt)]]))
        assert sizes.min() >= 5


def test_too_few_points_rejected():
    with pytest.raises(ContractError):
        detect_changepoints(np.ones(9), min_segment=5)


def test_non_finite_rejected():
    with pytest.raises(ContractError):
        detect_changepoints(np.array([1.0, np.nan] + [2.0] * 10))


# ---------------------------------------------------------------------------
# exit assignment


def test_assign_exit_half_open_intervals():
    res = ChangepointResult(boundaries=(1.2, 2.1, 3.0), log_posterior=0.0)
    assert assign_exit(1.5, res) == 2
    assert assign_exit(0.0, res) == 1
    assert assign_exit(99.0, res) == 4
    # a runtime equal to a boundary belongs to the right interval
    assert assign_exit(2.1, res) == 3


def test_assign_exits_vectorized_matches_scalar():
    res = ChangepointResult(boundaries=(0.5, 1.5), log_posterior=0.0)
    runtimes = np.array([0.1, 0.5, 0.7, 1.5, 2.0])
    got = assign_exits(runtimes, res)
    assert got.tolist() == [assign_exit(r, res) for r in runtimes]


def test_assignment_accuracy_on_heldout():
    rng = np.random.default_rng(9)
    centers = np.array([1.0, 2.0, 3.0, 4.0])
    sigma = 0.06
    train = np.concatenate([rng.normal(c, sigma, 50) for c in centers])
    res = detect_changepoints(train)
    assert res.exit_count == 4
    labels = rng.integers(0, 4, size=10_000)
    held = rng.normal(centers[labels], sigma)
    got = assign_exits(held, res)
    assert (got == labels + 1).mean() >= 0.995
