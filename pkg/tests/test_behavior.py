import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ndm.behavior import (NO_DECISION_TIME_MS, TrialResult, fit_psychometric, moving_median, psychometric,
                          regress_metric_vs_level, summarize)
from ndm.errors import CoverageError, DomainError, FitError
from ndm.stimulus import Direction

X = np.array([-0.8, -0.4, -0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2, 0.4, 0.8])


def _points(k, b, x=X, n=20):
    return [(xi, float(psychometric(xi, k, b)), n) for xi in x]


def _trials(spec):
    """``spec``: list of (coherence, true direction, choice, decision time)."""
    return [TrialResult(c, d, ch, t) for c, d, ch, t in spec]


def test_recovers_noiseless_parameters():
    fit = fit_psychometric(_points(19.31, 0.0))
    assert fit.k == pytest.approx(19.31, rel=0.01)
    assert abs(fit.b) < 1e-6
    fit = fit_psychometric(_points(7.5, -1.2))
    assert fit.k == pytest.approx(7.5, rel=1e-6) and fit.b == pytest.approx(-1.2, rel=1e-6)


def test_mle_option_recovers_too():
    fit = fit_psychometric(_points(12.0, 0.4), method="mle")
    assert fit.method == "mle"
    assert fit.k == pytest.approx(12.0, rel=1e-3) and fit.b == pytest.approx(0.4, abs=1e-3)


@given(k=st.floats(1, 40), b=st.floats(-2, 2))
@settings(max_examples=25, deadline=None)
def test_mirrored_data_flips_bias(k, b):
    pts = _points(k, b)
    mirrored = [(-x, 1 - p, n) for x, p, n in pts]
    a, m = fit_psychometric(pts), fit_psychometric(mirrored)
    assert m.k == pytest.approx(a.k, rel=1e-4, abs=1e-4)
    assert m.b == pytest.approx(-a.b, rel=1e-4, abs=1e-4)


def test_symmetric_data_has_no_bias():
    rng = np.random.default_rng(0)
    p = np.clip(psychometric(X[X > 0], 15, 0) + rng.normal(0, 0.02, (X > 0).sum()), 0, 1)
    pts = [(x, q, 10) for x, q in zip(X[X > 0], p)] + [(-x, 1 - q, 10) for x, q in zip(X[X > 0], p)] + [(0, .5, 10)]
    assert abs(fit_psychometric(pts).b) < 1e-6


def test_fit_errors():
    with pytest.raises(FitError):
        fit_psychometric([(0.1, 0.5, 1), (0.2, 0.5, 1), (0.3, 0.5, 1)])
    with pytest.raises(FitError):
        fit_psychometric([(0.1, 0.2, 1), (0.2, 0.6, 1)])
    with pytest.raises(FitError):
        fit_psychometric([(0.1, 0.2, 1), (0.2, 1.6, 1), (0.3, 0.4, 1)])


def test_residual_shrinks_with_more_trials():
    rng = np.random.default_rng(1)
    res = []
    for n in (10, 100, 10_000):
        p = rng.binomial(n, psychometric(X, 15, 0)) / n
        res.append(fit_psychometric([(x, q, n) for x, q in zip(X, p)]).residual)
    assert res[0] > res[1] > res[2]


def test_perfect_performance_summary():
    spec = []
    for c in (0.0, 0.4, 0.8):
        for d in Direction:
            for i in range(4):
                choice = d if c > 0 else (Direction.LEFT if i % 2 else Direction.RIGHT)
                spec.append((c, d, choice, 500.0 - 400 * c))
    s = summarize(_trials(spec))
    p = {pt.signed_coherence: pt.p_right for pt in s.points}
    assert p[0.8] == 1.0 and p[-0.8] == 0.0 and p[0.0] == 0.5
    assert s.fit.k > 0
    assert s.accuracy_by_coherence[0.8] == 1.0


def test_summary_is_idempotent_under_duplication():
    rng = np.random.default_rng(2)
    spec = [(c, d, list(Direction)[rng.integers(2)], float(rng.uniform(100, 2000)))
            for c in (0.0, 0.1, 0.4) for d in Direction for _ in range(6)]
    t = _trials(spec)
    a, b = summarize(t), summarize(t + t)
    assert (a.fit.k, a.fit.b) == (b.fit.k, b.fit.b)
    assert [p.p_right for p in a.points] == [p.p_right for p in b.points]
    assert np.allclose(a.decision_time_curve, b.decision_time_curve, rtol=1e-12)


def test_no_decision_counts_as_2000_ms():
    t = _trials([(0.5, "Right", "Right", 300.0), (0.5, "Left", "Left", 400.0), (0.0, "Left", "Right", 2000.0),
                 (0.2, "Right", "Right", 700.0)])
    t[2].no_decision_flag = True
    t[2].decision_time = 1500.0
    s = summarize(t)
    zero = [p for p in s.points if p.signed_coherence == 0.0][0]
    assert zero.mean_decision_time == NO_DECISION_TIME_MS and zero.n_no_decision == 1
    assert s.n_no_decision == 1


def test_single_direction_is_coverage_error():
    with pytest.raises(CoverageError):
        summarize(_trials([(0.1, "Right", "Right", 100.0)] * 3))
    with pytest.raises(CoverageError):
        summarize([])


def test_moving_median_window():
    x = [-0.2, -0.1, 0.0, 0.1, 0.2]
    y = [5.0, 1.0, 9.0, 2.0, 4.0]
    # a 10 % window spans neighbours 0.05 away: only the point itself
    assert list(moving_median(x, y, 0.10)) == y
    assert list(moving_median(x, y, 0.20)) == [3.0, 5.0, 2.0, 4.0, 3.0]


def test_regression_exact_line():
    t = regress_metric_vs_level([0, 1, 2, 3], [0, 2, 4, 6])
    assert t.slope == pytest.approx(2.0) and t.p_value < 1e-12
    t = regress_metric_vs_level([0, 1, 2, 3], [5, 5, 5, 5])
    assert t.slope == 0.0 and t.p_value == 1.0


def test_regression_matches_independent_oracle():
    levels = [0.0, 0.0, 0.3, 0.3, 0.6, 0.6, 0.9, 0.9]
    acc = [0.91, 0.88, 0.74, 0.79, 0.61, 0.66, 0.52, 0.49]
    t = regress_metric_vs_level(levels, acc)
    ref = stats.linregress(levels, acc)
    assert t.slope == pytest.approx(ref.slope, rel=1e-12)
    assert t.intercept == pytest.approx(ref.intercept, rel=1e-12)
    assert t.p_value == pytest.approx(ref.pvalue, rel=1e-9)
    # hand-computed closed form
    x, y = np.array(levels), np.array(acc)
    assert t.slope == pytest.approx(np.sum((x - x.mean()) * (y - y.mean())) / np.sum((x - x.mean()) ** 2))


def test_regression_domain_errors():
    with pytest.raises(DomainError):
        regress_metric_vs_level([1, 1, 1], [1, 2, 3])
    with pytest.raises(DomainError):
        regress_metric_vs_level([1, 2], [1, 2])


def test_exports_are_versioned():
    t = _trials([(c, d, d, 400.0) for c in (0.1, 0.4) for d in Direction]
                + [(0.0, "Left", "Right", 900.0), (0.0, "Right", "Right", 900.0)])
    s = summarize(t)
    d = json.loads(s.fit_json())
    assert d["schema_version"] == "1" and set(d) >= {"k", "b", "residual", "n_points"}
    lines = s.to_csv().splitlines()
    assert lines[0].startswith("signed_coherence,")
    assert len(lines) == 1 + len(s.points)


def test_trial_record_round_trip():
    t = TrialResult(0.2, "Left", "Right", 812.0, seed=9)
    r = t.record()
    assert r["correct"] is False
    assert TrialResult.from_record(r) == t
