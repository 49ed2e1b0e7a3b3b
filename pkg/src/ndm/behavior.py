"""Trial aggregation: psychometric curves, sensitivity/bias and trend statistics.

Signed coherence is positive for rightward motion. The psychometric model is
``p(right) = 1 / (1 + exp(-k x + b))``: ``k`` is the sensitivity, ``b`` the
bias (positive ``b`` shifts the curve right, i.e. toward leftward choices).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats

from .errors import CoverageError, DomainError, FitError
from .stimulus import Direction

SCHEMA_VERSION = "1"
NO_DECISION_TIME_MS = 2000.0


@dataclass
class TrialResult:
    coherence: float
    true_direction: Direction
    choice: Direction
    decision_time: float  # ms from stimulus onset
    no_decision_flag: bool = False
    seed: int = 0
    rate_traces: dict | None = None  # population -> Hz per 10 ms bin from onset
    mean_abs_input: dict | None = None  # population -> mean |input current| (pA)
    tie_break: bool = False
    spikes: tuple | None = None  # (times_ms, neuron_ids) when a raster was recorded
    rate_left: float = float("nan")  # windowed LIP_A rate (Hz) at the readout point
    rate_right: float = float("nan")  # windowed LIP_B rate (Hz) at the readout point

    def __post_init__(self):
        self.true_direction = Direction.parse(self.true_direction)
        self.choice = Direction.parse(self.choice)

    @property
    def correct(self) -> bool:
        return self.choice is self.true_direction

    @property
    def signed_coherence(self) -> float:
        return self.true_direction.sign * self.coherence

    def record(self) -> dict:
        """Flat, JSON-friendly summary (no traces)."""
        return {
            "coherence": self.coherence,
            "true_direction": self.true_direction.value,
            "choice": self.choice.value,
            "correct": self.correct,
            "decision_time": self.decision_time,
            "no_decision_flag": self.no_decision_flag,
            "tie_break": self.tie_break,
            "seed": self.seed,
            "rate_left": self.rate_left,
            "rate_right": self.rate_right,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TrialResult":
        rec = {k: v for k, v in rec.items() if k != "correct"}
        return cls(**rec)


@dataclass
class PsychometricFit:
    k: float
    b: float
    residual: float
    n_points: int
    method: str = "lsq"

    def predict(self, x):
        return psychometric(np.asarray(x, dtype=float), self.k, self.b)


@dataclass
class CoherencePoint:
    signed_coherence: float
    n: int
    p_right: float
    mean_decision_time: float
    n_no_decision: int


@dataclass
class BehavioralSummary:
    points: list
    fit: PsychometricFit
    decision_time_curve: list  # (signed coherence, median-smoothed mean decision time)
    n_trials: int
    n_no_decision: int
    accuracy: float
    accuracy_by_coherence: dict = field(default_factory=dict)  # |c| -> fraction correct

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "fit": asdict(self.fit),
            "n_trials": self.n_trials,
            "n_no_decision": self.n_no_decision,
            "accuracy": self.accuracy,
            "accuracy_by_coherence": {repr(k): v for k, v in self.accuracy_by_coherence.items()},
            "points": [asdict(p) for p in self.points],
            "decision_time_curve": [list(x) for x in self.decision_time_curve],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["signed_coherence", "n", "p_right", "mean_decision_time_ms", "smoothed_decision_time_ms",
                    "n_no_decision"])
        smooth = dict(self.decision_time_curve)
        for p in self.points:
            w.writerow([_fmt(p.signed_coherence), p.n, _fmt(p.p_right), _fmt(p.mean_decision_time),
                        _fmt(smooth[p.signed_coherence]), p.n_no_decision])
        return buf.getvalue()

    def fit_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, **asdict(self.fit)}, sort_keys=True, indent=1)


def _fmt(x) -> str:
    return repr(float(x))


def psychometric(x, k, b):
    return 1.0 / (1.0 + np.exp(-k * x + b))


def fit_psychometric(points, method: str = "lsq") -> PsychometricFit:
    """Fit ``p = 1 / (1 + exp(-k x + b))`` to ``(x, p_right, n)`` triples.

    ``method="lsq"`` minimises the squared error in probability (each point
    weighted equally) with Levenberg-Marquardt-style trust-region least squares
    (``xtol = ftol = 1e-12``, at most 10000 evaluations) from three starting
    points, keeping the lowest residual. ``method="mle"`` maximises the
    binomial likelihood instead.
    """
    arr = np.asarray([(float(x), float(p), float(n)) for x, p, n in points])
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise FitError("no points to fit")
    x, p, n = arr.T
    if np.unique(x).size < 3:
        raise FitError("need at least three distinct coherence values")
    if np.any((p < 0) | (p > 1)):
        raise FitError("probabilities must lie in [0, 1]")
    if np.ptp(p) == 0:
        raise FitError("degenerate data: every point has the same choice probability")

    def resid(theta):
        return psychometric(x, theta[0], theta[1]) - p

    def nll(theta):
        q = np.clip(psychometric(x, theta[0], theta[1]), 1e-12, 1 - 1e-12)
        return -np.sum(n * (p * np.log(q) + (1 - p) * np.log(1 - q)))

    best = None
    for k0 in (1.0, 10.0, 40.0):
        if method == "lsq":
            sol = optimize.least_squares(resid, x0=[k0, 0.0], xtol=1e-12, ftol=1e-12, gtol=1e-12,
                                         max_nfev=10000, method="trf")
            theta, score = sol.x, float(np.sum(sol.fun**2))
        elif method == "mle":
            sol = optimize.minimize(nll, x0=[k0, 0.0], method="Nelder-Mead",
                                    options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
            theta, score = sol.x, float(np.sum(resid(sol.x) ** 2))
        else:
            raise ValueError(f"unknown fit method {method!r}")
        if best is None or score < best[1] - 1e-15:
            best = (theta, score)
    theta, score = best
    if not np.all(np.isfinite(theta)):
        raise FitError("fit diverged")
    return PsychometricFit(float(theta[0]), float(theta[1]), score, int(x.size), method)


def moving_median(x, y, window: float) -> np.ndarray:
    """Median of ``y`` over points with ``|x_i - x| <= window / 2``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    for i, xi in enumerate(x):
        out[i] = np.median(y[np.abs(x - xi) <= window / 2 + 1e-12])
    return out


def group_points(trials) -> list:
    groups = {}
    for t in trials:
        key = round(t.signed_coherence, 6)
        groups.setdefault(key, []).append(t)
    pts = []
    for key in sorted(groups):
        g = groups[key]
        pts.append(CoherencePoint(
            key, len(g),
            sum(t.choice is Direction.RIGHT for t in g) / len(g),
            float(np.mean([NO_DECISION_TIME_MS if t.no_decision_flag else t.decision_time for t in g])),
            sum(t.no_decision_flag for t in g),
        ))
    return pts


def summarize(trials, smoothing_window: float = 0.10, method: str = "lsq") -> BehavioralSummary:
    """Aggregate trials into choice probabilities, decision times and a fit.

    No-decision trials count with their fallback choice and with a decision
    time of 2000 ms.
    """
    trials = list(trials)
    if not trials:
        raise CoverageError("no trials to summarise")
    dirs = {t.true_direction for t in trials}
    if len(dirs) < 2:
        raise CoverageError("both motion directions must be represented")
    pts = group_points(trials)
    fit = fit_psychometric([(p.signed_coherence, p.p_right, p.n) for p in pts], method=method)
    xs = [p.signed_coherence for p in pts]
    smooth = moving_median(xs, [p.mean_decision_time for p in pts], smoothing_window)
    by_coh = {}
    for t in trials:
        by_coh.setdefault(round(t.coherence, 6), []).append(t.correct)
    return BehavioralSummary(
        pts, fit, [(x, float(s)) for x, s in zip(xs, smooth)], len(trials),
        sum(t.no_decision_flag for t in trials),
        float(np.mean([t.correct for t in trials])),
        {c: float(np.mean(v)) for c, v in sorted(by_coh.items())},
    )


def mean_decision_time_by_coherence(trials) -> dict:
    out = {}
    for t in trials:
        out.setdefault(round(t.coherence, 6), []).append(
            NO_DECISION_TIME_MS if t.no_decision_flag else t.decision_time)
    return {c: float(np.mean(v)) for c, v in sorted(out.items())}


@dataclass
class Trend:
    slope: float
    intercept: float
    p_value: float
    stderr: float
    n: int


def regress_metric_vs_level(levels, metric) -> Trend:
    """Ordinary least squares of ``metric`` on ``levels`` with a two-sided t-test on the slope."""
    x = np.asarray(levels, dtype=float)
    y = np.asarray(metric, dtype=float)
    if x.shape != y.shape or x.size < 3:
        raise DomainError("need equal-length series with at least three points")
    if np.ptp(x) == 0:
        raise DomainError("levels have zero variance")
    n = x.size
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    res = y - (intercept + slope * x)
    dof = n - 2
    s2 = float(np.sum(res**2) / dof) if dof > 0 else 0.0
    se = math.sqrt(s2 / sxx) if sxx > 0 else math.inf
    if se == 0.0:
        p = 0.0 if slope != 0.0 else 1.0
    else:
        p = float(2 * stats.t.sf(abs(slope / se), dof))
    return Trend(slope, intercept, p, se, n)
