"""Experiment families run over the stimulus dataset.

A plan expands into *series* (one curve each: a microstimulation target, a
fine-tuning axis, a perturbation kind/target) and *levels* along the series.
Every (series, level, reinit) cell evaluates every selected stimulus
``repeats`` times. Seeds never depend on which other cells exist:

* network build       ``derive_seed(master, "network", reinit)``
* perturbation draw   ``derive_seed(master, "perturbation", reinit)``
* trial noise         ``derive_seed(master, "trial", reinit, stimulus seed, repeat)``
* stimuli             from the dataset manifest (itself derived from ``master``)

The perturbation stream is shared by all levels of a series, so higher
levels remove a superset of what lower levels remove.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .behavior import NO_DECISION_TIME_MS, SCHEMA_VERSION, TrialResult, regress_metric_vs_level, summarize
from .errors import CorruptionError, FitError, NdmError, PersistenceError, SpecError, ValidationError
from .network import (Microstimulation, NetworkSpec, Perturbation, TrialSettings, apply_perturbation, build_network,
                      calibrate_input_scale, run_trial)
from .retina import LgnDrive, RetinaParams, compute_lgn_drive
from .seeding import derive_seed
from .stimulus import DatasetManifest, RdkParams, generate_stimulus, load_stimulus, params_for, plan_dataset

KINDS = ("baseline", "microstim", "finetune", "perturb")
DESK_COHERENCES = (0.0, 0.02, 0.05, 0.1, 0.2, 0.4, 0.8)
STIM_TARGETS = ("MT_L", "MT_R", "MT_all", "V1_all", "LIP_E_all")
MAX_STIM_PA = 40.0

# axis -> (NetworkSpec field, lo, hi, step)
FINETUNE_AXES = {
    "v1_mt_mean_weight": ("g_v1_mt", 0.2, 3.0, 0.2),
    "mt_lip_fraction": ("mt_lip_fraction", 0.1, 1.0, 0.1),
    "mt_synaptic_conductance": ("g_mt_lip", 0.01, 0.15, 0.01),
    "lip_hebb_strong": ("hebb_strong", 0.7, 1.5, 0.1),
}
NOISE_LEVELS = (0.0, 2.0)
DROP_LEVELS = (0.0, 0.9)

# Table-style perturbation rows: (kind, target)
PERTURBATION_ROWS = (
    ("DropConnections", "LGN-V1"), ("DropConnections", "V1-MT"), ("DropConnections", "MT-LIP"),
    ("WeightNoise", "LGN-V1"), ("WeightNoise", "V1-MT"), ("WeightNoise", "MT-LIP"),
    ("DropNeurons", "LGN"), ("DropNeurons", "V1"), ("DropNeurons", "MT"), ("DropNeurons", "LIP"),
    ("CurrentNoise", "LGN"), ("CurrentNoise", "V1"), ("CurrentNoise", "MT"), ("CurrentNoise", "LIP"),
)


def default_grid(axis: str) -> tuple:
    _, lo, hi, step = FINETUNE_AXES[axis]
    n = int(round((hi - lo) / step))
    return tuple(round(lo + i * step, 10) for i in range(n + 1))


@dataclass(frozen=True)
class ExperimentPlan:
    kind: str = "baseline"
    coherences: tuple = DESK_COHERENCES
    stimuli_per_condition: int = 10  # dataset repeats per (coherence, direction)
    repeats: int = 2  # presentations of each stimulus per reinit
    n_reinit: int = 5
    master_seed: int = 0
    dataset_root: str | None = None
    axis: str = "v1_mt_mean_weight"
    grid: tuple = ()
    targets: tuple = ("MT_L", "MT_R")
    amplitudes: tuple = (0.0, 20.0, 40.0)
    perturbations: tuple = ()  # "Kind:target" strings
    workers: int = 1
    cache_dir: str | None = None
    keep_traces: bool = False  # export LIP_A / LIP_B rate traces as traces.csv

    def __post_init__(self):
        for name in ("coherences", "grid", "targets", "amplitudes", "perturbations"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def violations(self) -> list:
        out = []
        if self.kind not in KINDS:
            out.append(f"plan.kind: unknown experiment kind {self.kind!r} (expected one of {', '.join(KINDS)})")
        if not self.coherences:
            out.append("plan.coherences: must be non-empty")
        for c in self.coherences:
            if not (isinstance(c, (int, float)) and 0.0 <= c <= 1.0):
                out.append(f"plan.coherences: {c!r} outside [0, 1]")
        for name in ("stimuli_per_condition", "repeats", "n_reinit", "workers"):
            if not (isinstance(getattr(self, name), int) and getattr(self, name) >= 1):
                out.append(f"plan.{name}: must be an integer >= 1")
        if self.kind == "finetune":
            if self.axis not in FINETUNE_AXES:
                out.append(f"plan.axis: unknown fine-tuning axis {self.axis!r}")
            else:
                _, lo, hi, _ = FINETUNE_AXES[self.axis]
                for g in self.levels():
                    if not lo - 1e-9 <= g <= hi + 1e-9:
                        out.append(f"plan.grid: {g} outside [{lo}, {hi}] for {self.axis}")
        if self.kind == "microstim":
            if not self.targets:
                out.append("plan.targets: must be non-empty")
            if not self.amplitudes:
                out.append("plan.amplitudes: must be non-empty")
            for a in self.amplitudes:
                if not 0.0 <= a <= MAX_STIM_PA:
                    out.append(f"plan.amplitudes: {a} outside [0, {MAX_STIM_PA}] pA")
        if self.kind == "perturb":
            if not self.perturbations:
                out.append("plan.perturbations: must be non-empty")
            if not self.grid:
                out.append("plan.grid: perturbation levels must be non-empty")
            for item in self.perturbations:
                try:
                    kind, target = parse_row(item)
                except SpecError as exc:
                    out.append(f"plan.perturbations: {exc}")
                    continue
                lo, hi = DROP_LEVELS if kind.startswith("Drop") else NOISE_LEVELS
                for g in self.grid:
                    if not lo <= g <= hi + 1e-12:
                        out.append(f"plan.grid: level {g} outside [{lo}, {hi}] for {kind}")
        return out

    def validate(self) -> "ExperimentPlan":
        bad = self.violations()
        if bad:
            raise ValidationError(bad)
        if self.kind == "microstim":
            for t in self.targets:
                if t not in STIM_TARGETS:
                    raise SpecError(f"invalid stimulation target {t!r} (expected one of {', '.join(STIM_TARGETS)})")
        return self

    def levels(self) -> tuple:
        if self.kind == "finetune":
            return self.grid or default_grid(self.axis)
        if self.kind == "microstim":
            return self.amplitudes
        if self.kind == "perturb":
            return self.grid
        return (0.0,)

    def series(self) -> tuple:
        if self.kind == "finetune":
            return (self.axis,)
        if self.kind == "microstim":
            return self.targets
        if self.kind == "perturb":
            return self.perturbations
        return ("baseline",)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def parse_row(item: str) -> tuple:
    kind, sep, target = str(item).partition(":")
    if not sep:
        raise SpecError(f"perturbation {item!r} must look like 'Kind:target'")
    Perturbation(kind, target, 0.0)  # validates kind and target
    return kind, target


@dataclass(frozen=True)
class RunConfig:
    """Everything a sweep needs besides the plan itself."""

    network: NetworkSpec = NetworkSpec()
    retina: RetinaParams = RetinaParams()
    stimulus: RdkParams = RdkParams()
    trial: TrialSettings = TrialSettings()


# -- results -------------------------------------------------------------------------


@dataclass
class CellSummary:
    """Behaviour of one (series, level, reinit) cell."""

    series: str
    level: float
    reinit: int
    n_trials: int
    accuracy: float
    k: float
    b: float
    mean_decision_time: float
    n_no_decision: int
    fit_ok: bool
    error: str = ""


@dataclass
class PointAggregate:
    series: str
    level: float
    n_reinit: int
    k_mean: float
    k_sem: float
    b_mean: float
    b_sem: float
    accuracy_mean: float
    accuracy_sem: float
    decision_time_mean: float
    error: str = ""


@dataclass
class SweepResult:
    plan: ExperimentPlan
    config: RunConfig
    cells: list  # CellSummary, one per (series, level, reinit)
    points: list  # PointAggregate, one per (series, level)
    trends: dict  # series -> metric -> {slope, intercept, p_value, stderr, n}
    trials: list  # flat trial records

    def point(self, series, level) -> PointAggregate:
        for p in self.points:
            if p.series == series and math.isclose(p.level, level, abs_tol=1e-12):
                return p
        raise KeyError((series, level))

    def cells_for(self, series, level) -> list:
        return [c for c in self.cells if c.series == series and math.isclose(c.level, level, abs_tol=1e-12)]

    def trials_for(self, series, level) -> list:
        return [TrialResult.from_record({k: v for k, v in t.items() if k in _TRIAL_FIELDS})
                for t in self.trials if t["series"] == series and math.isclose(t["level"], level, abs_tol=1e-12)]

    @property
    def failed(self) -> list:
        return [p for p in self.points if p.error]


_TRIAL_FIELDS = ("coherence", "true_direction", "choice", "decision_time", "no_decision_flag", "tie_break", "seed",
                 "rate_left", "rate_right")


def _sem(x) -> float:
    x = np.asarray([v for v in x if np.isfinite(v)], dtype=float)
    if x.size < 2:
        return float("nan") if x.size == 0 else 0.0
    return float(x.std(ddof=1) / math.sqrt(x.size))


def _mean(x) -> float:
    x = np.asarray([v for v in x if np.isfinite(v)], dtype=float)
    return float(x.mean()) if x.size else float("nan")


def summarize_cell(series, level, reinit, trials) -> CellSummary:
    acc = float(np.mean([t.correct for t in trials]))
    dt = float(np.mean([NO_DECISION_TIME_MS if t.no_decision_flag else t.decision_time for t in trials]))
    nd = sum(t.no_decision_flag for t in trials)
    try:
        s = summarize(trials)
        k, b, ok = s.fit.k, s.fit.b, True
    except FitError:
        # choices independent of the stimulus: no sensitivity, undefined bias
        k, b, ok = 0.0, float("nan"), False
    return CellSummary(series, float(level), int(reinit), len(trials), acc, float(k), float(b), dt, nd, ok)


# -- execution -----------------------------------------------------------------------


@dataclass(frozen=True)
class _Stimulus:
    name: str
    coherence: float
    direction: str
    seed: int


def select_stimuli(plan: ExperimentPlan, base: RdkParams) -> list:
    """The stimuli a plan evaluates, in canonical order."""
    if plan.dataset_root is not None:
        root = Path(plan.dataset_root)
        manifest = DatasetManifest.load(root)
        entries = manifest.select(plan.coherences, plan.stimuli_per_condition)
        have = {(round(e.coherence, 6), e.direction) for e in entries}
        for c in plan.coherences:
            for d in ("Left", "Right"):
                if (round(float(c), 6), d) not in have:
                    raise PersistenceError(root, f"dataset has no stimuli for coherence {c} {d}")
    else:
        entries = plan_dataset(plan.coherences, plan.stimuli_per_condition, plan.master_seed).entries
    out = [_Stimulus(e.path, float(e.coherence), e.direction, int(e.seed)) for e in entries]
    return sorted(out, key=lambda s: (s.coherence, s.direction, s.name))


def _drive_for(stim: _Stimulus, plan: ExperimentPlan, cfg: RunConfig) -> LgnDrive:
    if plan.dataset_root is not None:
        root = Path(plan.dataset_root)
        movie = load_stimulus(root / stim.name, DatasetManifest.load(root))
    else:
        from .stimulus import ManifestEntry

        entry = ManifestEntry(stim.name, stim.coherence, stim.direction, 0, stim.seed)
        movie = generate_stimulus(params_for(entry, cfg.stimulus))
    return compute_lgn_drive(movie, cfg.retina)


class _NetworkCache:
    def __init__(self, size=6):
        self.size = size
        self.items = OrderedDict()

    def get(self, key, make):
        if key in self.items:
            self.items.move_to_end(key)
            return self.items[key]
        net = make()
        self.items[key] = net
        while len(self.items) > self.size:
            self.items.popitem(last=False)
        return net


_NETS = _NetworkCache()


def cell_network(plan: ExperimentPlan, cfg: RunConfig, series: str, level: float, reinit: int):
    """The (possibly edited and perturbed) network of one cell, plus its stimulation."""
    spec = replace(cfg.network, seed=derive_seed(plan.master_seed, "network", reinit))
    stim = None
    pert = None
    if plan.kind == "finetune":
        spec = replace(spec, **{FINETUNE_AXES[series][0]: float(level)})
    elif plan.kind == "microstim" and level != 0:
        stim = Microstimulation(series, float(level))
    elif plan.kind == "perturb" and level != 0:
        kind, target = parse_row(series)
        pert = Perturbation(kind, target, float(level), derive_seed(plan.master_seed, "perturbation", reinit))

    def make():
        net = build_network(spec)
        if pert is not None:
            scale = None
            if pert.kind == "CurrentNoise":
                scale = calibrate_input_scale(net, cfg.retina, cfg.trial, cache_dir=plan.cache_dir,
                                              stimulus=cfg.stimulus)
            net = apply_perturbation(net, pert, input_scale=scale)
        net.circuit()
        return net

    key = (spec, pert)
    return _NETS.get(key, make), stim, key


def _cells(plan: ExperimentPlan) -> list:
    return [(s, float(lv), r) for s in plan.series() for lv in plan.levels() for r in range(plan.n_reinit)]


def _run_stimulus(args):
    """All cells for one stimulus. Returns (records, {(series, level): error})."""
    plan, cfg, stim = args
    drive = _drive_for(stim, plan, cfg)
    records, errors, memo = [], {}, {}
    for series, level, reinit in _cells(plan):
        if (series, level) in errors:
            continue
        try:
            net, opt, key = cell_network(plan, cfg, series, level, reinit)
            for rep in range(plan.repeats):
                seed = derive_seed(plan.master_seed, "trial", reinit, stim.seed, rep)
                # zero-level cells are the unedited network: simulate once, share the record
                mkey = (key, opt, seed)
                if mkey not in memo:
                    trial = run_trial(net, drive, opt, seed=seed,
                                      settings=replace(cfg.trial, record_traces=plan.keep_traces),
                                      coherence=stim.coherence, direction=stim.direction)
                    memo[mkey] = trial.record()
                    if plan.keep_traces:
                        memo[mkey]["trace_left"] = [float(x) for x in trial.rate_traces["LIP_A"]]
                        memo[mkey]["trace_right"] = [float(x) for x in trial.rate_traces["LIP_B"]]
                rec = dict(memo[mkey])
                rec.update(series=series, level=level, reinit=reinit, stimulus=stim.name, repeat=rep)
                records.append(rec)
        except NdmError as exc:
            errors[(series, level)] = f"{type(exc).__name__}: {exc}"
    return records, errors


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("NDM_WORKERS", "1")))
    except ValueError:
        return 1


def run_plan(plan: ExperimentPlan, cfg: RunConfig = RunConfig(), progress=None) -> SweepResult:
    """Run every cell of ``plan``; a failing cell marks its grid point, not the sweep."""
    plan.validate()
    stimuli = select_stimuli(plan, cfg.stimulus)
    jobs = [(plan, cfg, s) for s in stimuli]
    records, errors = [], {}
    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            for i, (recs, errs) in enumerate(pool.map(_run_stimulus, jobs)):
                records.extend(recs)
                errors.update(errs)
                if progress:
                    progress(i + 1, len(jobs))
    else:
        for i, job in enumerate(jobs):
            recs, errs = _run_stimulus(job)
            records.extend(recs)
            errors.update(errs)
            if progress:
                progress(i + 1, len(jobs))
    return aggregate(plan, cfg, records, errors)


def aggregate(plan: ExperimentPlan, cfg: RunConfig, records, errors) -> SweepResult:
    """Order-independent reduction of trial records into cells, points and trends."""
    records = sorted(records, key=lambda r: (plan.series().index(r["series"]), r["level"], r["reinit"],
                                             r["coherence"], r["true_direction"], r["stimulus"], r["repeat"]))
    records = [r for r in records if (r["series"], r["level"]) not in errors]
    cells, points, trends = [], [], {}
    for series in plan.series():
        for level in plan.levels():
            level = float(level)
            err = errors.get((series, level), "")
            mine = []
            for r in range(plan.n_reinit):
                trials = [TrialResult.from_record({k: v for k, v in t.items() if k in _TRIAL_FIELDS})
                          for t in records if t["series"] == series and t["level"] == level and t["reinit"] == r]
                if err or not trials:
                    c = CellSummary(series, level, r, 0, float("nan"), float("nan"), float("nan"), float("nan"),
                                    0, False, err or "no trials")
                else:
                    c = summarize_cell(series, level, r, trials)
                mine.append(c)
            cells.extend(mine)
            points.append(PointAggregate(
                series, level, plan.n_reinit,
                _mean([c.k for c in mine]), _sem([c.k for c in mine]),
                _mean([c.b for c in mine]), _sem([c.b for c in mine]),
                _mean([c.accuracy for c in mine]), _sem([c.accuracy for c in mine]),
                _mean([c.mean_decision_time for c in mine]), err,
            ))
        good = [c for c in cells if c.series == series and not c.error]
        trends[series] = {}
        if len({c.level for c in good}) >= 2 and len(good) >= 3:
            for metric in ("accuracy", "k", "b", "mean_decision_time"):
                pts = [(c.level, getattr(c, metric)) for c in good if np.isfinite(getattr(c, metric))]
                try:
                    t = regress_metric_vs_level([p[0] for p in pts], [p[1] for p in pts])
                    trends[series][metric] = asdict(t)
                except NdmError:
                    pass
    return SweepResult(plan, cfg, cells, points, trends, records)


def run_baseline(plan: ExperimentPlan, cfg: RunConfig = RunConfig(), **kw) -> SweepResult:
    return run_plan(replace(plan, kind="baseline"), cfg, **kw)


def run_microstim(plan: ExperimentPlan, cfg: RunConfig = RunConfig(), **kw) -> SweepResult:
    return run_plan(replace(plan, kind="microstim"), cfg, **kw)


def run_finetune(plan: ExperimentPlan, cfg: RunConfig = RunConfig(), **kw) -> SweepResult:
    return run_plan(replace(plan, kind="finetune"), cfg, **kw)


def run_perturb(plan: ExperimentPlan, cfg: RunConfig = RunConfig(), **kw) -> SweepResult:
    return run_plan(replace(plan, kind="perturb"), cfg, **kw)


# -- export and replay ---------------------------------------------------------------

RESULT_FILES = ("trials.csv", "cells.csv", "points.csv", "long.csv", "aggregate.json")
RUN_MANIFEST = "run_manifest.json"


def _num(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) for v in row])
    return buf.getvalue().encode()


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def result_files(result: SweepResult) -> dict:
    """name -> bytes for every result artifact (deterministic)."""
    files = {}
    th = ["series", "level", "reinit", "stimulus", "repeat", "coherence", "true_direction", "choice", "correct",
          "decision_time", "no_decision_flag", "tie_break", "seed", "rate_left", "rate_right"]
    files["trials.csv"] = _csv(th, [[t[k] for k in th] for t in result.trials])
    if result.plan.keep_traces:
        rows = []
        bin_ms = result.config.trial.bin_ms
        for t in result.trials:
            for i, (a, b) in enumerate(zip(t["trace_left"], t["trace_right"])):
                rows.append([t["series"], t["level"], t["reinit"], t["stimulus"], t["repeat"], i * bin_ms, a, b])
        files["traces.csv"] = _csv(["series", "level", "reinit", "stimulus", "repeat", "t_ms", "lip_a", "lip_b"],
                                   rows)
    ch = [f.name for f in CellSummary.__dataclass_fields__.values()]
    files["cells.csv"] = _csv(ch, [[getattr(c, k) for k in ch] for c in result.cells])
    ph = [f.name for f in PointAggregate.__dataclass_fields__.values()]
    files["points.csv"] = _csv(ph, [[getattr(p, k) for k in ph] for p in result.points])
    rows = []
    for c in result.cells:
        for metric in ("accuracy", "k", "b", "mean_decision_time", "n_no_decision"):
            rows.append([c.series, c.level, c.reinit, metric, getattr(c, metric)])
    files["long.csv"] = _csv(["series", "level", "reinit", "metric", "value"], rows)
    for p in result.points:
        sub = [c for c in result.cells if c.series == p.series and c.level == p.level]
        name = f"point_{_slug(p.series)}_{p.level!r}.csv"
        files[name] = _csv(ch, [[getattr(c, k) for k in ch] for c in sub])
    agg = {
        "schema_version": SCHEMA_VERSION,
        "kind": result.plan.kind,
        "points": [asdict(p) for p in result.points],
        "trends": result.trends,
        "failed_points": [[p.series, p.level, p.error] for p in result.failed],
    }
    files["aggregate.json"] = (json.dumps(_clean(agg), sort_keys=True, indent=1) + "\n").encode()
    return files


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "-" for ch in s)


def config_snapshot(plan: ExperimentPlan, cfg: RunConfig) -> dict:
    from .config import Config

    return Config(network=cfg.network, retina=cfg.retina, stimulus=cfg.stimulus, trial=cfg.trial,
                  plan=plan).to_dict()


def export_results(result: SweepResult, root) -> dict:
    """Write result files plus a run manifest; returns the manifest."""
    import hashlib
    import platform
    from datetime import datetime, timezone

    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        files = result_files(result)
        for name, data in files.items():
            (root / name).write_bytes(data)
        manifest = {
            "tool_version": __version__,
            "schema_version": SCHEMA_VERSION,
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "python": platform.python_version(),
            "master_seed": result.plan.master_seed,
            "network_spec_hash": result.config.network.spec_hash(),
            "dataset": _dataset_ref(result.plan),
            "config": config_snapshot(result.plan, result.config),
            "artifacts": {name: hashlib.sha256(data).hexdigest() for name, data in sorted(files.items())},
        }
        (root / RUN_MANIFEST).write_text(json.dumps(_clean(manifest), sort_keys=True, indent=1) + "\n")
    except (OSError, NotADirectoryError) as exc:
        raise PersistenceError(root, f"cannot write results: {exc}") from exc
    return manifest


def _dataset_ref(plan: ExperimentPlan) -> dict:
    if plan.dataset_root is None:
        return {"generated": True, "master_seed": plan.master_seed}
    import hashlib

    path = Path(plan.dataset_root) / "manifest.json"
    try:
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError as exc:
        raise PersistenceError(path, f"cannot read dataset manifest: {exc}") from exc
    return {"generated": False, "root": str(plan.dataset_root), "manifest_sha256": digest}


def load_run_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / RUN_MANIFEST
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise PersistenceError(path, f"cannot read run manifest: {exc}") from exc
    except ValueError as exc:
        from .errors import FormatError

        raise FormatError(path, f"malformed run manifest: {exc}") from exc


def _parse_cell(name, text):
    if name in ("level", "decision_time", "coherence", "rate_left", "rate_right", "t_ms", "lip_a", "lip_b"):
        return float(text)
    if name in ("reinit", "repeat", "seed"):
        return int(text)
    if name in ("correct", "no_decision_flag", "tie_break"):
        return text == "1"
    return text


def _read_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{k: _parse_cell(k, v) for k, v in row.items()} for row in csv.DictReader(fh)]


def load_results(root) -> SweepResult:
    """Rebuild a :class:`SweepResult` from an exported run directory.

    Cells, points and trends are recomputed from ``trials.csv``, so
    ``result_files(load_results(root))`` reproduces the exported bytes.
    """
    from .config import Config

    root = Path(root)
    manifest = load_run_manifest(root)
    cfg = Config.from_dict(manifest["config"])
    try:
        trials = _read_csv(root / "trials.csv")
        agg = json.loads((root / "aggregate.json").read_text())
        if cfg.plan.keep_traces:
            traces = {}
            for row in _read_csv(root / "traces.csv"):
                key = (row["series"], row["level"], row["reinit"], row["stimulus"], row["repeat"])
                left, right = traces.setdefault(key, ([], []))
                left.append(row["lip_a"])
                right.append(row["lip_b"])
            for t in trials:
                key = (t["series"], t["level"], t["reinit"], t["stimulus"], t["repeat"])
                t["trace_left"], t["trace_right"] = traces.get(key, ([], []))
    except OSError as exc:
        raise PersistenceError(root, f"cannot read results: {exc}") from exc
    errors = {(s, float(lv)): e for s, lv, e in agg.get("failed_points", [])}
    return aggregate(cfg.plan, cfg.run_config(), trials, errors)


def rerun_trial(plan: ExperimentPlan, cfg: RunConfig, record: dict) -> dict:
    """Simulate the trial behind one exported record again and return its record."""
    stim = next(s for s in select_stimuli(plan, cfg.stimulus) if s.name == record["stimulus"])
    net, opt, _ = cell_network(plan, cfg, record["series"], float(record["level"]), int(record["reinit"]))
    seed = derive_seed(plan.master_seed, "trial", int(record["reinit"]), stim.seed, int(record["repeat"]))
    trial = run_trial(net, _drive_for(stim, plan, cfg), opt, seed=seed,
                      settings=replace(cfg.trial, record_traces=False),
                      coherence=stim.coherence, direction=stim.direction)
    return trial.record()


def replay(manifest_path, out, progress=None, workers=None) -> SweepResult:
    """Re-run a recorded run into ``out`` and check every artifact checksum."""
    from .config import Config

    manifest = load_run_manifest(manifest_path)
    cfg = Config.from_dict(manifest["config"])
    plan = cfg.plan if workers is None else replace(cfg.plan, workers=workers)
    result = run_plan(plan, cfg.run_config(), progress=progress)
    written = export_results(result, out)
    bad = [name for name, digest in manifest["artifacts"].items() if written["artifacts"].get(name) != digest]
    if bad:
        raise CorruptionError(Path(out), f"replayed artifacts differ: {', '.join(bad)}")
    return result
