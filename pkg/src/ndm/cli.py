"""Command-line entry points: ``ndm``, ``rdk`` and ``lgn-drive``.

Exit codes: 0 success, 1 I/O or other runtime failure, 2 invalid
configuration or arguments, 3 numerical divergence. ``NDM_WORKERS`` sets the
default worker count.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import NdmError, NumericalDivergenceError, ParameterError, SpecError, ValidationError

log = logging.getLogger("ndm")

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _guard(fn):
    def wrapped(argv=None):
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
        try:
            return fn(argv)
        except (ValidationError, SpecError, ParameterError) as exc:
            violations = getattr(exc, "violations", [str(exc)])
            for v in violations:
                print(f"error: {v}", file=sys.stderr)
            return EXIT_INVALID
        except NumericalDivergenceError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except NdmError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAIL

    wrapped.__name__ = fn.__name__
    return wrapped


# -- rdk ------------------------------------------------------------------------------


@_guard
def rdk_main(argv=None) -> int:
    from .config import load_config
    from .stimulus import DEFAULT_COHERENCES, DEFAULT_REPEATS, build_dataset, generate_stimulus, save_stimulus

    ap = argparse.ArgumentParser(prog="rdk", description="Random dot kinematogram movies.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    g = sub.add_parser("gen", help="render one movie to an .rdk file")
    g.add_argument("--coherence", type=float, required=True)
    g.add_argument("--direction", required=True, choices=["Left", "Right", "left", "right"])
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="TOML config; its [stimulus] table sets the geometry")
    b = sub.add_parser("build-dataset", help="render a coherence x direction x repeat dataset")
    b.add_argument("--root", required=True)
    b.add_argument("--seed", type=int, required=True)
    b.add_argument("--coherences", type=_floats, default=DEFAULT_COHERENCES)
    b.add_argument("--repeats", type=int, default=DEFAULT_REPEATS)
    b.add_argument("--workers", type=int, default=None)
    b.add_argument("--config")
    args = ap.parse_args(argv)
    base = load_config(args.config).stimulus
    if args.cmd == "gen":
        params = replace(base, coherence=args.coherence, direction=args.direction.capitalize(), seed=args.seed)
        params.validate()
        digest = save_stimulus(generate_stimulus(params), args.out)
        print(f"{args.out} sha256={digest}")
    else:
        from .experiments import default_workers

        m = build_dataset(args.root, args.coherences, args.repeats, args.seed, base,
                          workers=args.workers or default_workers())
        print(f"wrote {len(m.entries)} movies to {args.root}")
    return EXIT_OK


# -- lgn-drive ------------------------------------------------------------------------


@_guard
def lgn_drive_main(argv=None) -> int:
    from .config import load_config
    from .retina import compute_lgn_drive, save_drive
    from .stimulus import load_stimulus

    ap = argparse.ArgumentParser(prog="lgn-drive", description="Convert an .rdk movie into LGN input currents.")
    ap.add_argument("--in", dest="src", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--config")
    args = ap.parse_args(argv)
    retina = load_config(args.config).retina
    save_drive(compute_lgn_drive(load_stimulus(args.src), retina), args.out)
    print(args.out)
    return EXIT_OK


# -- ndm ------------------------------------------------------------------------------


def _progress(done, total):
    log.info("stimulus %d/%d", done, total)


def _plan_overrides(args) -> dict:
    plan = {}
    if getattr(args, "seed", None) is not None:
        plan["master_seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        plan["workers"] = args.workers
    if getattr(args, "dataset", None) is not None:
        plan["dataset_root"] = str(args.dataset)
    if getattr(args, "kind", None) is not None:
        plan["kind"] = args.kind
    return {"plan": plan} if plan else {}


@_guard
def ndm_main(argv=None) -> int:
    from .config import load_config, validate_config
    from .experiments import default_workers, export_results, replay, run_plan

    ap = argparse.ArgumentParser(prog="ndm", description="Spiking decision network experiments.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run an experiment family")
    r.add_argument("kind", choices=["baseline", "microstim", "finetune", "perturb"])
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--dataset", help="dataset root written by `rdk build-dataset` (default: generate in memory)")
    p = sub.add_parser("replay", help="re-run a recorded run and verify its outputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    t = sub.add_parser("trace", help="record rate traces and a raster for one trial")
    t.add_argument("--config")
    t.add_argument("--coherence", type=float, required=True)
    t.add_argument("--direction", default="Right")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--raster", default=None, help="population or area to record spikes from, e.g. LIP_E")
    v = sub.add_parser("validate", help="check a config and print it with provenance tags")
    v.add_argument("--config")
    args = ap.parse_args(argv)

    if args.cmd == "validate":
        validate_config(args.config) if args.config else _print_defaults()
        return EXIT_OK

    if args.cmd == "run":
        if args.workers is None:
            args.workers = default_workers()
        cfg = load_config(args.config, _plan_overrides(args))
        result = run_plan(cfg.plan, cfg.run_config(), progress=_progress)
        export_results(result, args.out)
        for pt in result.points:
            log.info("%s level=%g k=%.2f+-%.2f acc=%.3f", pt.series, pt.level, pt.k_mean, pt.k_sem,
                     pt.accuracy_mean)
        diverged = [p for p in result.failed if p.error.startswith("NumericalDivergenceError")]
        for p in result.failed:
            print(f"failed grid point {p.series}={p.level}: {p.error}", file=sys.stderr)
        return EXIT_DIVERGED if diverged else EXIT_OK

    if args.cmd == "replay":
        replay(args.manifest, args.out, progress=_progress,
               workers=args.workers if args.workers is not None else None)
        print(f"replay of {args.manifest} is identical")
        return EXIT_OK

    if args.cmd == "trace":
        _trace(args, load_config(args.config))
        return EXIT_OK
    return EXIT_INVALID


def _print_defaults():
    from .config import Config

    for key, value, tag in Config().annotated():
        print(f"{key} = {value!r}  # {tag}")


def _trace(args, cfg):
    from .config import record_trace
    from .network import build_network, run_trial
    from .retina import compute_lgn_drive
    from .seeding import derive_seed
    from .stimulus import Direction, generate_stimulus, stimulus_seed

    d = Direction.parse(args.direction)
    stim = replace(cfg.stimulus, coherence=args.coherence, direction=d,
                   seed=stimulus_seed(args.seed, args.coherence, d, 0))
    net = build_network(replace(cfg.network, seed=derive_seed(args.seed, "network", 0)))
    drive = compute_lgn_drive(generate_stimulus(stim), cfg.retina)
    trial = run_trial(net, drive, seed=derive_seed(args.seed, "trace"),
                      settings=replace(cfg.trial, record_traces=True),
                      coherence=args.coherence, direction=d, record_spikes=args.raster)
    out = record_trace(trial, Path(args.out), raster=args.raster is not None)
    print(f"{out}: choice={trial.choice.value} decision_time={trial.decision_time:.0f} ms")


def main():
    sys.exit(ndm_main())


def rdk():
    sys.exit(rdk_main())


def lgn_drive():
    sys.exit(lgn_drive_main())


if __name__ == "__main__":
    main()
