"""
Command line entry point.

    egmf <experiment> [--config FILE] [--seed N] [--full] [--out DIR] [--filters a,b]
    egmf table1 [--full] [--out DIR]
    egmf lorenz-sweep [--full] [--out DIR] [--seeds 0,1,2]

Exit status is 0 on success, 2 on a configuration error and 3 when a run
aborts numerically. ``EGMF_THREADS`` overrides the number of worker
processes (default: all CPUs).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
THREADS_ENV = "EGMF_THREADS"

log = logging.getLogger("egmf")


def n_workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


def _map(fn, jobs):
    """Run independent jobs, in worker processes when more than one is allowed."""
    jobs = list(jobs)
    workers = min(n_workers(), len(jobs))
    if workers <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _run_one(cfg, seed):
    from egmf.harness import run_experiment
    return run_experiment(cfg, seed)


def _sweep_one(cfg, seed, c_grid, inflation_grid):
    from egmf.harness import lorenz_sweep
    return lorenz_sweep(cfg, seed, c_grid, inflation_grid)


def _select_filters(cfg, names: str | None):
    from egmf.errors import ConfigError
    if not names:
        return cfg
    wanted = [n.strip() for n in names.split(",") if n.strip()]
    kept = [f for f in cfg.filters if f.name in wanted or f.kind in wanted]
    missing = set(wanted) - {f.name for f in kept} - {f.kind for f in kept}
    if missing:
        raise ConfigError(f"filters not in config: {sorted(missing)}")
    cfg.filters = kept
    if not kept:
        raise ConfigError("filter list is empty")
    return cfg


def cmd_experiment(args) -> int:
    from egmf import harness as H

    cfg = H.ExperimentConfig.from_json(args.config) if args.config else H.default_config(args.experiment, args.full)
    if cfg.experiment != args.experiment:
        raise H.ConfigError(f"config is for {cfg.experiment!r}, not {args.experiment!r}")
    if args.full and args.config:
        full = H.default_config(args.experiment, full=True)
        cfg.horizon = full.horizon
    cfg = _select_filters(cfg, args.filters)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    reports = _map(_run_one, [(cfg, s) for s in seeds])
    out = args.out or cfg.output_dir or f"out/{cfg.experiment}"
    H.write_outputs(reports, out)
    for r in reports:
        metric = r.l1 if r.experiment == "single_bayes" else r.rms
        line = ", ".join(f"{k}={v:.4f}" for k, v in metric.items())
        print(f"{r.experiment} seed={r.seed}: {line}")
        for k, v in r.bimodal_fraction.items():
            print(f"  {k}: L=2 fraction {v:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_table1(args) -> int:
    from egmf import harness as H

    jobs = []
    for R in (36.0, 4.0):
        for M in (20, 50, 100):
            cfg = H.default_config("double_well", args.full)
            cfg.R, cfg.M = R, M
            jobs.extend((cfg, s) for s in args.seeds)
    reports = _map(_run_one, jobs)
    print(f"{'R':>5} {'M':>4} {'seed':>4} " + " ".join(f"{f.name:>8}" for f in jobs[0][0].filters) + "  L2-frac")
    for r in reports:
        cfg = r.config
        vals = " ".join(f"{r.rms[f['kind']]:8.4f}" for f in cfg["filters"])
        frac = next(iter(r.bimodal_fraction.values()), float("nan"))
        print(f"{cfg['R']:5g} {cfg['M']:4d} {r.seed:4d} {vals}  {frac:.3f}")
    if args.out:
        H.write_outputs(reports, args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_lorenz_sweep(args) -> int:
    from egmf import harness as H

    cfg = H.default_config("lorenz63", args.full)
    c_grid = tuple(args.c_grid) if args.c_grid else H.LORENZ_C_GRID
    infl = tuple(args.inflation_grid) if args.inflation_grid else H.LORENZ_INFLATION_GRID
    rows = [r for chunk in _map(_sweep_one, [(cfg, s, c_grid, infl) for s in args.seeds]) for r in chunk]
    best_c = H.best_by([r for r in rows if r["filter"] == "egmf_kde"], lambda r: (r["seed"], r["c"]))
    best_f = H.best_by(rows, lambda r: (r["seed"], r["filter"]))
    print("seed      c   best-infl   rms")
    for (seed, c), r in sorted(best_c.items()):
        print(f"{seed:4d} {c:6.2f} {r['inflation']:10.2f} {r['rms']:8.4f}")
    for (seed, name), r in sorted(best_f.items()):
        print(f"seed {seed} {name}: rms {r['rms']:.4f} (c={r['c']}, inflation={r['inflation']})")
    out = args.out or "out/lorenz_sweep"
    os.makedirs(out, exist_ok=True)
    H.write_rms_table(rows, os.path.join(out, "rms_table.csv"))
    print(f"wrote {out}")
    return EXIT_OK


def _floats(text):
    return [float(v) for v in text.split(",")]


def _ints(text):
    return [int(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egmf", description="Ensemble Gaussian mixture filter twin experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("single_bayes", "double_well", "langevin", "lorenz63"):
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", help="JSON config file (defaults to built-in settings)")
        sp.add_argument("--seed", type=int, help="run this seed only")
        sp.add_argument("--full", action="store_true", help="use the long horizons")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--filters", help="comma-separated subset of filters")
        sp.set_defaults(func=cmd_experiment, experiment=name)
    t1 = sub.add_parser("table1", help="double-well RMS table for M in {20, 50, 100} and R in {36, 4}")
    t1.add_argument("--full", action="store_true")
    t1.add_argument("--seeds", type=_ints, default=[0])
    t1.add_argument("--out")
    t1.set_defaults(func=cmd_table1)
    ls = sub.add_parser("lorenz-sweep", help="Lorenz-63 RMS over bandwidth factor and inflation")
    ls.add_argument("--full", action="store_true")
    ls.add_argument("--seeds", type=_ints, default=[0])
    ls.add_argument("--c-grid", type=_floats)
    ls.add_argument("--inflation-grid", type=_floats)
    ls.add_argument("--out")
    ls.set_defaults(func=cmd_lorenz_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from egmf.errors import ConfigError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        ctx = getattr(exc, "context", None)
        print(f"numerical abort: {exc}" + (f" {ctx}" if ctx else ""), file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
