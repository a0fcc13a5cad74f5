"""Command-line front end.

    latticemac model   --config grid.cfg
    latticemac sim     --config grid.cfg --seeds 5 --duration 20
    latticemac verify  --config verify.cfg --seeds 5 --out verify.csv
    latticemac sweep   --config grid.cfg --sweep-load 16e6:22e6:1e6 --out sweep.csv
    latticemac compare --config grid.cfg --sweep-load 10e6:22e6:1e6

Log verbosity comes from the LATTICEMAC_LOG environment variable
(DEBUG, INFO, WARNING, ...).  Exit status: 0 ok, 1 runtime failure,
2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import experiments as ex
from . import model
from .baseline import efficiency, run_baseline
from .config import ConfigError, format_config, load_config
from .sim import run_simulation

log = logging.getLogger("latticemac")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latticemac", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="mode", required=True)
    for mode in ex.MODES:
        sp = sub.add_parser(mode)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seeds", help="seed count N (seeds 0..N-1) or comma list")
        sp.add_argument("--duration", type=float, help="simulated seconds per run")
        sp.add_argument("--out", help="CSV output path")
        sp.add_argument("--sweep-load", dest="sweep_load", metavar="START:STOP:STEP",
                        help="aggregate offered load grid, bits/s")
        sp.add_argument("--jobs", type=int, default=None, help="worker processes")
    return p


def spec_from_args(args) -> ex.ExperimentSpec:
    values = load_config(args.config) if args.config else {}
    seeds = ex.parse_seeds(args.seeds if args.seeds is not None else values.get("seeds", "1"))
    duration = args.duration if args.duration is not None else float(values.get("duration", 10.0))
    grid = ex.parse_grid(args.sweep_load) if args.sweep_load else ()
    if args.sweep_load and not grid:
        raise ConfigError("sweep-load", f"empty grid {args.sweep_load!r}")
    jobs = args.jobs if args.jobs is not None else ex.default_jobs()
    return ex.ExperimentSpec(args.mode, values, grid, seeds, duration, args.out, jobs).validate()


def _echo(values):
    text = format_config(values)
    for line in text.splitlines():
        print(f"# {line}")


def _run_model(spec, scen):
    sol = model.solve_fixed_point(scen.cfg, scen.topo)
    lf = sol.load_factor(scen.topo)
    print(f"converged={sol.converged} iterations={sol.iterations} residual={sol.residual:.3g}")
    print(f"mean delay {ex.fmt(sol.mean_delay)} s, stable stations {int(sol.stable.sum())}/{scen.n_stations}")
    rows = []
    for k in range(scen.n_stations):
        chans = sol.mask[k]
        rows.append({"station": k, "lambda": scen.topo.lam[k],
                     "p_succ": float(sol.p_succ_kc[k, chans].mean()),
                     "access_delay_s": sol.access_delay[k], "total_delay_s": sol.total_delay[k],
                     "load_factor": lf[k], "stable": "stable" if sol.stable[k] else "unstable"})
    cols = ("station", "lambda", "p_succ", "access_delay_s", "total_delay_s", "load_factor", "stable")
    if spec.out:
        ex.write_csv(rows, cols, spec.out)
    return 0


def _run_replicas(spec, scen, kind):
    rows = []
    for seed in spec.seeds:
        if kind == "sim":
            m = run_simulation(scen.cfg, scen.topo, seed=seed, duration=spec.duration)
            extra = m.overall_success_rate()
        else:
            m = run_baseline(scen.baseline, scen.topo, seed=seed, duration=spec.duration)
            extra = efficiency(m, scen.baseline)
        if m.short_run:
            log.warning("run shorter than the recommended minimum number of frames")
        rows.append({"seed": seed, "throughput_bps": m.throughput_bps, "mean_delay_s": m.mean_delay,
                     "extra": extra, "collisions": m.collisions,
                     "queue_end": int(m.queue_end.sum())})
        print(f"seed {seed}: throughput {ex.fmt(m.throughput_bps)} bit/s, "
              f"mean delay {ex.fmt(m.mean_delay)} s, collisions {m.collisions}")
    d, ci = ex.mean_ci95([r["mean_delay_s"] for r in rows])
    print(f"mean delay over seeds {ex.fmt(d)} s +/- {ex.fmt(ci)}")
    label = "success_rate" if kind == "sim" else "efficiency"
    for r in rows:
        r[label] = r.pop("extra")
    if spec.out:
        cols = ("seed", "throughput_bps", "mean_delay_s", label, "collisions", "queue_end")
        ex.write_csv(rows, cols, spec.out)
    return 0


def _report_max(scen, rows, key, name):
    value, warn = ex.max_throughput(rows, lambda x: ex.delay_threshold(scen, x), key)
    if warn:
        log.warning("%s: %s", name, warn)
    print(f"{name} max throughput {ex.fmt(value)} bit/s")
    return value


def run(spec: ex.ExperimentSpec) -> int:
    scen = ex.scenario_from(spec.values)
    _echo(spec.values)
    if spec.mode == "model":
        return _run_model(spec, scen)
    if spec.mode in ("sim", "baseline"):
        return _run_replicas(spec, scen, spec.mode)
    if spec.mode == "verify":
        rows = ex.verify(scen, spec.seeds, spec.duration, spec.grid, spec.jobs)
        cols = ex.VERIFY_COLUMNS
    elif spec.mode == "sweep":
        rows = ex.sweep(scen, spec.grid, spec.seeds, spec.duration, spec.jobs)
        cols = ex.SWEEP_COLUMNS
    else:
        rows = ex.compare(scen, spec.grid, spec.seeds, spec.duration, spec.jobs)
        cols = ex.COMPARE_COLUMNS
    sys.stdout.write(ex.format_csv(rows, cols))
    if spec.mode == "sweep":
        _report_max(scen, rows, "sim_delay_mean_s", "simulated")
    elif spec.mode == "compare":
        ours = _report_max(scen, rows, "sim_delay_mean_s", "proposed")
        base = _report_max(scen, rows, "baseline_delay_mean_s", "baseline")
        if base > 0:
            print(f"improvement ratio {ex.fmt(ours / base)}")
    if spec.out:
        ex.write_csv(rows, cols, spec.out)
    return 0


def main(argv=None) -> int:
    level = os.environ.get("LATTICEMAC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)        # exits with 2 on usage errors
    try:
        spec = spec_from_args(args)
        return run(spec)
    except ConfigError as exc:
        print(f"latticemac: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError) and args.config and exc.filename == args.config:
            print(f"latticemac: config error: {exc}", file=sys.stderr)
            return 2
        print(f"latticemac: {exc}", file=sys.stderr)
        return 1
    except (ArithmeticError, RuntimeError) as exc:
        print(f"latticemac: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
