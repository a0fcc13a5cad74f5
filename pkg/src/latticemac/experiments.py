"""Experiment orchestration: load sweeps, seed replication, CSV output."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import model
from .baseline import BaselineConfig, efficiency, run_baseline
from .config import ConfigError, ChannelTopology, SystemConfig, grouped_topology, system_config_from
from .sim import run_simulation
from .traffic import profile

log = logging.getLogger(__name__)

MODES = ("model", "sim", "baseline", "verify", "sweep", "compare")
SWEEP_COLUMNS = ("offered_bps", "model_delay_s", "sim_delay_mean_s", "sim_delay_ci95_s",
                 "sim_throughput_bps", "stable")
VERIFY_COLUMNS = SWEEP_COLUMNS + ("model_success", "sim_success")
COMPARE_COLUMNS = ("offered_bps", "sim_delay_mean_s", "sim_delay_ci95_s", "sim_throughput_bps",
                   "baseline_delay_mean_s", "baseline_delay_ci95_s", "baseline_throughput_bps")


@dataclass
class ExperimentSpec:
    mode: str
    values: dict = field(default_factory=dict)      # parsed config file
    grid: tuple = ()                                # offered loads, bits/s
    seeds: tuple = (0,)
    duration: float = 10.0
    out: str | None = None
    jobs: int = 1

    def validate(self) -> "ExperimentSpec":
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {', '.join(MODES)}")
        if self.mode in ("sweep", "compare") and not self.grid:
            raise ConfigError("sweep-load", "sweep grid is empty")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ConfigError("sweep-load", "grid must be strictly increasing")
        if self.mode != "model" and not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        if not self.duration > 0:
            raise ConfigError("duration", "must be > 0")
        return self


# ---------------------------------------------------------------------------
# scenario construction

@dataclass(frozen=True)
class Scenario:
    cfg: SystemConfig
    topo: ChannelTopology
    payload_bits: float
    baseline: BaselineConfig

    @property
    def n_stations(self) -> int:
        return self.topo.n_stations

    def at_load(self, offered_bps: float) -> "Scenario":
        lam = offered_bps / (self.n_stations * self.payload_bits)
        return Scenario(self.cfg, self.topo.with_rate(lam), self.payload_bits, self.baseline)

    @property
    def offered_bps(self) -> float:
        return float(self.topo.lam.sum() * self.payload_bits)


def scenario_from(values: dict) -> Scenario:
    cfg = system_config_from(values)
    if "payload_bits" in values:
        payload = float(values["payload_bits"])
    else:
        try:
            payload = profile(values.get("profile", "hvalv")).mean_payload_bits
        except ValueError as exc:
            raise ConfigError("profile", str(exc)) from None
    n = int(values.get("n_stations", 10))
    groups = int(values.get("n_groups", 1))
    per_group = int(values.get("channels_per_group", 7))
    if n < 1 or groups < 1 or per_group < 1:
        raise ConfigError("n_stations", "station, group and channel counts must be >= 1")
    if n % groups:
        raise ConfigError("n_groups", f"{n} stations do not split evenly into {groups} groups")
    if "lambda" in values and "offered_bps" in values:
        raise ConfigError("lambda", "give either lambda or offered_bps, not both")
    if "offered_bps" in values:
        lam = values["offered_bps"] / (n * payload)
    else:
        lam = values.get("lambda", 0.0)
    topo = grouped_topology(groups, n // groups, per_group, lam, payload).validate()
    bkw = {k: values[k] for k in ("contention_slots", "backoff_initial", "backoff_max",
                                  "subchannel_bytes", "upstream_bps") if k in values}
    base = BaselineConfig(t_frame=cfg.t_frame, **bkw).validate()
    return Scenario(cfg, topo, payload, base)


def parse_seeds(text) -> tuple:
    """``"5"`` means seeds 0..4; ``"1,4,9"`` is an explicit list."""
    text = str(text).strip()
    try:
        if "," in text:
            seeds = tuple(int(s) for s in text.split(",") if s.strip())
        else:
            seeds = tuple(range(int(text)))
    except ValueError:
        raise ConfigError("seeds", f"cannot parse {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError("seeds", "need at least one non-negative seed")
    return seeds


def parse_grid(text: str) -> tuple:
    """``START:STOP:STEP`` with STOP included."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError("sweep-load", "expected START:STOP:STEP")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigError("sweep-load", f"cannot parse {text!r}") from None
    if not step > 0 or stop < start:
        return ()
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return tuple(float(start + i * step) for i in range(n))


# ---------------------------------------------------------------------------
# single runs (top level so they pickle into worker processes)

def _sim_job(args):
    scen, seed, duration = args
    m = run_simulation(scen.cfg, scen.topo, seed=seed, duration=duration)
    return m.throughput_bps, m.mean_delay, m.overall_success_rate()


def _baseline_job(args):
    scen, seed, duration = args
    m = run_baseline(scen.baseline, scen.topo, seed=seed, duration=duration)
    return m.throughput_bps, m.mean_delay, efficiency(m, scen.baseline)


def _map(fn, jobs, n_workers):
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as ex:
        return list(ex.map(fn, jobs))


def default_jobs() -> int:
    return max(1, min(8, os.cpu_count() or 1))


def mean_ci95(samples) -> tuple[float, float]:
    """Mean and Student-t 95% half-width; the half-width is NaN for one sample."""
    x = np.asarray([s for s in samples if np.isfinite(s)], dtype=float)
    if x.size == 0:
        return math.nan, math.nan
    if x.size == 1:
        return float(x[0]), math.nan
    half = stats.t.ppf(0.975, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size)
    return float(x.mean()), float(half)


def model_point(scen: Scenario):
    """(mean delay, all stations stable, mean success probability); NaN on failure."""
    try:
        sol = model.solve_fixed_point(scen.cfg, scen.topo)
    except model.ModelError as exc:
        log.warning("model failed at %.6g bit/s: %s", scen.offered_bps, exc)
        return math.nan, False, math.nan
    if not sol.converged:
        log.warning("model did not converge at %.6g bit/s (residual %.3g)", scen.offered_bps, sol.residual)
    active = scen.topo.lam > 0
    p = np.where(sol.mask, sol.p_succ_kc, 0.0).sum(axis=1) / sol.mask.sum(axis=1)
    stable = bool(np.all(sol.stable[active])) if active.any() else True
    delay = sol.mean_delay        # inf when some station is unstable
    return float(delay), stable, float(p[active].mean()) if active.any() else math.nan


# ---------------------------------------------------------------------------
# experiments

def sweep(scen: Scenario, grid, seeds, duration, jobs=1, with_model=True):
    points = [scen.at_load(x) for x in grid]
    sim_res = _map(_sim_job, [(p, s, duration) for p in points for s in seeds], jobs)
    rows = []
    for i, (x, p) in enumerate(zip(grid, points)):
        res = sim_res[i * len(seeds):(i + 1) * len(seeds)]
        d_mean, d_ci = mean_ci95([r[1] for r in res])
        thr = float(np.mean([r[0] for r in res]))
        succ = float(np.nanmean([r[2] for r in res])) if any(np.isfinite(r[2]) for r in res) else math.nan
        if with_model:
            m_delay, stable, m_succ = model_point(p)
        else:
            m_delay, stable, m_succ = math.nan, True, math.nan
        rows.append({"offered_bps": float(x), "model_delay_s": m_delay, "sim_delay_mean_s": d_mean,
                     "sim_delay_ci95_s": d_ci, "sim_throughput_bps": thr,
                     "stable": "stable" if stable else "unstable",
                     "model_success": m_succ, "sim_success": succ})
        log.info("sweep %.6g bit/s: model %.6g s, sim %.6g s", x, m_delay, d_mean)
    return rows


def verify(scen: Scenario, seeds, duration, grid=(), jobs=1):
    """Model and simulator side by side, at the configured load or over a grid."""
    return sweep(scen, grid or (scen.offered_bps,), seeds, duration, jobs, with_model=True)


def replicate(scen: Scenario, grid, seeds, duration, jobs=1, kind="sim"):
    """Mean delay (with CI) and throughput per load for the simulator or the baseline."""
    fn = _sim_job if kind == "sim" else _baseline_job
    res = _map(fn, [(scen.at_load(x), s, duration) for x in grid for s in seeds], jobs)
    rows = []
    k = len(seeds)
    for i, x in enumerate(grid):
        part = res[i * k:(i + 1) * k]
        d, ci = mean_ci95([r[1] for r in part])
        rows.append({"offered_bps": float(x), "delay_mean_s": d, "delay_ci95_s": ci,
                     "throughput_bps": float(np.mean([r[0] for r in part]))})
    return rows


def compare(scen: Scenario, grid, seeds, duration, jobs=1):
    ours = replicate(scen, grid, seeds, duration, jobs, "sim")
    base = replicate(scen, grid, seeds, duration, jobs, "baseline")
    rows = []
    for a, b in zip(ours, base):
        rows.append({"offered_bps": a["offered_bps"],
                     "sim_delay_mean_s": a["delay_mean_s"], "sim_delay_ci95_s": a["delay_ci95_s"],
                     "sim_throughput_bps": a["throughput_bps"],
                     "baseline_delay_mean_s": b["delay_mean_s"], "baseline_delay_ci95_s": b["delay_ci95_s"],
                     "baseline_throughput_bps": b["throughput_bps"]})
    return rows


def delay_threshold(scen: Scenario, offered_bps: float) -> float:
    """Mean inter-arrival time of one station: the delay budget per message."""
    return scen.n_stations * scen.payload_bits / offered_bps


def max_throughput(rows, threshold, delay_key="sim_delay_mean_s"):
    """Largest offered load whose mean delay stays within ``threshold(offered)``.

    Returns ``(bits_per_second, warning)``; ``warning`` is None when the grid
    brackets the threshold.
    """
    ok = [r["offered_bps"] for r in rows
          if np.isfinite(r[delay_key]) and r[delay_key] <= threshold(r["offered_bps"])]
    if not ok:
        return 0.0, "delay threshold never met on this grid"
    if len(ok) == len(rows):
        return max(ok), "delay threshold never violated; result is the top of the grid"
    return max(ok), None


# ---------------------------------------------------------------------------
# output

def fmt(value) -> str:
    if isinstance(value, str):
        return value
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    return f"{float(value):.9g}"


def format_csv(rows, columns) -> str:
    lines = [",".join(columns)]
    for r in sorted(rows, key=lambda r: r[columns[0]]):
        lines.append(",".join(fmt(r[c]) for c in columns))
    return "\n".join(lines) + "\n"


def write_csv(rows, columns, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_csv(rows, columns))
