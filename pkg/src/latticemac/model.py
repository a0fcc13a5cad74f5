"""Analytical fixed-point model of multi-stage lattice-correlator contention.

Every station ``k`` is viewed per allowed channel ``c``: it has a frame waiting
for ``c`` with probability ``q[k, c]`` and, once contending, wins the channel
with probability ``p_succ[k, c]``.  Contention at stage 0 uses the post-backoff
aware draw distribution; later stages are fresh uniform draws among the
stations that tied for the minimum.  Later stages only depend on how many
stations are still tied, so the tie group is tracked by its size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ChannelTopology, SystemConfig

DAMPING = 0.5
TOLERANCE = 1e-8
MAX_ITERATIONS = 10_000

# Tie groups larger than this many co-tied stations are folded into the
# largest tracked size.
MAX_TIED_OTHERS = 32


class ModelError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# single-equation helpers


def traffic_rate(cfg: SystemConfig, topo: ChannelTopology, k: int, c: int, useful: float) -> float:
    """Per-channel attempt rate of station ``k``: lam / |C_k| * ceil(L / useful)."""
    allowed = topo.allowed[k]
    if c not in allowed:
        raise ValueError(f"channel {c} is not allowed for station {k}")
    if not useful > 0:
        raise ValueError("useful bits must be positive; contention overhead fills the subframe")
    lam = float(topo.lam[k])
    if lam == 0:
        return 0.0
    return lam / len(allowed) * math.ceil(topo.payload_bits / useful)


def useful_bits(cfg: SystemConfig, theta_row) -> float:
    """Payload bits left in the upstream subframe after the expected contention."""
    overhead = float(np.sum(theta_row)) * cfg.stage_time / cfg.t_up
    return max(0.0, cfg.sigma * (1.0 - overhead))


def queue_probability(delta: float, t_frame: float, p_succ: float) -> float:
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if delta == 0:
        return 0.0
    if p_succ <= 0:
        return 1.0
    return min(1.0, -math.expm1(-delta * t_frame) / p_succ)


def backoff_distribution(cfg: SystemConfig, q: float, p_succ: float, stage: int = 0,
                         theta: float = 1.0) -> np.ndarray:
    """Probability of drawing each backoff value j in [0..beta] at ``stage``.

    Stage 0 mixes the full window with the post-backoff upper half; the mass
    sums to ``theta``.
    """
    nb = cfg.beta + 1
    if stage > 0:
        return np.full(nb, theta / nb)
    half = nb // 2
    fresh = q * (1.0 - p_succ) + (1.0 - q)
    dist = np.full(nb, theta * fresh / nb)
    dist[half:] += theta * q * p_succ / half
    return dist


def erlang_c(m: int, rho: float) -> float:
    """Probability of queueing in M/M/m at per-server utilization ``rho``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1) for a stable queue")
    a = m * rho
    # Erlang B recursion keeps terms bounded for large m
    b = 1.0
    for n in range(1, m + 1):
        b = a * b / (n + a * b)
    return b / (1.0 - rho * (1.0 - b))


def mmm_delay(m: int, lam: float, mu: float) -> float:
    """Waiting plus service time of an M/M/m queue; ``inf`` when unstable."""
    if mu <= 0 or math.isinf(mu):
        return math.inf if mu <= 0 else 0.0
    if lam <= 0:
        return 1.0 / mu
    if lam >= m * mu:
        return math.inf
    rho = lam / (m * mu)
    return erlang_c(m, rho) / (m * mu - lam) + 1.0 / mu


# ---------------------------------------------------------------------------
# contention on one channel


def _tied_group_kernel(beta: int, size: int):
    """Win probability and tie transitions for a fresh uniform stage.

    Index ``m`` counts the other stations tied with ``k``.  ``win[m]`` is the
    probability ``k`` holds the unique minimum; ``trans[m, m2]`` the
    probability it ends tied with exactly ``m2`` others.
    """
    nb = beta + 1
    p = 1.0 / nb
    above = (beta - np.arange(nb)) / nb        # P(other draw > j)
    win = np.zeros(size + 1)
    trans = np.zeros((size + 1, size + 1))
    for m in range(1, size + 1):
        win[m] = p * np.sum(above ** m)
        for m2 in range(1, m + 1):
            trans[m, m2] = p * math.comb(m, m2) * p ** m2 * np.sum(above ** (m - m2))
    return win, trans


def _mul_linear(poly, stay, hit):
    """Multiply polynomials (last axis) by ``stay + hit * x``; top bin absorbs overflow."""
    out = poly * stay[..., None]
    out[..., 1:] += poly[..., :-1] * hit[..., None]
    out[..., -1] += poly[..., -1] * hit
    return out


def contention_stages(beta: int, s_max: int, q, dist0, max_tied: int = MAX_TIED_OTHERS):
    """Stage-by-stage outcomes for every station contending on one channel.

    ``q[l]`` is the probability station ``l`` is active on the channel and
    ``dist0[l]`` its stage-0 draw distribution given it is active.  Returns
    ``(theta, tie, win)`` arrays of shape ``(n, s_max + 1)``: the probability to
    reach each stage, to tie for the minimum there, and to win there, all
    conditioned on the station itself being active and error free.
    """
    q = np.asarray(q, dtype=float)
    dist0 = np.asarray(dist0, dtype=float)
    n, nb = dist0.shape
    size = max(1, min(n - 1, max_tied))

    below = np.cumsum(dist0, axis=1) - dist0
    lower = q[:, None] * below                  # l active and draws < j
    equal = q[:, None] * dist0                  # l active and draws j
    stay = 1.0 - lower - equal

    # prefix[i] / suffix[i]: count polynomials of ties over stations < i / >= i
    unit = np.zeros((nb, size + 1))
    unit[:, 0] = 1.0
    prefix = np.empty((n + 1, nb, size + 1))
    suffix = np.empty((n + 1, nb, size + 1))
    prefix[0] = unit
    suffix[n] = unit
    for i in range(n):
        prefix[i + 1] = _mul_linear(prefix[i], stay[i], equal[i])
    for i in range(n - 1, -1, -1):
        suffix[i] = _mul_linear(suffix[i + 1], stay[i], equal[i])

    left, right = prefix[:n], suffix[1:]
    others = np.zeros((n, nb, size + 1))
    lag = np.subtract.outer(np.arange(size), np.arange(size + 1))    # m - i
    shifted = right[..., np.clip(lag, 0, None)] * (lag >= 0)
    others[..., :size] = np.einsum("kji,kjmi->kjm", left, shifted)
    # sum of coefficients is prod(1 - lower); the top bin takes the remainder
    total = left.sum(axis=2) * right.sum(axis=2)
    others[..., size] = np.maximum(total - others[..., :size].sum(axis=2), 0.0)

    n_stages = s_max + 1
    theta = np.zeros((n, n_stages))
    tie = np.zeros((n, n_stages))
    win = np.zeros((n, n_stages))

    group = np.einsum("kj,kjm->km", dist0, others)   # k's draw weighted outcomes
    theta[:, 0] = 1.0
    win[:, 0] = group[:, 0]
    tied = group.copy()
    tied[:, 0] = 0.0
    tie[:, 0] = tied.sum(axis=1)

    g_win, g_trans = _tied_group_kernel(beta, size)
    for s in range(1, n_stages):
        theta[:, s] = tie[:, s - 1]
        win[:, s] = tied @ g_win
        tied = tied @ g_trans
        tie[:, s] = tied.sum(axis=1)
    return theta, tie, win


def _stage0_dists(cfg, q, p_succ):
    """Vectorised stage-0 backoff distributions for arrays of (q, p_succ)."""
    nb = cfg.beta + 1
    half = nb // 2
    q = np.asarray(q, dtype=float)[:, None]
    p_succ = np.asarray(p_succ, dtype=float)[:, None]
    dist = np.repeat((q * (1.0 - p_succ) + (1.0 - q)) / nb, nb, axis=1)
    dist[:, half:] += q * p_succ / half
    return dist


def _own_and_others(cfg, own_q, own_p, others_q, others_p):
    others_q = np.atleast_1d(np.asarray(others_q, dtype=float))
    others_p = np.broadcast_to(np.asarray(others_p, dtype=float), others_q.shape)
    q = np.concatenate([[1.0], others_q])
    dists = [backoff_distribution(cfg, own_q, own_p)]
    dists += [backoff_distribution(cfg, ql, pl) for ql, pl in zip(others_q, others_p)]
    return contention_stages(cfg.beta, cfg.s_max, q, np.array(dists))


def tie_probability(cfg: SystemConfig, stage: int, own_q: float, own_p: float,
                    others_q=(), others_p=1.0) -> float:
    """Probability station k ties for the minimum at ``stage`` (unconditional on reaching it)."""
    _, tie, _ = _own_and_others(cfg, own_q, own_p, others_q, others_p)
    return float(tie[0, stage])


def stage_success_probability(cfg: SystemConfig, stage: int, own_q: float, own_p: float,
                              others_q=(), others_p=1.0) -> float:
    _, _, win = _own_and_others(cfg, own_q, own_p, others_q, others_p)
    return float(win[0, stage]) * (1.0 - cfg.p_corr) ** 2


def overall_success_probability(cfg: SystemConfig, own_q: float, own_p: float,
                                others_q=(), others_p=1.0) -> float:
    _, _, win = _own_and_others(cfg, own_q, own_p, others_q, others_p)
    return _overall(cfg, win[0])


def _overall(cfg, win_row):
    per_stage = np.asarray(win_row) * (1.0 - cfg.p_corr) ** 2
    return float((1.0 - cfg.p_bit) ** cfg.sigma * per_stage.sum())


# ---------------------------------------------------------------------------
# fixed point


@dataclass
class FixedPointSolution:
    q: np.ndarray                 # (N, C); NaN where the channel is not allowed
    p_succ_kc: np.ndarray         # (N, C)
    p_succ_stage: np.ndarray      # (N, C, S)
    theta: np.ndarray             # (N, C, S)
    backoff_dist: np.ndarray      # (N, C, S, beta + 1)
    useful_bits: np.ndarray       # (N, C)
    delta: np.ndarray             # (N, C)
    access_delay: np.ndarray      # (N,)
    total_delay: np.ndarray       # (N,)
    mean_delay: float
    stable: np.ndarray            # (N,) bool
    saturated: np.ndarray         # (N, C) bool, queue probability clamped to 1
    iterations: int
    converged: bool
    residual: float
    mask: np.ndarray = field(repr=False)

    def load_factor(self, topo: ChannelTopology) -> np.ndarray:
        """lambda_k times the access delay; the stability margin is ``1 - load_factor``."""
        return topo.lam * self.access_delay


def _evaluate(cfg: SystemConfig, topo: ChannelTopology, mask, q, p_succ):
    """One undamped pass of the model equations at the given (q, p_succ)."""
    n, n_ch = mask.shape
    n_stages = cfg.s_max + 1
    nb = cfg.beta + 1
    theta = np.zeros((n, n_ch, n_stages))
    win = np.zeros((n, n_ch, n_stages))
    dist0 = np.zeros((n, n_ch, nb))

    seen = {}
    for c in range(n_ch):
        idx = np.flatnonzero(mask[:, c])
        if idx.size == 0:
            continue
        qc, pc = q[idx, c], p_succ[idx, c]
        d0 = _stage0_dists(cfg, qc, pc)
        key = (qc.tobytes(), pc.tobytes())
        if key not in seen:
            seen[key] = contention_stages(cfg.beta, cfg.s_max, qc, d0)
        th, _, wn = seen[key]
        theta[idx, c] = th
        win[idx, c] = wn
        dist0[idx, c] = d0

    stage_p = win * (1.0 - cfg.p_corr) ** 2
    p_new = (1.0 - cfg.p_bit) ** cfg.sigma * stage_p.sum(axis=2)
    p_new = np.clip(p_new, 0.0, 1.0)
    useful = cfg.sigma * (1.0 - theta.sum(axis=2) * cfg.stage_time / cfg.t_up)
    useful = np.maximum(useful, 0.0)

    n_allowed = mask.sum(axis=1)
    frags = np.ceil(topo.payload_bits / np.where(useful > 0, useful, np.nan))
    delta = (topo.lam / n_allowed)[:, None] * frags
    delta = np.where(topo.lam[:, None] == 0, 0.0, delta)
    if np.any(mask & ~np.isfinite(delta)):
        k, c = np.argwhere(mask & ~np.isfinite(delta))[0]
        raise ModelError(f"no useful bits left for station {k} on channel {c}")

    with np.errstate(divide="ignore", invalid="ignore"):
        raw_q = -np.expm1(-delta * cfg.t_frame) / p_new
    raw_q = np.where(delta == 0, 0.0, raw_q)
    raw_q = np.where((delta > 0) & (p_new <= 0), np.inf, raw_q)
    saturated = mask & (raw_q >= 1.0) & (delta > 0)
    q_new = np.where(mask, np.minimum(raw_q, 1.0), 0.0)
    p_new = np.where(mask, p_new, 0.0)

    for name, arr in (("q", q_new), ("p_succ", p_new)):
        bad = mask & ~np.isfinite(arr)
        if np.any(bad):
            k, c = np.argwhere(bad)[0]
            raise ModelError(f"non-finite {name} for station {k} on channel {c}")

    return {
        "q": q_new, "p_succ": p_new, "theta": theta, "stage": stage_p,
        "dist0": dist0, "useful": useful, "delta": delta, "saturated": saturated,
    }


def access_delay(cfg: SystemConfig, p_succ_kc, mask) -> np.ndarray:
    """Mean over allowed channels of t_frame / p_succ; ``inf`` for a starved station."""
    with np.errstate(divide="ignore"):
        per_channel = np.where(mask, cfg.t_frame / p_succ_kc, 0.0)
    per_channel = np.where(mask & (p_succ_kc <= 0), np.inf, per_channel)
    return per_channel.sum(axis=1) / mask.sum(axis=1)


def total_delay(topo: ChannelTopology, access) -> np.ndarray:
    out = np.empty(topo.n_stations)
    for k in range(topo.n_stations):
        mu = 1.0 / access[k] if access[k] > 0 else math.inf
        out[k] = mmm_delay(len(topo.allowed[k]), float(topo.lam[k]), mu)
    return out


def mean_delay(topo: ChannelTopology, delays) -> float:
    """Arrival-rate weighted mean delay; NaN when nothing arrives."""
    lam = topo.lam
    if lam.sum() <= 0:
        return math.nan
    active = lam > 0
    if np.any(~np.isfinite(delays[active])):
        return math.inf
    return float(np.sum(lam[active] * delays[active]) / lam.sum())


def stability_check(topo: ChannelTopology, access) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        load = np.where(topo.lam > 0, topo.lam * access, 0.0)
    return load < 1.0


def solve_fixed_point(cfg: SystemConfig, topo: ChannelTopology, tol: float = TOLERANCE,
                      max_iter: int = MAX_ITERATIONS, damping: float = DAMPING) -> FixedPointSolution:
    cfg.validate()
    topo.validate()
    mask = topo.mask()
    # q starts at 1 except where it is identically zero (no arrivals)
    q = np.where(mask & (topo.lam[:, None] > 0), 1.0, 0.0)
    p = np.where(mask, 1.0, 0.0)

    converged = False
    residual = math.inf
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        ev = _evaluate(cfg, topo, mask, q, p)
        residual = float(max(np.max(np.abs(ev["q"] - q)), np.max(np.abs(ev["p_succ"] - p))))
        if residual < tol:
            converged = True
            break
        q = q + damping * (ev["q"] - q)
        p = p + damping * (ev["p_succ"] - p)

    if not converged:
        ev = _evaluate(cfg, topo, mask, q, p)

    n_stages = cfg.s_max + 1
    nb = cfg.beta + 1
    backoff = np.zeros(mask.shape + (n_stages, nb))
    backoff[:, :, 0, :] = ev["dist0"]
    backoff[:, :, 1:, :] = ev["theta"][:, :, 1:, None] / nb

    acc = access_delay(cfg, p, mask)
    tot = total_delay(topo, acc)
    nan = np.where(mask, 1.0, np.nan)
    return FixedPointSolution(
        q=q * nan, p_succ_kc=p * nan, p_succ_stage=ev["stage"], theta=ev["theta"],
        backoff_dist=backoff, useful_bits=ev["useful"] * nan, delta=ev["delta"] * nan,
        access_delay=acc, total_delay=tot, mean_delay=mean_delay(topo, tot),
        stable=stability_check(topo, acc), saturated=ev["saturated"],
        iterations=iterations, converged=converged, residual=residual, mask=mask,
    )
