"""Slot-accurate simulation of the multi-stage lattice-correlator MAC.

Time advances frame by frame.  The upstream subframe opens each frame and is
divided into slots of ``cfg.epsilon``; each contention stage costs
``beta + 1 + preamble_slots`` slots, the rest carries payload at
``sigma / subframe_slots`` bits per slot.  Packets arriving during a frame
contend from the next frame on.
"""

from __future__ import annotations

import json
import math
import random
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import ChannelTopology, SystemConfig
from .traffic import TrafficProfile, arrival_arrays

MIN_FRAMES = 100


class Station:
    __slots__ = ("id", "channels", "queue", "post_backoff", "rng", "max_whole")

    def __init__(self, sid, channels, rng, max_whole):
        self.id = sid
        self.channels = channels
        self.queue = deque()          # [arrival, remaining bits, total bits]
        self.post_backoff = False
        self.rng = rng
        self.max_whole = max_whole    # longest packet that fits behind one stage

    def plan(self, avail):
        """Bits this station would send into ``avail`` bits, per queued packet.

        Whole packets are sent while they fit; a packet that could never fit
        behind a single contention stage is cut to fill the remainder.
        """
        out = []
        for pkt in self.queue:
            rem = pkt[1]
            if rem <= avail + 1e-9:
                out.append((pkt, rem))
                avail -= rem
            else:
                if pkt[2] > self.max_whole and avail >= 1.0:
                    out.append((pkt, math.floor(avail)))
                break
        return out

    def can_send(self, avail):
        if not self.queue or avail < 1.0:
            return False
        head = self.queue[0]
        return head[1] <= avail + 1e-9 or head[2] > self.max_whole


@dataclass
class SimMetrics:
    duration: float
    n_frames: int
    throughput_bps: float
    delivered_bits: float
    delays: np.ndarray                # seconds, one per completed packet
    delay_station: np.ndarray         # station id of each delay sample
    mean_delay: float                 # NaN when nothing was delivered
    collisions: int                   # frames lost to false winners on a channel
    unresolved: int                   # channels still tied after s_max
    stage_hist: np.ndarray            # winning stage counts
    queue_end: np.ndarray             # packets still queued per station
    generated: int
    delivered_packets: int
    dropped: int
    attempts: np.ndarray              # (N, C) frame-start contentions
    successes: np.ndarray             # (N, C) error-free deliveries
    reuse_events: int
    short_run: bool = False
    log: list = field(default_factory=list, repr=False)
    extra: dict = field(default_factory=dict, repr=False)

    def success_rate(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.successes / self.attempts

    def overall_success_rate(self) -> float:
        n = self.attempts.sum()
        return float(self.successes.sum() / n) if n else math.nan

    def station_delay(self, k: int) -> np.ndarray:
        return self.delays[self.delay_station == k]


def contend_stage(contenders, stage, beta, p_corr, post_backoff=True):
    """One contention stage.

    Returns ``(kind, members, losers)`` where ``kind`` is ``"win"`` (members is
    the winning station), ``"tie"`` (members go on to the next stage) or
    ``"collision"`` (some station missed an earlier preamble; the channel is
    lost for this frame).
    """
    if len(contenders) == 1:
        return "win", contenders[0], []
    half = (beta + 1) // 2
    draws = []
    for st in contenders:
        if stage == 0 and post_backoff and st.post_backoff:
            draws.append(half + st.rng.randrange(half))
        else:
            draws.append(st.rng.randrange(beta + 1))
    low = min(draws)
    holders = [st for st, r in zip(contenders, draws) if r == low]
    losers = [st for st, r in zip(contenders, draws) if r != low]
    if p_corr > 0:
        missed = [st for st in losers if st.rng.random() < p_corr]
        if missed:
            return "collision", holders + missed, []
    if len(holders) == 1:
        return "win", holders[0], losers
    return "tie", holders, losers


class _Run:
    """Mutable bookkeeping for one simulation run."""

    def __init__(self, cfg, topo, warmup):
        self.cfg = cfg
        self.warmup = warmup
        n, c = topo.n_stations, topo.n_channels
        self.attempts = np.zeros((n, c), dtype=np.int64)
        self.successes = np.zeros((n, c), dtype=np.int64)
        self.stage_hist = np.zeros(cfg.s_max + 1, dtype=np.int64)
        self.delays = []
        self.delay_station = []
        self.delivered_bits = 0.0
        self.delivered_packets = 0
        self.collisions = 0
        self.unresolved = 0
        self.reuse_events = 0

    def resolve_channel(self, c, contenders, frame_start, winners, log):
        cfg = self.cfg
        total_slots = cfg.subframe_slots
        bps = cfg.bits_per_slot
        slots = total_slots
        stage = 0
        group = contenders
        main = True
        stages_used = 0
        outcome = "idle"
        won = []
        channel_bits = 0.0
        reuse = 0

        for st in contenders:
            self.attempts[st.id, c] += 1

        while group:
            if stage > cfg.s_max or slots < cfg.stage_slots:
                outcome = "unresolved"
                self.unresolved += 1
                break
            slots -= cfg.stage_slots
            stages_used += 1
            kind, members, losers = contend_stage(group, stage, cfg.beta, cfg.p_corr, main)
            if kind == "collision":
                outcome = "collision"
                self.collisions += 1
                break
            if kind == "tie":
                group = members
                stage += 1
                continue

            winner = members
            outcome = "win"
            plan = winner.plan(slots * bps)
            if not plan:
                break
            self.stage_hist[stage] += 1
            tx_bits = sum(b for _, b in plan)
            start = frame_start + (total_slots - slots) * cfg.epsilon
            if cfg.p_bit == 0 or winner.rng.random() < (1.0 - cfg.p_bit) ** tx_bits:
                self._deliver(winner, plan, start)
                won.append(winner.id)
                winners.add(winner)
                self.successes[winner.id, c] += 1
                channel_bits += tx_bits
            slots -= math.ceil(tx_bits / bps - 1e-9)

            # the winner frees the channel; losers of this stage resume here
            room = (slots - cfg.preamble_slots - cfg.stage_slots) * bps
            group = [st for st in losers if st.can_send(room)]
            if not group:
                break
            slots -= cfg.preamble_slots
            reuse += 1
            main = False

        self.reuse_events += reuse
        assert channel_bits <= cfg.sigma + 1e-6, "channel delivered more than one subframe"
        assert slots >= 0, "contention overran the upstream subframe"
        if log is not None:
            log.append({
                "frame": int(round(frame_start / cfg.t_frame)), "channel": c, "outcome": outcome,
                "winners": won, "stages": stages_used, "slots": total_slots - slots,
                "bits": channel_bits, "reuse": reuse,
            })

    def _deliver(self, st, plan, start):
        bps = self.cfg.bits_per_slot
        eps = self.cfg.epsilon
        sent = 0.0
        for pkt, bits in plan:
            sent += bits
            pkt[1] -= bits
            self.delivered_bits += bits
            if pkt[1] <= 1e-9:
                st.queue.popleft()
                self.delivered_packets += 1
                if pkt[0] >= self.warmup:
                    self.delays.append(start + sent / bps * eps - pkt[0])
                    self.delay_station.append(st.id)


def _station_seeds(seed, n):
    return np.random.SeedSequence(seed).spawn(n)


def _arrivals_for(topo, traffic, duration, seeds):
    out = []
    for k in range(topo.n_stations):
        if traffic is None:
            prof = TrafficProfile("fixed", topo.payload_bits, float(topo.lam[k]))
        elif isinstance(traffic, TrafficProfile):
            prof = traffic
        else:
            prof = traffic[k]
        out.append(arrival_arrays(prof, duration, seeds[k].spawn(1)[0]))
    return out


def run_simulation(cfg: SystemConfig, topo: ChannelTopology, traffic=None, seed: int = 0,
                   duration: float = 10.0, arrivals=None, log=None, warmup: float = 0.0) -> SimMetrics:
    """Simulate ``duration`` seconds of uplink contention.

    ``traffic`` is one profile for everybody, a per-station list, or ``None``
    to use ``topo.lam`` and ``topo.payload_bits``.  ``arrivals`` overrides it
    with explicit per-station ``(times, bits)`` (e.g. loaded traces).  Pass a
    list as ``log`` to collect per-channel frame records.
    """
    cfg.validate()
    topo.validate()
    n_frames = int(math.floor(duration / cfg.t_frame + 1e-9))
    seeds = _station_seeds(seed, topo.n_stations)
    max_whole = (cfg.subframe_slots - cfg.stage_slots) * cfg.bits_per_slot
    stations = [
        Station(k, topo.allowed[k], random.Random(int(seeds[k].generate_state(1)[0])), max_whole)
        for k in range(topo.n_stations)
    ]
    if arrivals is None:
        arrivals = _arrivals_for(topo, traffic, duration, seeds)
    else:
        arrivals = [(np.asarray([a for a, _ in arr], dtype=float), np.asarray([b for _, b in arr], dtype=float))
                    if not isinstance(arr, tuple) else arr for arr in arrivals]

    # packets arriving in frame t contend from frame t + 1
    ev_time = np.concatenate([a[0] for a in arrivals]) if arrivals else np.empty(0)
    ev_bits = np.concatenate([a[1] for a in arrivals]) if arrivals else np.empty(0)
    ev_station = np.concatenate([np.full(len(a[0]), k) for k, a in enumerate(arrivals)]) if arrivals else np.empty(0)
    order = np.lexsort((ev_station, ev_time))
    ev_time, ev_bits, ev_station = ev_time[order], ev_bits[order], ev_station[order].astype(int)
    ev_frame = np.floor(ev_time / cfg.t_frame).astype(np.int64) + 1
    generated = int(np.sum(ev_time < duration))

    run = _Run(cfg, topo, warmup)
    ptr = 0
    n_ev = len(ev_time)
    times_l, bits_l, st_l, frame_l = ev_time.tolist(), ev_bits.tolist(), ev_station.tolist(), ev_frame.tolist()
    flagged = []
    for t in range(n_frames):
        frame_start = t * cfg.t_frame
        while ptr < n_ev and frame_l[ptr] <= t:
            stations[st_l[ptr]].queue.append([times_l[ptr], bits_l[ptr], bits_l[ptr]])
            ptr += 1

        per_channel = {}
        for st in stations:
            if st.queue:
                chans = st.channels
                c = chans[st.rng.randrange(len(chans))] if len(chans) > 1 else chans[0]
                per_channel.setdefault(c, []).append(st)

        winners = set()
        for c in sorted(per_channel):
            run.resolve_channel(c, per_channel[c], frame_start, winners, log)

        # post-backoff only covers the frame right after a success
        for st in flagged:
            st.post_backoff = False
        flagged = list(winners)
        for st in flagged:
            st.post_backoff = True

    unreleased = np.bincount(ev_station[ptr:], minlength=topo.n_stations)
    return measure(run, stations, duration, n_frames, generated, log, unreleased)


def measure(run: _Run, stations, duration, n_frames, generated, log=None, unreleased=None) -> SimMetrics:
    """Turn a finished run into metrics.

    ``queue_end`` counts packets still held by each station, including those
    that arrived too late to contend before the run ended.
    """
    delays = np.asarray(run.delays, dtype=float)
    queued = np.array([len(st.queue) for st in stations], dtype=np.int64)
    if unreleased is not None:
        queued = queued + unreleased
    capacity = run.attempts.shape[1] * run.cfg.sigma * n_frames
    assert run.delivered_bits <= capacity + 1e-6, "delivered more than channel capacity"
    span = n_frames * run.cfg.t_frame
    return SimMetrics(
        duration=duration,
        n_frames=n_frames,
        throughput_bps=run.delivered_bits / span if span > 0 else 0.0,
        delivered_bits=run.delivered_bits,
        delays=delays,
        delay_station=np.asarray(run.delay_station, dtype=np.int64),
        mean_delay=float(delays.mean()) if delays.size else math.nan,
        collisions=run.collisions,
        unresolved=run.unresolved,
        stage_hist=run.stage_hist,
        queue_end=queued,
        generated=generated,
        delivered_packets=run.delivered_packets,
        dropped=0,
        attempts=run.attempts,
        successes=run.successes,
        reuse_events=run.reuse_events,
        short_run=n_frames < MIN_FRAMES,
        log=log if log is not None else [],
    )


def write_frame_log(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
