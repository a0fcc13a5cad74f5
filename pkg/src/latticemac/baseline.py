"""Simplified best-effort WiMAX uplink used as the comparison point.

Stations ask for bandwidth through random contention slots with binary
exponential backoff.  A successful request covers every packet the station
holds that is not yet covered by an earlier request.  The base station grants
whole subchannels, first come first served, from the next frame on; the
unused tail of the last subchannel of each request is wasted.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import deque
from dataclasses import dataclass

import numpy as np

from .config import ChannelTopology, ConfigError
from .sim import MIN_FRAMES, SimMetrics, _arrivals_for, _station_seeds


@dataclass(frozen=True)
class BaselineConfig:
    contention_slots: int = 128       # bandwidth-request opportunities per frame
    backoff_initial: int = 8
    backoff_max: int = 1024
    subchannel_bytes: int = 420
    upstream_bps: float = 23.5e6
    t_frame: float = 0.005

    @property
    def quantum_bits(self) -> int:
        return self.subchannel_bytes * 8

    @property
    def subchannels_per_frame(self) -> int:
        return int(self.upstream_bps * self.t_frame // self.quantum_bits)

    @property
    def frame_capacity_bits(self) -> float:
        return self.upstream_bps * self.t_frame

    def validate(self) -> "BaselineConfig":
        if self.contention_slots < 1:
            raise ConfigError("contention_slots", "must be >= 1")
        if self.subchannel_bytes <= 0:
            raise ConfigError("subchannel_bytes", "must be > 0")
        if not 1 <= self.backoff_initial <= self.backoff_max:
            raise ConfigError("backoff_initial", "need 1 <= backoff_initial <= backoff_max")
        if not self.upstream_bps > 0 or not self.t_frame > 0:
            raise ConfigError("upstream_bps", "capacity and frame length must be > 0")
        if self.subchannels_per_frame < 1:
            raise ConfigError("upstream_bps", "frame holds no whole subchannel")
        return self


def subchannel_waste(payload: float, quantum: float) -> float:
    """Bits left unused when ``payload`` is carried in whole subchannels."""
    if not quantum > 0:
        raise ValueError("quantum must be > 0")
    if payload <= 0:
        return 0.0
    return math.ceil(payload / quantum) * quantum - payload


class _BEStation:
    __slots__ = ("id", "rng", "fresh", "window", "contending")

    def __init__(self, sid, rng, window):
        self.id = sid
        self.rng = rng
        self.fresh = deque()          # packets not covered by any request yet
        self.window = window
        self.contending = False


def run_baseline(cfg: BaselineConfig, topo: ChannelTopology, traffic=None, seed: int = 0,
                 duration: float = 10.0, arrivals=None, warmup: float = 0.0) -> SimMetrics:
    cfg.validate()
    topo.validate()
    n = topo.n_stations
    k_slots = cfg.contention_slots
    quantum = cfg.quantum_bits
    n_frames = int(math.floor(duration / cfg.t_frame + 1e-9))
    seeds = _station_seeds(seed, n)
    stations = [_BEStation(k, random.Random(int(seeds[k].generate_state(1)[0])), cfg.backoff_initial)
                for k in range(n)]
    if arrivals is None:
        arrivals = _arrivals_for(topo, traffic, duration, seeds)

    ev_time = np.concatenate([a[0] for a in arrivals])
    ev_bits = np.concatenate([a[1] for a in arrivals])
    ev_station = np.concatenate([np.full(len(a[0]), k) for k, a in enumerate(arrivals)]).astype(int)
    order = np.lexsort((ev_station, ev_time))
    ev_time, ev_bits, ev_station = ev_time[order], ev_bits[order], ev_station[order]
    ev_frame = (np.floor(ev_time / cfg.t_frame).astype(np.int64) + 1).tolist()
    times_l, bits_l, st_l = ev_time.tolist(), ev_bits.tolist(), ev_station.tolist()
    generated = int(np.sum(ev_time < duration))

    attempts = np.zeros((n, 1), dtype=np.int64)
    successes = np.zeros((n, 1), dtype=np.int64)
    heap = []                         # (absolute slot, station id)
    requests = deque()                # [station, packets, subchannels still owed, granted bits]
    pending = []                      # requests won this frame, grantable from the next
    delays, delay_station = [], []
    delivered_bits = 0.0
    delivered_packets = 0
    collisions = 0
    granted_bits = 0.0
    waste_bits = 0.0
    request_sizes = []
    ptr = 0
    n_ev = len(times_l)

    for f in range(n_frames):
        frame_start = f * cfg.t_frame
        while ptr < n_ev and ev_frame[ptr] <= f:
            st = stations[st_l[ptr]]
            st.fresh.append((times_l[ptr], bits_l[ptr]))
            ptr += 1
        base = f * k_slots
        for st in stations:
            if st.fresh and not st.contending:
                st.contending = True
                st.window = cfg.backoff_initial
                heapq.heappush(heap, (base + st.rng.randrange(st.window), st.id))

        # grants for requests received in earlier frames
        free = cfg.subchannels_per_frame
        while requests and free > 0:
            req = requests[0]
            take = min(free, req[2])
            req[2] -= take
            free -= take
            if req[2] == 0:
                requests.popleft()
                done = frame_start + cfg.t_frame
                for t_arr, bits in req[1]:
                    delivered_bits += bits
                    delivered_packets += 1
                    if t_arr >= warmup:
                        delays.append(done - t_arr)
                        delay_station.append(req[0])

        # contention region of this frame
        end = base + k_slots
        while heap and heap[0][0] < end:
            slot = heap[0][0]
            senders = []
            while heap and heap[0][0] == slot:
                senders.append(stations[heapq.heappop(heap)[1]])
            for st in senders:
                attempts[st.id, 0] += 1
            if len(senders) == 1:
                st = senders[0]
                successes[st.id, 0] += 1
                pkts = list(st.fresh)
                st.fresh.clear()
                st.contending = False
                bits = sum(b for _, b in pkts)
                owed = math.ceil(bits / quantum)
                granted_bits += owed * quantum
                waste_bits += owed * quantum - bits
                request_sizes.append(bits)
                pending.append([st.id, pkts, owed])
            else:
                collisions += 1
                for st in senders:
                    st.window = min(2 * st.window, cfg.backoff_max)
                    heapq.heappush(heap, (slot + 1 + st.rng.randrange(st.window), st.id))
        requests.extend(pending)
        pending = []

    queued = np.array([len(st.fresh) for st in stations], dtype=np.int64)
    for req in requests:
        queued[req[0]] += len(req[1])
    queued += np.bincount(ev_station[ptr:], minlength=n)
    span = n_frames * cfg.t_frame
    assert delivered_bits <= cfg.subchannels_per_frame * quantum * n_frames + 1e-6
    delays = np.asarray(delays, dtype=float)
    return SimMetrics(
        duration=duration,
        n_frames=n_frames,
        throughput_bps=delivered_bits / span if span > 0 else 0.0,
        delivered_bits=delivered_bits,
        delays=delays,
        delay_station=np.asarray(delay_station, dtype=np.int64),
        mean_delay=float(delays.mean()) if delays.size else math.nan,
        collisions=collisions,
        unresolved=0,
        stage_hist=np.zeros(1, dtype=np.int64),
        queue_end=queued,
        generated=generated,
        delivered_packets=delivered_packets,
        dropped=0,
        attempts=attempts,
        successes=successes,
        reuse_events=0,
        short_run=n_frames < MIN_FRAMES,
        extra={"granted_bits": granted_bits, "waste_bits": waste_bits,
               "request_bits": np.asarray(request_sizes)},
    )


def efficiency(metrics: SimMetrics, cfg: BaselineConfig) -> float:
    """Delivered payload over the nominal upstream capacity."""
    return metrics.throughput_bps / cfg.upstream_bps
