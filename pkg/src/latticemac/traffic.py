"""Poisson packet arrivals with smart-grid payload profiles, plus trace files."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Average payload per source node, bytes.
PROFILE_BYTES = {
    "hvalv": 500,
    "substation": 5000,
    "der": 224,
    "switch": 100,
}

DISTRIBUTIONS = ("constant", "empirical")


@dataclass(frozen=True)
class TrafficProfile:
    name: str
    mean_payload_bits: float
    rate: float = 0.0                     # packets per second
    distribution: str = "constant"
    samples: tuple = ()                   # payload lengths (bits) for "empirical"

    def __post_init__(self):
        if not self.mean_payload_bits > 0:
            raise ValueError("mean payload must be > 0")
        if self.rate < 0:
            raise ValueError("arrival rate must be >= 0")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown payload distribution {self.distribution!r}")
        if self.distribution == "empirical" and not self.samples:
            raise ValueError("empirical distribution needs payload samples")

    def with_rate(self, rate: float) -> "TrafficProfile":
        return TrafficProfile(self.name, self.mean_payload_bits, rate, self.distribution, self.samples)


def profile(name: str, rate: float = 0.0, payload_bits: float | None = None) -> TrafficProfile:
    """Look up a traffic class; ``fixed`` takes an explicit ``payload_bits``."""
    key = name.lower().replace("/", "").replace("-", "").replace("_", "")
    if key == "fixed":
        if payload_bits is None:
            raise ValueError("the fixed profile needs payload_bits")
        return TrafficProfile("fixed", float(payload_bits), rate)
    if key not in PROFILE_BYTES:
        valid = ", ".join(sorted(PROFILE_BYTES) + ["fixed"])
        raise ValueError(f"unknown traffic class {name!r}; valid classes: {valid}")
    return TrafficProfile(key, PROFILE_BYTES[key] * 8.0, rate)


def empirical_profile(name: str, payloads, rate: float = 0.0) -> TrafficProfile:
    samples = tuple(float(p) for p in payloads)
    return TrafficProfile(name, float(np.mean(samples)), rate, "empirical", samples)


def generate_arrivals(prof: TrafficProfile, duration: float, seed) -> list[tuple[float, float]]:
    """Ordered ``(time, payload_bits)`` pairs over ``[0, duration)``."""
    times, bits = arrival_arrays(prof, duration, seed)
    return list(zip(times.tolist(), bits.tolist()))


def arrival_arrays(prof: TrafficProfile, duration: float, seed):
    if not duration > 0:
        raise ValueError("duration must be > 0")
    rng = np.random.default_rng(seed)
    if prof.rate == 0:
        return np.empty(0), np.empty(0)
    # draw in chunks until the horizon is passed
    expected = prof.rate * duration
    chunk = int(expected + 6 * np.sqrt(expected) + 16)
    gaps = rng.exponential(1.0 / prof.rate, chunk)
    times = np.cumsum(gaps)
    while times[-1] < duration:
        more = np.cumsum(rng.exponential(1.0 / prof.rate, chunk)) + times[-1]
        times = np.concatenate([times, more])
    times = times[times < duration]
    if prof.distribution == "constant":
        bits = np.full(times.size, prof.mean_payload_bits)
    else:
        bits = rng.choice(np.asarray(prof.samples), size=times.size)
    return times, bits


def export_trace(arrivals, path) -> None:
    with open(path, "w") as fh:
        for t, bits in arrivals:
            fh.write(f"{float(t)!r},{float(bits)!r}\n")


def load_trace(path) -> list[tuple[float, float]]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                if len(parts) != 2:
                    raise ValueError
                t, bits = float(parts[0]), float(parts[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'arrival_seconds,payload_bits'") from None
            if t < 0 or bits <= 0:
                raise ValueError(f"{path}:{lineno}: negative time or non-positive payload")
            if out and t < out[-1][0]:
                raise ValueError(f"{path}:{lineno}: arrivals must be in time order")
            out.append((t, bits))
    return out
