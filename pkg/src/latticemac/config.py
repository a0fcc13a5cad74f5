"""System parameters, channel topologies and the plain-text config format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SystemConfig:
    beta: int = 7                 # backoff values are drawn from [0..beta]
    s_max: int = 15               # last contention stage
    epsilon: float = 10e-6        # slot duration (s)
    preamble_slots: int = 5       # speculative preamble length (slots)
    t_frame: float = 0.005
    t_up: float = 0.0025
    t_down: float = 0.0025
    sigma: float = 3360.0         # bits per channel per upstream subframe
    p_bit: float = 0.0
    p_corr: float = 0.0
    distance_km: float = 1.0

    @property
    def stage_slots(self) -> int:
        return self.beta + 1 + self.preamble_slots

    @property
    def stage_time(self) -> float:
        return self.stage_slots * self.epsilon

    @property
    def subframe_slots(self) -> int:
        return int(round(self.t_up / self.epsilon))

    @property
    def bits_per_slot(self) -> float:
        return self.sigma / self.subframe_slots

    @property
    def propagation_delay(self) -> float:
        return self.distance_km / 300000.0

    def validate(self) -> "SystemConfig":
        if self.beta < 1:
            raise ConfigError("beta", "must be >= 1")
        if (self.beta + 1) % 2:
            raise ConfigError("beta", "beta + 1 must be even for the post-backoff window")
        if self.s_max < 0:
            raise ConfigError("s_max", "must be >= 0")
        if self.preamble_slots < 0:
            raise ConfigError("preamble_slots", "must be >= 0")
        for name in ("epsilon", "t_frame", "t_up", "sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be > 0")
        if self.t_down < 0:
            raise ConfigError("t_down", "must be >= 0")
        if not math.isclose(self.t_frame, self.t_up + self.t_down, rel_tol=1e-9, abs_tol=1e-12):
            raise ConfigError("t_frame", "must equal t_up + t_down")
        for name in ("p_bit", "p_corr"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(name, "must lie in [0, 1]")
        if self.stage_time * (self.s_max + 1) >= self.t_up:
            raise ConfigError("s_max", "worst-case contention does not fit in the upstream subframe")
        if self.distance_km < 0:
            raise ConfigError("distance_km", "must be >= 0")
        return self


@dataclass(frozen=True)
class ChannelTopology:
    """Stations, channels and per-station allowed channel sets."""

    n_channels: int
    allowed: tuple
    lam: np.ndarray = field(repr=False)
    payload_bits: float = 2400.0

    def __post_init__(self):
        object.__setattr__(self, "allowed", tuple(tuple(sorted(set(a))) for a in self.allowed))
        lam = np.broadcast_to(np.asarray(self.lam, dtype=float), (len(self.allowed),)).copy()
        object.__setattr__(self, "lam", lam)

    @property
    def n_stations(self) -> int:
        return len(self.allowed)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n_stations, self.n_channels), dtype=bool)
        for k, chans in enumerate(self.allowed):
            m[k, list(chans)] = True
        return m

    def stations_on(self, c: int) -> np.ndarray:
        return np.array([k for k, chans in enumerate(self.allowed) if c in chans], dtype=int)

    def with_rate(self, lam) -> "ChannelTopology":
        return replace(self, lam=lam)

    def validate(self) -> "ChannelTopology":
        if self.n_channels < 1:
            raise ConfigError("n_channels", "must be >= 1")
        if self.n_stations < 1:
            raise ConfigError("n_stations", "must be >= 1")
        for k, chans in enumerate(self.allowed):
            if not chans:
                raise ConfigError("allowed", f"station {k} has no allowed channel")
            if chans[0] < 0 or chans[-1] >= self.n_channels:
                raise ConfigError("allowed", f"station {k} uses a channel outside [0, {self.n_channels})")
        if np.any(self.lam < 0) or not np.all(np.isfinite(self.lam)):
            raise ConfigError("lambda", "arrival rates must be finite and >= 0")
        if not self.payload_bits > 0:
            raise ConfigError("payload_bits", "must be > 0")
        return self


def grouped_topology(n_groups: int, stations_per_group: int, channels_per_group: int,
                     lam=0.0, payload_bits: float = 2400.0) -> ChannelTopology:
    """Each group of stations shares its own block of channels."""
    allowed = []
    for g in range(n_groups):
        block = tuple(range(g * channels_per_group, (g + 1) * channels_per_group))
        allowed.extend([block] * stations_per_group)
    return ChannelTopology(n_groups * channels_per_group, tuple(allowed), lam, payload_bits)


def per_station_rate(offered_bps: float, n_stations: int, payload_bits: float) -> float:
    return offered_bps / (n_stations * payload_bits)


# ---------------------------------------------------------------------------
# key = value config files

_SYSTEM_KEYS = {f.name: f.type for f in fields(SystemConfig)}

_EXTRA_KEYS = {
    "n_stations": int,
    "n_groups": int,
    "channels_per_group": int,
    "payload_bits": float,
    "profile": str,
    "lambda": float,
    "offered_bps": float,
    "duration": float,
    "seeds": str,
    "contention_slots": int,
    "backoff_initial": int,
    "backoff_max": int,
    "subchannel_bytes": int,
    "upstream_bps": float,
}


def _coerce(key, raw, kind):
    try:
        if kind in (int, "int"):
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r}") from None


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _SYSTEM_KEYS:
            out[key] = _coerce(key, raw, _SYSTEM_KEYS[key])
        elif key in _EXTRA_KEYS:
            out[key] = _coerce(key, raw, _EXTRA_KEYS[key])
        else:
            raise ConfigError(key, "unknown key")
    return out


def load_config(path) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read())


def system_config_from(values: dict) -> SystemConfig:
    kw = {k: v for k, v in values.items() if k in _SYSTEM_KEYS}
    cfg = SystemConfig(**kw)
    if "t_frame" in kw and "t_up" not in kw and "t_down" not in kw:
        cfg = replace(cfg, t_up=cfg.t_frame / 2, t_down=cfg.t_frame / 2)
    elif "t_frame" not in kw and ("t_up" in kw or "t_down" in kw):
        cfg = replace(cfg, t_frame=cfg.t_up + cfg.t_down)
    return cfg.validate()


def format_config(values: dict) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in values)
