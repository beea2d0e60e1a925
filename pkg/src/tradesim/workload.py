"""Reproducible trading request streams: tidal profiles, open ramps, Poisson
arrivals, injected bursts, and predictor feature windows."""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, WarmupError

FEATURE_COUNT = 18


@dataclass(frozen=True)
class BurstSpec:
    """Rectangular rate surge: multiply the rate by `magnitude` while active."""

    start_tick: int
    duration: int
    magnitude: float

    def __post_init__(self) -> None:
        if self.duration < 1:
            raise ConfigError(f"burst duration must be >= 1, got {self.duration}")
        if self.magnitude < 1.0:
            raise ConfigError(f"burst magnitude must be >= 1, got {self.magnitude}")

    def active_at(self, t: int) -> bool:
        return self.start_tick <= t < self.start_tick + self.duration


@dataclass(frozen=True)
class RampSpec:
    """Linear concurrent-user ramp; the rate scales with users/start_users."""

    start_tick: int
    duration_ticks: int
    start_users: float
    end_users: float

    def __post_init__(self) -> None:
        if self.duration_ticks <= 0:
            raise ConfigError("ramp duration must be > 0")
        if self.start_users <= 0:
            raise ConfigError("ramp start_users must be > 0")

    def users_at(self, t: int) -> float:
        if t <= self.start_tick:
            return self.start_users
        if t >= self.start_tick + self.duration_ticks:
            return self.end_users
        frac = (t - self.start_tick) / self.duration_ticks
        return self.start_users + frac * (self.end_users - self.start_users)

    def factor_at(self, t: int) -> float:
        return self.users_at(t) / self.start_users


@dataclass(frozen=True)
class ServiceSpec:
    """One of the core services: request mix weight and per-request cost."""

    name: str
    weight: float
    work_units: float  # abstract CPU-ms per request
    payload_bytes: int
    mem_mb: float = 64.0  # resident footprint per instance

    def __post_init__(self) -> None:
        if self.weight < 0:
            raise ConfigError(f"service weight must be >= 0, got {self.weight}")
        if self.work_units <= 0:
            raise ConfigError(f"work_units must be > 0, got {self.work_units}")


def default_service_mix() -> tuple[ServiceSpec, ...]:
    """The eight core trading services with a plausible request mix."""
    specs = [
        ("auth", 0.10, 6.0, 512),
        ("market-data", 0.30, 3.0, 2048),
        ("commission", 0.15, 8.0, 768),
        ("order-match", 0.20, 10.0, 1024),
        ("clearing", 0.05, 12.0, 1536),
        ("risk-control", 0.10, 9.0, 896),
        ("ledger", 0.05, 7.0, 640),
        ("notify", 0.05, 2.0, 384),
    ]
    return tuple(ServiceSpec(n, w, wu, pb) for n, w, wu, pb in specs)


@dataclass(frozen=True)
class WorkloadScenario:
    base_rate: float  # requests/second
    peak_rate: float
    horizon: int  # ticks
    seed: int
    tick_length: float = 1.0  # seconds
    ramp: RampSpec | None = None
    tidal_profile: tuple[tuple[int, float], ...] = ()
    bursts: tuple[BurstSpec, ...] = ()
    service_mix: tuple[ServiceSpec, ...] = field(default_factory=default_service_mix)
    users_to_rate: float = 1.0  # requests/second contributed per concurrent user

    def __post_init__(self) -> None:
        if self.base_rate <= 0:
            raise ConfigError(f"base_rate must be > 0, got {self.base_rate}")
        if self.peak_rate < self.base_rate:
            raise ConfigError("peak_rate must be >= base_rate")
        if self.horizon <= 0:
            raise ConfigError("horizon must be > 0")
        if self.tick_length <= 0:
            raise ConfigError("tick_length must be > 0")
        if not self.service_mix:
            raise ConfigError("service_mix must not be empty")
        if sum(s.weight for s in self.service_mix) <= 0:
            raise ConfigError("service mix weights must sum to > 0")
        for off, mult in self.tidal_profile:
            if mult <= 0:
                raise ConfigError(f"tidal multiplier must be > 0, got {mult} at {off}")

    @property
    def service_count(self) -> int:
        return len(self.service_mix)

    def service_weights(self) -> np.ndarray:
        w = np.array([s.weight for s in self.service_mix], dtype=float)
        return w / w.sum()


@dataclass(frozen=True)
class Request:
    arrival_tick: int
    service_id: int
    work_units: float
    payload_bytes: int


@dataclass(frozen=True)
class FeatureVector:
    """Fixed 18-feature predictor input; see `extract_features` for the layout."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.values) != FEATURE_COUNT:
            raise ValueError(f"expected {FEATURE_COUNT} features, got {len(self.values)}")
        if not all(np.isfinite(v) for v in self.values):
            raise ValueError("feature values must be finite")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


def tick_rng(seed: int, t: int, stream: int = 0) -> np.random.Generator:
    """Generator derived from (seed, tick) so every tick regenerates independently."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, stream, t])


def tidal_multiplier(profile: tuple[tuple[int, float], ...], t: int) -> float:
    """Step profile: the multiplier of the last breakpoint at or before t (1.0 if none)."""
    if not profile:
        return 1.0
    offsets = [off for off, _ in profile]
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        profile = tuple(sorted(profile))
        offsets = [off for off, _ in profile]
    idx = bisect_right(offsets, t) - 1
    return profile[idx][1] if idx >= 0 else 1.0


def rate_profile(scenario: WorkloadScenario, t: int) -> float:
    """Deterministic arrival rate lambda(t) in requests/second."""
    if not 0 <= t < scenario.horizon:
        raise ValueError(f"tick {t} outside horizon [0, {scenario.horizon})")
    rate = scenario.base_rate
    rate *= tidal_multiplier(scenario.tidal_profile, t)
    if scenario.ramp is not None:
        rate *= scenario.ramp.factor_at(t)
    for burst in scenario.bursts:
        if burst.active_at(t):
            rate *= burst.magnitude
    return rate


def generate_tick_counts(scenario: WorkloadScenario, t: int) -> np.ndarray:
    """Per-service Poisson request counts for one tick (fast path, no objects)."""
    lam = rate_profile(scenario, t) * scenario.tick_length
    if lam <= 0:
        return np.zeros(scenario.service_count, dtype=np.int64)
    rng = tick_rng(scenario.seed, t)
    total = rng.poisson(lam)
    if total == 0:
        return np.zeros(scenario.service_count, dtype=np.int64)
    return rng.multinomial(total, scenario.service_weights())


def generate_tick(scenario: WorkloadScenario, t: int) -> list[Request]:
    """Materialize the tick's requests; deterministic for a fixed scenario seed."""
    counts = generate_tick_counts(scenario, t)
    requests: list[Request] = []
    for sid, count in enumerate(counts):
        spec = scenario.service_mix[sid]
        requests.extend(
            Request(t, sid, spec.work_units, spec.payload_bytes) for _ in range(int(count))
        )
    return requests


# --- predictor feature extraction -------------------------------------------


@dataclass
class TickHistory:
    """Per-tick volume series plus the clock/market context features need.

    Indicator series are optional; absent ones contribute zeros so the
    feature contract (18 finite values) always holds.
    """

    volume: list[float] = field(default_factory=list)
    price_volatility: list[float] = field(default_factory=list)
    order_cancel_ratio: list[float] = field(default_factory=list)
    burst_flags: list[int] = field(default_factory=list)
    busiest_utilization: list[float] = field(default_factory=list)
    tick_length: float = 1.0  # seconds
    ticks_per_day: int = 86_400
    market_open_tick: int = 0  # offset within the day
    market_close_tick: int = 86_400

    def append(
        self,
        volume: float,
        price_volatility: float = 0.0,
        order_cancel_ratio: float = 0.0,
        burst_flag: int = 0,
        busiest_utilization: float = 0.0,
    ) -> None:
        self.volume.append(float(volume))
        self.price_volatility.append(float(price_volatility))
        self.order_cancel_ratio.append(float(order_cancel_ratio))
        self.burst_flags.append(int(burst_flag))
        self.busiest_utilization.append(float(busiest_utilization))

    def __len__(self) -> int:
        return len(self.volume)


@dataclass(frozen=True)
class FeatureScaling:
    """Stored normalization constants so train and inference agree."""

    volume_scale: float = 1.0
    session_minutes: float = 390.0  # used to normalize open/close distances

    def __post_init__(self) -> None:
        if self.volume_scale <= 0 or self.session_minutes <= 0:
            raise ConfigError("scaling constants must be > 0")


def _window_slope(values: np.ndarray) -> float:
    # least-squares slope of value per tick over the window
    n = len(values)
    if n < 2:
        return 0.0
    x = np.arange(n, dtype=float)
    x -= x.mean()
    denom = float(np.dot(x, x))
    return float(np.dot(x, values - values.mean()) / denom) if denom else 0.0


def extract_features(
    history: TickHistory,
    window: int,
    scaling: FeatureScaling | None = None,
    end: int | None = None,
) -> FeatureVector:
    """18 features over `history[:end]`: 8 volume stats, 6 time features,
    4 market indicators.

    Layout: [mean, std, min, max, last, slope, lag1, lag5,
             sin_tod, cos_tod, sin_dow, cos_dow, mins_since_open, mins_to_close,
             price_volatility, order_cancel_ratio, burst_flag_count, busiest_util]
    Volume statistics are divided by `scaling.volume_scale`.
    """
    scaling = scaling or FeatureScaling()
    end = len(history) if end is None else end
    if end > len(history):
        raise ValueError(f"end {end} beyond recorded history {len(history)}")
    if window < 2:
        raise ConfigError("feature window must be >= 2 ticks")
    if end < window:
        raise WarmupError(f"need {window} ticks of history, have {end}")

    vol = np.asarray(history.volume[end - window : end], dtype=float)
    vs = scaling.volume_scale
    lag1 = vol[-2] if window >= 2 else vol[-1]
    lag5 = vol[-6] if window >= 6 else vol[0]
    volume_stats = [
        vol.mean() / vs,
        vol.std() / vs,
        vol.min() / vs,
        vol.max() / vs,
        vol[-1] / vs,
        _window_slope(vol) / vs,
        lag1 / vs,
        lag5 / vs,
    ]

    t = end - 1
    tod = (t % history.ticks_per_day) / history.ticks_per_day
    day = (t // history.ticks_per_day) % 7
    minutes_per_tick = history.tick_length / 60.0
    since_open = (t % history.ticks_per_day - history.market_open_tick) * minutes_per_tick
    to_close = (history.market_close_tick - t % history.ticks_per_day) * minutes_per_tick
    time_feats = [
        np.sin(2 * np.pi * tod),
        np.cos(2 * np.pi * tod),
        np.sin(2 * np.pi * day / 7.0),
        np.cos(2 * np.pi * day / 7.0),
        np.clip(since_open / scaling.session_minutes, -1.0, 2.0),
        np.clip(to_close / scaling.session_minutes, -1.0, 2.0),
    ]

    def tail(series: list[float], default: float = 0.0) -> np.ndarray:
        if len(series) >= end:
            return np.asarray(series[end - window : end], dtype=float)
        return np.full(window, default)

    market_feats = [
        tail(history.price_volatility).mean(),
        tail(history.order_cancel_ratio).mean(),
        float(tail([float(b) for b in history.burst_flags]).sum()),
        tail(history.busiest_utilization)[-1],
    ]

    values = tuple(float(v) for v in volume_stats + time_feats + market_feats)
    return FeatureVector(values)


# --- scenario (de)serialization ----------------------------------------------


def scenario_to_dict(scenario: WorkloadScenario) -> dict:
    return {
        "base_rate": scenario.base_rate,
        "peak_rate": scenario.peak_rate,
        "ramp": None
        if scenario.ramp is None
        else {
            "start_tick": scenario.ramp.start_tick,
            "duration_ticks": scenario.ramp.duration_ticks,
            "start_users": scenario.ramp.start_users,
            "end_users": scenario.ramp.end_users,
        },
        "tidal_profile": [[off, mult] for off, mult in scenario.tidal_profile],
        "bursts": [
            {"start_tick": b.start_tick, "duration": b.duration, "magnitude": b.magnitude}
            for b in scenario.bursts
        ],
        "horizon": scenario.horizon,
        "tick_length": scenario.tick_length,
        "seed": scenario.seed,
        "users_to_rate": scenario.users_to_rate,
        "service_mix": [
            {
                "name": s.name,
                "weight": s.weight,
                "work_units": s.work_units,
                "payload_bytes": s.payload_bytes,
                "mem_mb": s.mem_mb,
            }
            for s in scenario.service_mix
        ],
    }


def scenario_from_dict(data: dict) -> WorkloadScenario:
    try:
        ramp = data.get("ramp")
        return WorkloadScenario(
            base_rate=data["base_rate"],
            peak_rate=data["peak_rate"],
            horizon=data["horizon"],
            seed=data["seed"],
            tick_length=data.get("tick_length", 1.0),
            ramp=None if ramp is None else RampSpec(**ramp),
            tidal_profile=tuple((int(o), float(m)) for o, m in data.get("tidal_profile", [])),
            bursts=tuple(BurstSpec(**b) for b in data.get("bursts", [])),
            service_mix=tuple(ServiceSpec(**s) for s in data["service_mix"])
            if data.get("service_mix")
            else default_service_mix(),
            users_to_rate=data.get("users_to_rate", 1.0),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad scenario definition: {exc}") from exc


def save_scenario(scenario: WorkloadScenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=2) + "\n")


def load_scenario(path: str | Path) -> WorkloadScenario:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"scenario file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file {p} is not valid JSON: {exc}") from exc
    return scenario_from_dict(data)
