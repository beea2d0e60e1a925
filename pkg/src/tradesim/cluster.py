"""Discrete-time cluster simulation: nodes, service instances, queues and the
latency/reward model driving every scheduler in this package.

The hot path works on per-service request counts (queues are FIFO buckets per
arrival tick), so rollouts over hundreds of thousands of ticks stay cheap;
`step` accepts materialized Request lists and aggregates them.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .workload import Request, ServiceSpec, default_service_mix

# Lognormal jitter sigma such that a unit-mean multiplier turns the 85 ms
# component sum into p95 = 120 ms (solve 1.6449*s - s^2/2 = ln(120/85)).
CALIBRATED_JITTER_SIGMA = 0.22504290663979853


@dataclass(frozen=True)
class NodeSpec:
    cpu_capacity: float  # abstract CPU-ms per tick
    mem_capacity: float  # MB
    net_capacity: float  # MB per tick

    def __post_init__(self) -> None:
        if min(self.cpu_capacity, self.mem_capacity, self.net_capacity) <= 0:
            raise ConfigError("node capacities must be > 0")


@dataclass(frozen=True)
class LatencyModel:
    network_ms: float = 15.0
    processing_ms: float = 45.0
    data_access_ms: float = 25.0
    jitter_sigma: float = CALIBRATED_JITTER_SIGMA
    jitter_enabled: bool = True
    rho_cap: float = 0.9  # contention factor saturates here; beyond it queueing takes over

    @property
    def uncontended_ms(self) -> float:
        return self.network_ms + self.processing_ms + self.data_access_ms


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean Gaussian observation noise applied to utilization readings."""

    std: float = 0.01


@dataclass(frozen=True)
class RewardSpec:
    w1: float = 0.4
    w2: float = 0.35
    w3: float = 0.25
    T_target: float = 100.0  # ms
    u_target: float = 0.7
    cost_instance: float = 0.01
    cost_migration: float = 0.02
    cost_quota: float = 0.005

    def __post_init__(self) -> None:
        if min(self.w1, self.w2, self.w3) < 0:
            raise ConfigError("reward weights must be >= 0")
        if self.T_target <= 0:
            raise ConfigError("T_target must be > 0")
        if not 0.0 < self.u_target < 1.0:
            raise ConfigError("u_target must be in (0, 1)")


@dataclass(frozen=True)
class ClusterTopology:
    nodes: tuple[NodeSpec, ...]
    services: tuple[ServiceSpec, ...]
    initial_placement: tuple[tuple[int, ...], ...]  # services x nodes instance counts
    initial_quota: tuple[float, ...]  # per-service fraction of node CPU per instance
    initial_priority: tuple[float, ...]
    latency: LatencyModel = field(default_factory=LatencyModel)
    history_window: int = 60  # ticks of load statistics
    ewma_alpha: float = 0.2
    queue_reference: float = 1000.0  # requests; normalizes the compact L component
    tick_length: float = 1.0  # seconds

    def __post_init__(self) -> None:
        k, n = len(self.services), len(self.nodes)
        if len(self.initial_placement) != k or any(len(r) != n for r in self.initial_placement):
            raise ConfigError("initial_placement must be services x nodes")
        if len(self.initial_quota) != k or len(self.initial_priority) != k:
            raise ConfigError("quota/priority must have one entry per service")
        placement = np.array(self.initial_placement)
        if np.any(placement.sum(axis=1) < 1):
            raise ConfigError("every service needs at least one instance")
        for q in self.initial_quota:
            if not 0.0 < q <= 1.0:
                raise ConfigError(f"quota {q} outside (0, 1]")
        commit = placement.T @ np.asarray(self.initial_quota)
        if np.any(commit > 1.0 + 1e-9):
            raise ConfigError("per-node quota commitment exceeds 1")

    @property
    def service_count(self) -> int:
        return len(self.services)

    @property
    def node_count(self) -> int:
        return len(self.nodes)


def uniform_topology(
    node_count: int = 4,
    node_cpu: float = 4000.0,
    node_mem: float = 8192.0,
    node_net: float = 500.0,
    services: tuple[ServiceSpec, ...] | None = None,
    instances_per_service: int = 1,
    quota: float = 0.1,
    latency: LatencyModel | None = None,
    **kwargs,
) -> ClusterTopology:
    """Homogeneous cluster with instances spread round-robin across nodes."""
    services = services or default_service_mix()
    k = len(services)
    placement = np.zeros((k, node_count), dtype=int)
    node = 0
    for s in range(k):
        for _ in range(instances_per_service):
            placement[s, node % node_count] += 1
            node += 1
    return ClusterTopology(
        nodes=tuple(NodeSpec(node_cpu, node_mem, node_net) for _ in range(node_count)),
        services=services,
        initial_placement=tuple(tuple(int(v) for v in row) for row in placement),
        initial_quota=tuple(quota for _ in range(k)),
        initial_priority=tuple(0.5 for _ in range(k)),
        latency=latency or LatencyModel(),
        **kwargs,
    )


@dataclass(frozen=True)
class SchedulingAction:
    """Composite action: instance deltas, migration matrix, priorities, quotas."""

    instance_delta: np.ndarray  # (k,) int
    migration: np.ndarray  # (k, n) in {0, 1}
    priority: np.ndarray  # (k,) in [0, 1]
    quota: np.ndarray  # (k,) in (0, 1]

    def cost(self, previous_quota: np.ndarray, spec: RewardSpec) -> float:
        """Scheduling overhead C_t: instance changes + migrations + quota drift."""
        return (
            spec.cost_instance * float(np.abs(self.instance_delta).sum())
            + spec.cost_migration * float(self.migration.sum())
            + spec.cost_quota * float(np.abs(self.quota - previous_quota).sum())
        )


@dataclass
class SystemState:
    """Observation vector: per-service loads, node utilization matrix, queue
    lengths, windowed history statistics and performance metrics."""

    load: np.ndarray  # (k,) requests arrived last tick
    util: np.ndarray  # (n, 3) cpu/mem/net in [0, 1], observation-noised
    queue_len: np.ndarray  # (k,)
    hist_mean: np.ndarray  # (k,) windowed mean load
    hist_var: np.ndarray  # (k,) windowed load variance
    latency_ms: np.ndarray  # (k,) mean completed-request latency last tick
    throughput: np.ndarray  # (k,) completions per second
    service_quota: np.ndarray  # (k,) bookkeeping for action costs, not an observation block
    tick: int = 0

    def dimensions(self) -> dict[str, int]:
        k = len(self.load)
        return {
            "d_l": k,
            "d_r": self.util.size,
            "d_g": k,
            "d_h": 2 * k,
            "d_p": 2 * k,
        }

    def copy(self) -> "SystemState":
        return SystemState(
            load=self.load.copy(),
            util=self.util.copy(),
            queue_len=self.queue_len.copy(),
            hist_mean=self.hist_mean.copy(),
            hist_var=self.hist_var.copy(),
            latency_ms=self.latency_ms.copy(),
            throughput=self.throughput.copy(),
            service_quota=self.service_quota.copy(),
            tick=self.tick,
        )


def service_latency(
    model: LatencyModel,
    rho: float,
    cache_hit_rate: float = 0.0,
    jitter: float | None = None,
) -> float:
    """Per-request latency in ms at offered intensity rho (fraction of capacity).

    Contention multiplies the processing component by 1/(1-rho) with rho capped
    at `rho_cap`; overload beyond that surfaces as queue wait in the simulator,
    never as a division blow-up here. The data-access component shrinks with
    the cache hit rate. `jitter` is a multiplicative draw (None = disabled).
    """
    rho_eff = min(max(rho, 0.0), model.rho_cap)
    hit = min(max(cache_hit_rate, 0.0), 1.0)
    base = (
        model.network_ms
        + model.processing_ms / (1.0 - rho_eff)
        + model.data_access_ms * (1.0 - hit)
    )
    return base * (jitter if jitter is not None else 1.0)


def sample_jitter(model: LatencyModel, rng: np.random.Generator, size: int) -> np.ndarray:
    """Unit-mean lognormal multipliers: exp(sigma*Z - sigma^2/2)."""
    if not model.jitter_enabled or model.jitter_sigma == 0.0:
        return np.ones(size)
    s = model.jitter_sigma
    return np.exp(s * rng.standard_normal(size) - 0.5 * s * s)


def jitter_quantile(model: LatencyModel, level: float) -> float:
    """Closed-form quantile of the unit-mean jitter multiplier."""
    if not model.jitter_enabled or model.jitter_sigma == 0.0:
        return 1.0
    s = model.jitter_sigma
    z = math.sqrt(2.0) * _erfinv(2.0 * level - 1.0)
    return math.exp(s * z - 0.5 * s * s)


def _erfinv(y: float) -> float:
    # Newton refinement of a rational initial guess; plenty for quantile use.
    if abs(y) >= 1.0:
        raise ValueError("erfinv domain is (-1, 1)")
    w = math.log(1.0 - y * y)
    a = 0.147
    x = math.copysign(
        math.sqrt(math.sqrt((2.0 / (math.pi * a) + w / 2.0) ** 2 - w / a) - (2.0 / (math.pi * a) + w / 2.0)),
        y,
    )
    for _ in range(3):
        err = math.erf(x) - y
        x -= err / (2.0 / math.sqrt(math.pi) * math.exp(-x * x))
    return x


def reward(
    state_before: SystemState,
    state_after: SystemState,
    action: SchedulingAction,
    spec: RewardSpec,
) -> float:
    """Negative weighted penalty: latency overshoot + utilization distance +
    scheduling cost. Always <= 0; 0 only when every term vanishes."""
    t_term = float(np.sum(state_after.latency_ms / spec.T_target))
    u_term = float(np.sum(np.abs(state_after.util[:, 0] - spec.u_target)))
    c_term = action.cost(state_before.service_quota, spec)
    return -(spec.w1 * t_term + spec.w2 * u_term + spec.w3 * c_term)


@dataclass
class TickRecord:
    tick: int
    completed: np.ndarray  # (k,)
    mean_ms: np.ndarray  # (k,) 0 where nothing completed
    p50_ms: float
    p95_ms: float
    util: np.ndarray  # (n, 3)
    queue_len: np.ndarray  # (k,)


class ClusterSim:
    """Single-threaded simulation instance; run one per rollout."""

    def __init__(
        self,
        topology: ClusterTopology,
        seed: int = 0,
        noise: NoiseSpec | None = None,
        reward_spec: RewardSpec | None = None,
        cache_hit_rate: float = 0.0,
        latency_sample_cap: int = 64,
        record_trace: bool = False,
    ):
        self.topology = topology
        self.noise = noise if noise is not None else NoiseSpec()
        self.reward_spec = reward_spec or RewardSpec()
        self.cache_hit_rate = cache_hit_rate
        self.latency_sample_cap = latency_sample_cap
        self.record_trace = record_trace

        k, n = topology.service_count, topology.node_count
        self.k, self.n = k, n
        self.placement = np.array(topology.initial_placement, dtype=int)
        self.quota = np.array(topology.initial_quota, dtype=float)
        self.priority = np.array(topology.initial_priority, dtype=float)
        self.node_cpu = np.array([nd.cpu_capacity for nd in topology.nodes])
        self.node_mem = np.array([nd.mem_capacity for nd in topology.nodes])
        self.node_net = np.array([nd.net_capacity for nd in topology.nodes])
        self.work_units = np.array([s.work_units for s in topology.services])
        self.payload_mb = np.array([s.payload_bytes for s in topology.services]) / 1e6
        self.svc_mem = np.array([s.mem_mb for s in topology.services])

        self.tick = 0
        self.queues: list[deque[list]] = [deque() for _ in range(k)]  # [arrival_tick, count]
        self.queue_len = np.zeros(k, dtype=np.int64)
        self.carry_work = np.zeros(k)
        self.util_true = np.zeros((n, 3))
        self.util_obs = np.zeros((n, 3))
        self.load_history: deque[np.ndarray] = deque(maxlen=topology.history_window)
        self.last_load = np.zeros(k, dtype=np.int64)
        self.last_latency_ms = np.zeros(k)
        self.last_throughput = np.zeros(k)

        self.generated_total = 0
        self.completed_total = 0
        self.sanitized_actions = 0
        self.first_scale_up_tick = -1
        self.backlog_integral = 0.0
        self.reward_trace: list[float] = []
        self.trace: list[TickRecord] = []
        self.latency_samples: list[np.ndarray] = []
        self.latency_weights: list[np.ndarray] = []

        self._noise_rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 101])
        self._jitter_rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 202])

    # -- action handling ---------------------------------------------------

    def sanitize_action(self, action: SchedulingAction) -> tuple[SchedulingAction, int]:
        """Clamp the action to the feasible region; returns the clamp count."""
        clamps = 0
        delta = np.asarray(action.instance_delta, dtype=int).copy()
        totals = self.placement.sum(axis=1)
        floor = 1 - totals  # keeps at least one instance per service
        clamped_delta = np.maximum(delta, floor)
        clamps += int(np.sum(clamped_delta != delta))

        migration = np.zeros((self.k, self.n), dtype=int)
        mig = np.asarray(action.migration)
        if mig.shape == (self.k, self.n):
            migration = (mig > 0).astype(int)
        elif mig.size:
            clamps += 1

        priority = np.clip(np.asarray(action.priority, dtype=float), 0.0, 1.0)
        clamps += int(np.sum(priority != np.asarray(action.priority)))
        quota = np.clip(np.asarray(action.quota, dtype=float), 0.01, 1.0)
        clamps += int(np.sum(quota != np.asarray(action.quota)))
        return (
            SchedulingAction(clamped_delta, migration, priority, quota),
            clamps,
        )

    def _apply_action(self, action: SchedulingAction) -> SchedulingAction:
        act, clamps = self.sanitize_action(action)
        self.sanitized_actions += clamps

        for s in range(self.k):
            d = int(act.instance_delta[s])
            while d > 0:
                j = int(np.argmin(self._node_commit()))
                self.placement[s, j] += 1
                d -= 1
            while d < 0 and self.placement[s].sum() > 1:
                j = int(np.argmax(self.placement[s]))
                self.placement[s, j] -= 1
                d += 1

        applied_migrations = 0
        for s, j in zip(*np.nonzero(act.migration)):
            sources = np.flatnonzero(self.placement[s] > 0)
            sources = sources[sources != j]
            if sources.size == 0:
                self.sanitized_actions += 1
                continue
            src = int(sources[np.argmax(self.placement[s, sources])])
            self.placement[s, src] -= 1
            self.placement[s, j] += 1
            applied_migrations += 1

        self.priority = act.priority
        self.quota = act.quota
        commit = self._node_commit()
        worst = commit.max()
        if worst > 1.0:
            self.quota = self.quota / worst
            self.sanitized_actions += 1

        if act.instance_delta.sum() > 0 and self.first_scale_up_tick < 0:
            self.first_scale_up_tick = self.tick
        self._applied_migrations = applied_migrations
        return act

    def _node_commit(self) -> np.ndarray:
        return self.placement.T.astype(float) @ self.quota

    # -- stepping ----------------------------------------------------------

    def step(self, action: SchedulingAction, requests: list[Request]) -> SystemState:
        counts = np.zeros(self.k, dtype=np.int64)
        for r in requests:
            counts[r.service_id] += 1
        return self.step_counts(action, counts)

    def step_counts(self, action: SchedulingAction, counts: np.ndarray) -> SystemState:
        """Advance one tick: apply the action, enqueue arrivals, drain queues by
        priority-weighted capacity sharing, update utilization and statistics."""
        prev_quota = self.quota.copy()
        act = self._apply_action(action)
        counts = np.asarray(counts, dtype=np.int64)

        self.generated_total += int(counts.sum())
        for s in np.flatnonzero(counts):
            self.queues[s].append([self.tick, int(counts[s])])
        self.queue_len += counts
        self.last_load = counts.copy()

        # capacity: committed share first, leftovers by priority among backlogged
        base_cap = self.placement * self.quota[:, None] * self.node_cpu[None, :]
        cap_per_service = base_cap.sum(axis=1)
        demand_work = self.queue_len * self.work_units + 0.0
        served_base = np.minimum(demand_work, cap_per_service + self.carry_work)

        with np.errstate(invalid="ignore", divide="ignore"):
            share = np.where(cap_per_service[:, None] > 0, base_cap / cap_per_service[:, None], 0.0)
        used_base = served_base[:, None] * share
        leftover = np.maximum(self.node_cpu - used_base.sum(axis=0), 0.0)

        rem = demand_work - served_base
        needy = rem > 1e-12
        extra = np.zeros_like(base_cap)
        if needy.any():
            weights = self.placement * self.priority[:, None]
            weights = np.where(needy[:, None], weights, 0.0)
            col = weights.sum(axis=0)
            with np.errstate(invalid="ignore", divide="ignore"):
                frac = np.where(col > 0, weights / np.where(col > 0, col, 1.0), 0.0)
            offer = frac * leftover[None, :]
            offered = offer.sum(axis=1)
            take = np.minimum(rem, offered)
            with np.errstate(invalid="ignore", divide="ignore"):
                scale = np.where(offered > 0, take / np.where(offered > 0, offered, 1.0), 0.0)
            extra = offer * scale[:, None]

        work_done = served_base + extra.sum(axis=1)
        used_by_node = used_base + extra

        # completions: FIFO pop; capacity is not bankable across idle ticks.
        # Contention rho is the (previous-tick EWMA) CPU utilization of the
        # nodes hosting the service, capacity-weighted: an idle instance sees
        # rho = 0 and queue wait covers anything beyond rho_cap.
        rho = share @ self.util_true[:, 0]
        completed = np.zeros(self.k, dtype=np.int64)
        sum_base_ms = np.zeros(self.k)
        tick_samples: list[np.ndarray] = []
        tick_weights: list[np.ndarray] = []
        tick_ms = self.topology.tick_length * 1000.0
        model = self.topology.latency

        for s in range(self.k):
            available = work_done[s] + 0.0
            wu = self.work_units[s]
            formula_ms = service_latency(model, float(rho[s]), self.cache_hit_rate)
            q = self.queues[s]
            while q and available >= wu:
                bucket = q[0]
                n_served = min(int(available // wu), bucket[1])
                if n_served == 0:
                    break
                wait_ticks = self.tick - bucket[0]
                base_ms = wait_ticks * tick_ms + formula_ms
                completed[s] += n_served
                sum_base_ms[s] += base_ms * n_served
                draws = min(n_served, self.latency_sample_cap)
                jit = sample_jitter(model, self._jitter_rng, draws)
                tick_samples.append(wait_ticks * tick_ms + formula_ms * jit)
                tick_weights.append(np.full(draws, n_served / draws))
                available -= n_served * wu
                bucket[1] -= n_served
                if bucket[1] == 0:
                    q.popleft()
            self.carry_work[s] = available % wu if q else 0.0

        self.queue_len -= completed
        self.completed_total += int(completed.sum())
        self.backlog_integral += float(self.queue_len.sum()) * self.topology.tick_length

        # utilization (EWMA ground truth, noisy observation)
        cpu_inst = np.clip(used_by_node.sum(axis=0) / self.node_cpu, 0.0, 1.0)
        queued_payload = (self.queue_len * self.payload_mb)[:, None] * self._placement_share()
        mem_used = (self.placement * self.svc_mem[:, None]).sum(axis=0) + queued_payload.sum(axis=0)
        mem_inst = np.clip(mem_used / self.node_mem, 0.0, 1.0)
        moved_mb = (completed * self.payload_mb)[:, None] * self._placement_share()
        net_inst = np.clip(moved_mb.sum(axis=0) / self.node_net, 0.0, 1.0)
        inst = np.stack([cpu_inst, mem_inst, net_inst], axis=1)
        a = self.topology.ewma_alpha
        self.util_true = (1.0 - a) * self.util_true + a * inst
        if self.noise.std > 0:
            eps = self._noise_rng.normal(0.0, self.noise.std, size=self.util_true.shape)
        else:
            eps = 0.0
        self.util_obs = np.clip(self.util_true + eps, 0.0, 1.0)

        self.load_history.append(counts.astype(float))
        self.last_latency_ms = np.where(completed > 0, sum_base_ms / np.maximum(completed, 1), 0.0)
        self.last_throughput = completed / self.topology.tick_length

        if tick_samples:
            samples = np.concatenate(tick_samples)
            weights = np.concatenate(tick_weights)
        else:
            samples = np.zeros(0)
            weights = np.zeros(0)
        self.latency_samples.append(samples)
        self.latency_weights.append(weights)

        state = self.observe_state()
        self.reward_trace.append(self._tick_reward(prev_quota, act, state))

        if self.record_trace:
            p50, p95 = _tick_percentiles(samples, weights)
            self.trace.append(
                TickRecord(
                    tick=self.tick,
                    completed=completed.copy(),
                    mean_ms=self.last_latency_ms.copy(),
                    p50_ms=p50,
                    p95_ms=p95,
                    util=self.util_obs.copy(),
                    queue_len=self.queue_len.copy(),
                )
            )
        self.tick += 1
        return state

    def _placement_share(self) -> np.ndarray:
        totals = self.placement.sum(axis=1, keepdims=True)
        return self.placement / np.maximum(totals, 1)

    def _tick_reward(self, prev_quota: np.ndarray, act: SchedulingAction, state: SystemState) -> float:
        spec = self.reward_spec
        t_term = float(np.sum(state.latency_ms / spec.T_target))
        u_term = float(np.sum(np.abs(state.util[:, 0] - spec.u_target)))
        c_term = (
            spec.cost_instance * float(np.abs(act.instance_delta).sum())
            + spec.cost_migration * float(self._applied_migrations)
            + spec.cost_quota * float(np.abs(self.quota - prev_quota).sum())
        )
        return -(spec.w1 * t_term + spec.w2 * u_term + spec.w3 * c_term)

    # -- observation -------------------------------------------------------

    def observe_state(self) -> SystemState:
        hist = np.stack(self.load_history) if self.load_history else np.zeros((1, self.k))
        return SystemState(
            load=self.last_load.astype(float).copy(),
            util=self.util_obs.copy(),
            queue_len=self.queue_len.astype(float).copy(),
            hist_mean=hist.mean(axis=0),
            hist_var=hist.var(axis=0),
            latency_ms=self.last_latency_ms.copy(),
            throughput=self.last_throughput.copy(),
            service_quota=self.quota.copy(),
            tick=self.tick,
        )

    def no_op_action(self) -> SchedulingAction:
        return SchedulingAction(
            instance_delta=np.zeros(self.k, dtype=int),
            migration=np.zeros((self.k, self.n), dtype=int),
            priority=self.priority.copy(),
            quota=self.quota.copy(),
        )

    def conservation_ok(self) -> bool:
        return self.generated_total == self.completed_total + int(self.queue_len.sum())

    # -- summary helpers -----------------------------------------------------

    def all_latency_samples(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.latency_samples:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(self.latency_samples), np.concatenate(self.latency_weights)


def encode_compact_state(state: SystemState, queue_reference: float = 1000.0) -> np.ndarray:
    """(C, M, N, L): mean cpu/mem utilization, normalized network throughput,
    and queue backlog relative to a configured reference."""
    c = float(state.util[:, 0].mean())
    m = float(state.util[:, 1].mean())
    n = float(state.util[:, 2].mean())
    l = float(state.queue_len.sum() / queue_reference)
    return np.array([c, m, n, l])


def _tick_percentiles(samples: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    if samples.size == 0:
        return 0.0, 0.0
    order = np.argsort(samples, kind="stable")
    cum = np.cumsum(weights[order])
    total = cum[-1]
    p50_idx = min(int(np.searchsorted(cum, 0.5 * total, side="left")), samples.size - 1)
    p95_idx = min(int(np.searchsorted(cum, 0.95 * total, side="left")), samples.size - 1)
    return float(samples[order][p50_idx]), float(samples[order][p95_idx])


def write_trace_csv(sim: ClusterSim, path: str | Path) -> None:
    """Per-tick trace: one row per (tick, service); utils are cluster means."""
    lines = ["tick,service_id,completed,p50_ms,p95_ms,util_cpu,util_mem,util_net,queue_len"]
    for rec in sim.trace:
        util_cpu, util_mem, util_net = rec.util.mean(axis=0)
        for s in range(len(rec.completed)):
            lines.append(
                f"{rec.tick},{s},{int(rec.completed[s])},{rec.p50_ms:.6f},{rec.p95_ms:.6f},"
                f"{util_cpu:.6f},{util_mem:.6f},{util_net:.6f},{int(rec.queue_len[s])}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


# --- topology (de)serialization ----------------------------------------------


def topology_to_dict(topo: ClusterTopology) -> dict:
    return {
        "nodes": [
            {"cpu_capacity": n.cpu_capacity, "mem_capacity": n.mem_capacity, "net_capacity": n.net_capacity}
            for n in topo.nodes
        ],
        "services": [
            {
                "name": s.name,
                "weight": s.weight,
                "work_units": s.work_units,
                "payload_bytes": s.payload_bytes,
                "mem_mb": s.mem_mb,
            }
            for s in topo.services
        ],
        "initial_placement": [list(row) for row in topo.initial_placement],
        "initial_quota": list(topo.initial_quota),
        "initial_priority": list(topo.initial_priority),
        "latency": {
            "network_ms": topo.latency.network_ms,
            "processing_ms": topo.latency.processing_ms,
            "data_access_ms": topo.latency.data_access_ms,
            "jitter_sigma": topo.latency.jitter_sigma,
            "jitter_enabled": topo.latency.jitter_enabled,
            "rho_cap": topo.latency.rho_cap,
        },
        "history_window": topo.history_window,
        "ewma_alpha": topo.ewma_alpha,
        "queue_reference": topo.queue_reference,
        "tick_length": topo.tick_length,
    }


def topology_from_dict(data: dict) -> ClusterTopology:
    try:
        return ClusterTopology(
            nodes=tuple(NodeSpec(**n) for n in data["nodes"]),
            services=tuple(ServiceSpec(**s) for s in data["services"]),
            initial_placement=tuple(tuple(int(v) for v in row) for row in data["initial_placement"]),
            initial_quota=tuple(float(q) for q in data["initial_quota"]),
            initial_priority=tuple(float(p) for p in data["initial_priority"]),
            latency=LatencyModel(**data.get("latency", {})),
            history_window=data.get("history_window", 60),
            ewma_alpha=data.get("ewma_alpha", 0.2),
            queue_reference=data.get("queue_reference", 1000.0),
            tick_length=data.get("tick_length", 1.0),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad topology definition: {exc}") from exc


def save_topology(topo: ClusterTopology, path: str | Path) -> None:
    Path(path).write_text(json.dumps(topology_to_dict(topo), indent=2) + "\n")


def load_topology(path: str | Path) -> ClusterTopology:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"topology file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"topology file {p} is not valid JSON: {exc}") from exc
    return topology_from_dict(data)


def scale_topology(topo: ClusterTopology, placement: np.ndarray, quota: np.ndarray, priority: np.ndarray) -> ClusterTopology:
    """Topology with a replaced initial configuration (for chromosome rollouts)."""
    return replace(
        topo,
        initial_placement=tuple(tuple(int(v) for v in row) for row in placement),
        initial_quota=tuple(float(q) for q in quota),
        initial_priority=tuple(float(p) for p in priority),
    )
