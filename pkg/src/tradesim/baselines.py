"""Reference schedulers the hybrid approach is benchmarked against, plus the
adapter that turns an optimized chromosome into scheduling actions."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cluster import ClusterSim, SchedulingAction
from .errors import ConfigError
from .hybrid import Chromosome, HybridConfig, hybrid_scheduling


def no_op_action(sim: ClusterSim) -> SchedulingAction:
    return sim.no_op_action()


class RoundRobinScheduler:
    """Static baseline: the initial round-robin placement, never adjusted."""

    name = "round-robin"

    def decide(self, sim: ClusterSim, service_rho: np.ndarray, tick: int) -> SchedulingAction:
        return no_op_action(sim)


class RandomScheduler:
    """Uniformly random valid action each decision; the sanity-floor baseline."""

    name = "random"

    def __init__(self, seed: int = 0, delta_span: int = 1):
        self._rng = np.random.default_rng([seed, 0xDEAD])
        self.delta_span = delta_span

    def decide(self, sim: ClusterSim, service_rho: np.ndarray, tick: int) -> SchedulingAction:
        k, n = sim.k, sim.n
        migration = np.zeros((k, n), dtype=int)
        if self._rng.random() < 0.3:
            migration[int(self._rng.integers(k)), int(self._rng.integers(n))] = 1
        return SchedulingAction(
            instance_delta=self._rng.integers(-self.delta_span, self.delta_span + 1, size=k),
            migration=migration,
            priority=self._rng.random(k),
            quota=np.clip(sim.quota + self._rng.normal(0, 0.05, size=k), 0.01, 1.0),
        )


@dataclass
class ThresholdAutoscaler:
    """Reactive scaling: +1 instance above the high-water mark, -1 below the
    low-water mark, per service, honoring a cooldown."""

    scale_up_at: float = 0.8
    scale_down_at: float = 0.3
    cooldown_ticks: int = 30
    name: str = "threshold-autoscaler"
    _last_action_tick: dict[int, int] = field(default_factory=dict)

    def decide(self, sim: ClusterSim, service_rho: np.ndarray, tick: int) -> SchedulingAction:
        k = sim.k
        delta = np.zeros(k, dtype=int)
        for s in range(k):
            last = self._last_action_tick.get(s)
            if last is not None and tick - last < self.cooldown_ticks:
                continue
            if service_rho[s] > self.scale_up_at:
                delta[s] = 1
                self._last_action_tick[s] = tick
            elif service_rho[s] < self.scale_down_at and sim.placement[s].sum() > 1:
                delta[s] = -1
                self._last_action_tick[s] = tick
        return SchedulingAction(
            instance_delta=delta,
            migration=np.zeros((k, sim.n), dtype=int),
            priority=sim.priority.copy(),
            quota=sim.quota.copy(),
        )


def action_from_chromosome(sim: ClusterSim, target: Chromosome) -> SchedulingAction:
    """One decision step toward the target configuration: instance-count
    deltas, one migration per service toward under-filled nodes, and the
    target quotas/priorities."""
    k, n = sim.k, sim.n
    delta = target.placement.sum(axis=1) - sim.placement.sum(axis=1)
    migration = np.zeros((k, n), dtype=int)
    diff = target.placement - sim.placement
    for s in range(k):
        gain_nodes = np.flatnonzero(diff[s] > 0)
        loss_nodes = np.flatnonzero(diff[s] < 0)
        if gain_nodes.size and loss_nodes.size:
            migration[s, int(gain_nodes[0])] = 1
    return SchedulingAction(
        instance_delta=delta.astype(int),
        migration=migration,
        priority=target.priority.copy(),
        quota=target.quota.copy(),
    )


@dataclass
class HybridScheduler:
    """Re-plans with a short GA+RL burst each decision, warm-started from the
    cluster's current configuration."""

    scenario: object
    topology: object
    config: HybridConfig
    name: str = "hybrid"
    _plan: Chromosome | None = None
    _decision: int = 0

    def decide(self, sim: ClusterSim, service_rho: np.ndarray, tick: int) -> SchedulingAction:
        current = Chromosome(
            placement=sim.placement.copy(),
            quota=sim.quota.copy(),
            priority=sim.priority.copy(),
        )
        run_config = replace(self.config, seed=self.config.seed + self._decision)
        result = hybrid_scheduling(
            self.scenario,
            self.topology,
            run_config,
            seed_chromosome=current,
            start_tick=tick,
        )
        self._plan = result.best
        self._decision += 1
        return action_from_chromosome(sim, result.best)


@dataclass
class DrlScheduler:
    """Greedy trained policy; sampling mode is for continued exploration."""

    policy: object  # SchedulerPolicy
    mode: str = "greedy"
    seed: int = 0
    name: str = "drl"

    def __post_init__(self):
        self._rng = np.random.default_rng([self.seed, 0xD71])

    def decide(self, sim: ClusterSim, service_rho: np.ndarray, tick: int) -> SchedulingAction:
        action, _, _ = self.policy.act(sim.observe_state(), self.mode, self._rng)
        return action


def make_scheduler(kind: str, *, seed: int, scenario, topology, options: dict):
    """Factory for the CLI's scheduler kinds."""
    if kind == "round-robin":
        return RoundRobinScheduler()
    if kind == "random":
        return RandomScheduler(seed=seed, delta_span=int(options.get("delta_span", 1)))
    if kind == "threshold-autoscaler":
        return ThresholdAutoscaler(
            scale_up_at=float(options.get("scale_up_at", 0.8)),
            scale_down_at=float(options.get("scale_down_at", 0.3)),
            cooldown_ticks=int(options.get("cooldown_ticks", 30)),
        )
    if kind == "hybrid":
        config = HybridConfig(
            population=int(options.get("population", 10)),
            elite=int(options.get("elite", 2)),
            max_iter=int(options.get("max_iter", 4)),
            seed=seed,
            eval_ticks=int(options.get("eval_ticks", 30)),
            n_min=int(options.get("n_min", 8)),
            n_max=int(options.get("n_max", 16)),
            local_search_budget=int(options.get("local_search_budget", 2)),
            convergence_window=int(options.get("convergence_window", 3)),
            max_instances=int(options.get("max_instances", 3)),
        )
        return HybridScheduler(scenario=scenario, topology=topology, config=config)
    if kind == "drl":
        from .drl.policy import load_policy

        checkpoint = options.get("checkpoint")
        if not checkpoint:
            raise ConfigError("drl scheduler needs a trained checkpoint path")
        return DrlScheduler(policy=load_policy(checkpoint), seed=seed)
    raise ConfigError(f"unknown scheduler kind {kind!r}")
