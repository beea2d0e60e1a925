"""Training environments: the cluster decision-interval wrapper and a tiny
contextual bandit used to sanity-check the optimizer end to end."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..cluster import ClusterSim, ClusterTopology, NoiseSpec, RewardSpec
from ..workload import WorkloadScenario, generate_tick_counts
from .policy import SchedulerPolicy, StateEncoder


@dataclass
class DecisionEnv:
    """One env step = one scheduling decision applied to the simulator, then
    `decision_interval` simulated ticks of the scenario workload."""

    scenario: WorkloadScenario
    topology: ClusterTopology
    encoder: StateEncoder
    mapper: SchedulerPolicy  # supplies record -> SchedulingAction mapping
    decision_interval: int = 10
    reward_spec: RewardSpec = field(default_factory=RewardSpec)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(std=0.0))
    episode_seed_base: int = 0

    sim: ClusterSim | None = None
    _state = None
    _tick: int = 0

    def reset(self, episode: int = 0) -> np.ndarray:
        self.sim = ClusterSim(
            self.topology,
            seed=int(self.episode_seed_base + episode),
            noise=self.noise,
            reward_spec=self.reward_spec,
        )
        self._tick = 0
        self._state = self.sim.observe_state()
        return self.encoder.encode(self._state)

    def step(self, record: dict[str, np.ndarray]):
        assert self.sim is not None, "call reset() first"
        action = self.mapper.to_scheduling_action(record, self._state)
        for i in range(self.decision_interval):
            if self._tick >= self.scenario.horizon:
                break
            counts = generate_tick_counts(self.scenario, self._tick)
            self._state = self.sim.step_counts(action if i == 0 else self.sim.no_op_action(), counts)
            self._tick += 1
        reward = float(np.mean(self.sim.reward_trace[-self.decision_interval :]))
        done = self._tick >= self.scenario.horizon
        return self.encoder.encode(self._state), reward, done, {}


class ContextualBandit:
    """Two contexts, two arms; arm == context index pays 1. Known optimum:
    expected reward 1.0 under the greedy optimal policy."""

    def __init__(self, seed: int = 0, steps_per_episode: int = 16):
        self.seed = seed
        self.steps_per_episode = steps_per_episode
        self._rng = np.random.default_rng(seed)
        self._episode = 0
        self._step = 0
        self._context = 0

    def _draw_context(self) -> np.ndarray:
        self._context = int(self._rng.integers(2))
        onehot = np.zeros(2)
        onehot[self._context] = 1.0
        return onehot

    def reset(self, episode: int = 0) -> np.ndarray:
        self._episode = episode
        self._rng = np.random.default_rng([self.seed, episode])
        self._step = 0
        return self._draw_context()

    def step(self, record: dict[str, np.ndarray]):
        arm = int(np.asarray(record["arm"]).reshape(-1)[0])
        reward = 1.0 if arm == self._context else 0.0
        self._step += 1
        done = self._step >= self.steps_per_episode
        return self._draw_context(), reward, done, {}

    def optimal_rate(self, core, params, trials: int = 400) -> float:
        """Fraction of contexts where the greedy arm is optimal."""
        hits = 0
        for i in range(trials):
            ctx = i % 2
            onehot = np.zeros(2)
            onehot[ctx] = 1.0
            record, _ = core.act(params, onehot, "greedy")
            hits += int(record["arm"][0]) == ctx
        return hits / trials
