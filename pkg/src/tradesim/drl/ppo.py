"""Clipped policy-ratio training loop with generalized advantage estimation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DivergenceError
from ..optim import AdamSpec, adam_init, adam_step, clip_global_norm
from .nets import Params
from .policy import PolicyCore, _stack_records


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    learning_rate: float = 3e-4
    epochs: int = 4
    minibatch: int = 64
    episode_length: int = 32
    total_episodes: int = 100
    update_horizon: int = 128  # buffered steps per policy update
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("discount factor must lie in (0, 1)")
        if self.clip_eps <= 0.0:
            raise ConfigError("clip epsilon must be positive")


@dataclass
class Trajectory:
    """Parallel transition arrays; records are per-step action dicts."""

    features: list[np.ndarray] = field(default_factory=list)
    records: list[dict[str, np.ndarray]] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    dones: list[bool] = field(default_factory=list)
    next_value: float = 0.0
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def append(self, features, record, log_prob, reward, value, done) -> None:
        self.features.append(np.asarray(features, dtype=float))
        self.records.append(record)
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.dones.append(bool(done))


def compute_returns_and_advantages(
    traj: Trajectory, gamma: float, gae_lambda: float = 0.95, normalize: bool = True
) -> Trajectory:
    """Discounted returns plus GAE advantages (normalized per batch)."""
    T = len(traj)
    if T == 0:
        raise ValueError("empty trajectory")
    rewards = np.asarray(traj.rewards)
    values = np.asarray(traj.values)
    dones = np.asarray(traj.dones, dtype=bool)
    next_values = np.append(values[1:], traj.next_value)
    next_values[dones] = 0.0

    returns = np.empty(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        if dones[t]:
            acc = 0.0
        acc = rewards[t] + gamma * acc
        returns[t] = acc

    advantages = np.empty(T)
    gae = 0.0
    for t in range(T - 1, -1, -1):
        if dones[t]:
            gae = 0.0
        delta = rewards[t] + gamma * next_values[t] - values[t]
        gae = delta + gamma * gae_lambda * (0.0 if dones[t] else gae)
        advantages[t] = gae

    if normalize:
        std = advantages.std()
        advantages = (advantages - advantages.mean()) / (std if std > 1e-12 else 1.0)
    traj.returns = returns
    traj.advantages = advantages
    return traj


def ppo_loss(
    core: PolicyCore,
    params: Params,
    batch_features: np.ndarray,
    batch_records: dict[str, np.ndarray],
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    clip_eps: float,
) -> tuple[float, Params, dict]:
    """Negated clipped surrogate objective and its exact gradients.

    Gradient flows only through transitions whose unclipped branch is active
    (the clipped branch is constant in the parameters). Non-finite ratios are
    excluded and counted.
    """
    new_logp, cache = core.log_prob(params, batch_features, batch_records)
    ratio = np.exp(new_logp - old_log_probs)
    finite = np.isfinite(ratio)
    excluded = int(np.sum(~finite))
    ratio = np.where(finite, ratio, 1.0)
    adv = np.where(finite, advantages, 0.0)

    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surr1 = ratio * adv
    surr2 = clipped * adv
    objective = np.minimum(surr1, surr2)
    n = max(int(np.sum(finite)), 1)
    loss = -float(objective[finite].sum() / n)

    # d(-mean min)/d logp: advantage * ratio where the raw branch is the min
    active = (surr1 <= surr2) & finite
    coef = np.where(active, -adv * ratio / n, 0.0)
    grads = core.logp_backward(params, cache, coef)
    stats = {
        "clip_fraction": float(np.mean((np.abs(ratio - 1.0) > clip_eps)[finite])) if n else 0.0,
        "excluded": excluded,
        "objective": -loss,
    }
    return loss, grads, stats


def value_loss_and_gradients(
    core: PolicyCore, params: Params, batch_features: np.ndarray, returns: np.ndarray
) -> tuple[float, Params]:
    v, cache = core.value(params, batch_features)
    err = v - returns
    loss = float(np.mean(err**2))
    grads = core.value_backward(params, cache, 2.0 * err / len(err))
    return loss, grads


@dataclass
class PPOTrainer:
    """Collect-update loop; the environment contract is reset/step/seed-free
    deterministic behavior given the config seed."""

    core: PolicyCore
    config: TrainConfig

    def train(self, env, params: Params | None = None) -> tuple[Params, list[dict]]:
        """Collect episodes into an update buffer; run clipped-objective epochs
        whenever the buffer reaches `update_horizon` steps. Episode ends are
        treated as terminal for return computation."""
        cfg = self.config
        params = params if params is not None else self.core.init_params(cfg.seed)
        adam = adam_init(params)
        adam_spec = AdamSpec(learning_rate=cfg.learning_rate)
        rng = np.random.default_rng([cfg.seed, 7_777])
        curve: list[dict] = []
        buffer = Trajectory()
        last = {"loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0}

        for episode in range(cfg.total_episodes):
            obs = env.reset(episode)
            episode_rewards: list[float] = []
            for _ in range(cfg.episode_length):
                record, logp = self.core.act(params, obs, "sample", rng)
                value, _ = self.core.value(params, obs)
                nxt, reward, done, _ = env.step(record)
                buffer.append(obs, record, logp, reward, float(value[0]), done)
                episode_rewards.append(reward)
                obs = nxt
                if done:
                    break
            buffer.dones[-1] = True  # truncation counts as terminal here

            if len(buffer) >= cfg.update_horizon and cfg.learning_rate > 0.0:
                last = self._update(params, adam, adam_spec, buffer, rng, episode)
                params = last.pop("params")
                buffer = Trajectory()
            curve.append(
                {
                    "episode": episode,
                    "mean_reward": float(np.mean(episode_rewards)),
                    "loss": last.get("loss", 0.0),
                    "value_loss": last.get("value_loss", 0.0),
                    "clip_fraction": last.get("clip_fraction", 0.0),
                }
            )
        return params, curve

    def _update(self, params, adam, adam_spec, buffer: Trajectory, rng, episode: int) -> dict:
        cfg = self.config
        compute_returns_and_advantages(buffer, cfg.gamma, cfg.gae_lambda)
        feats = np.stack(buffer.features)
        records = _stack_records(buffer.records)
        old_logp = np.asarray(buffer.log_probs)
        adv = buffer.advantages
        rets = buffer.returns
        T = len(buffer)
        stats = {"loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0}
        for _ in range(cfg.epochs):
            order = rng.permutation(T)
            for start in range(0, T, cfg.minibatch):
                idx = order[start : start + cfg.minibatch]
                sub_records = {k: v[idx] for k, v in records.items()}
                loss, pgrads, pstats = ppo_loss(
                    self.core, params, feats[idx], sub_records,
                    old_logp[idx], adv[idx], cfg.clip_eps,
                )
                vloss, vgrads = value_loss_and_gradients(self.core, params, feats[idx], rets[idx])
                if not np.isfinite(loss) or not np.isfinite(vloss):
                    raise DivergenceError(f"non-finite loss at episode {episode}: {loss}, {vloss}")
                total = {k: pgrads[k] + cfg.value_coef * vgrads[k] for k in params}
                clip_global_norm(total, cfg.max_grad_norm)
                params = adam_step(params, total, adam, adam_spec)
                stats = {
                    "loss": loss,
                    "value_loss": vloss,
                    "clip_fraction": pstats["clip_fraction"],
                }
        stats["params"] = params
        return stats


def train_scheduler(env, core: PolicyCore, config: TrainConfig) -> tuple[Params, list[dict]]:
    return PPOTrainer(core, config).train(env)
