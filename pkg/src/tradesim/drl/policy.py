"""Composite stochastic policy over the scheduling action space.

One shared tanh trunk feeds:
  - a multi-categorical head for per-service instance deltas {-1, 0, +1},
  - squashed-Gaussian heads for priorities and quotas in [0, 1],
  - a dueling head (state value V plus mean-centered advantages A) whose
    Q-values act as logits for the discrete migration choice; V doubles as
    the critic used for advantage estimation.

All gradients are analytic; the test suite checks them against central
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..cluster import SchedulingAction, SystemState, encode_compact_state
from .nets import (
    Params,
    linear_backward,
    linear_forward,
    linear_init,
    mlp_backward,
    mlp_forward,
    mlp_init,
    zeros_like_params,
)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CategoricalHead:
    name: str
    rows: int  # independent categoricals
    n: int  # choices per row


@dataclass(frozen=True)
class GaussianHead:
    name: str
    n: int  # independent squashed gaussians -> values in (0, 1)


@dataclass(frozen=True)
class DuelingHead:
    name: str
    n: int  # discrete choices; logits are Q = V + (A - mean A)


Head = CategoricalHead | GaussianHead | DuelingHead


@dataclass(frozen=True)
class ActionLayout:
    heads: tuple[Head, ...]

    def dueling(self) -> DuelingHead | None:
        for h in self.heads:
            if isinstance(h, DuelingHead):
                return h
        return None


def dueling_combine(v: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Q = V + (A - mean_a A); mean-centering keeps the split identifiable."""
    return v + a - a.mean(axis=-1, keepdims=True)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row; probs (..., n) -> integer indices (...)."""
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    return np.minimum((cum < u).sum(axis=-1), probs.shape[-1] - 1)


class PolicyCore:
    """Trunk + heads over a fixed feature width; parameters in a flat dict."""

    def __init__(self, feature_dim: int, layout: ActionLayout, hidden: tuple[int, ...] = (64, 64)):
        self.feature_dim = feature_dim
        self.layout = layout
        self.hidden = hidden
        self.trunk_sizes = (feature_dim, *hidden)
        self.depth = len(hidden)

    # -- parameters --------------------------------------------------------

    def init_params(self, seed: int = 0) -> Params:
        rng = np.random.default_rng(seed)
        params = mlp_init(rng, "trunk", self.trunk_sizes)
        top = self.hidden[-1]
        for head in self.layout.heads:
            if isinstance(head, CategoricalHead):
                params.update(linear_init(rng, f"{head.name}.logits", top, head.rows * head.n))
            elif isinstance(head, GaussianHead):
                params.update(linear_init(rng, f"{head.name}.mean", top, head.n))
                params[f"{head.name}.log_std"] = np.full(head.n, -0.5)
            else:
                params.update(linear_init(rng, f"{head.name}.V", top, 1))
                params.update(linear_init(rng, f"{head.name}.A", top, head.n))
        if self.layout.dueling() is None:
            params.update(linear_init(rng, "value", top, 1))
        return params

    # -- distributions -----------------------------------------------------

    def _trunk(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, list]:
        return mlp_forward(params, "trunk", self.depth, x)

    def head_distributions(self, params: Params, x: np.ndarray) -> dict[str, dict]:
        """Per-head distribution parameters for a feature batch (B, F)."""
        z, _ = self._trunk(params, x)
        dists: dict[str, dict] = {}
        for head in self.layout.heads:
            if isinstance(head, CategoricalHead):
                logits = linear_forward(params, f"{head.name}.logits", z)
                logits = logits.reshape(len(x), head.rows, head.n)
                dists[head.name] = {"probs": _softmax(logits)}
            elif isinstance(head, GaussianHead):
                mean = linear_forward(params, f"{head.name}.mean", z)
                std = np.exp(params[f"{head.name}.log_std"])
                dists[head.name] = {"mean": mean, "std": np.broadcast_to(std, mean.shape)}
            else:
                v = linear_forward(params, f"{head.name}.V", z)
                a = linear_forward(params, f"{head.name}.A", z)
                q = dueling_combine(v, a)
                dists[head.name] = {"q": q, "probs": _softmax(q), "v": v[:, 0]}
        return dists

    def dueling_q(self, params: Params, x: np.ndarray) -> np.ndarray:
        head = self.layout.dueling()
        if head is None:
            raise ValueError("layout has no dueling head")
        x = np.atleast_2d(x)
        return self.head_distributions(params, x)[head.name]["q"]

    # -- acting ------------------------------------------------------------

    def act(
        self, params: Params, features: np.ndarray, mode: str = "sample",
        rng: np.random.Generator | None = None,
    ) -> tuple[dict[str, np.ndarray], float]:
        """Draw (or take the mode of) one composite action; returns the action
        record and its joint log-probability."""
        if mode not in ("sample", "greedy"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "sample" and rng is None:
            raise ValueError("sampling requires a generator")
        x = np.atleast_2d(np.asarray(features, dtype=float))
        dists = self.head_distributions(params, x)
        record: dict[str, np.ndarray] = {}
        for head in self.layout.heads:
            d = dists[head.name]
            if isinstance(head, GaussianHead):
                if mode == "greedy":
                    u = d["mean"][0]
                else:
                    u = d["mean"][0] + d["std"][0] * rng.standard_normal(head.n)
                record[head.name] = u
            else:
                probs = d["probs"][0]
                if mode == "greedy":
                    choice = np.argmax(probs, axis=-1)
                else:
                    choice = _sample_rows(probs, rng)
                record[head.name] = np.atleast_1d(choice).astype(int)
        logp, _ = self.log_prob(params, x, _stack_records([record]))
        return record, float(logp[0])

    def log_prob(
        self, params: Params, x: np.ndarray, records: dict[str, np.ndarray]
    ) -> tuple[np.ndarray, dict]:
        """Joint log-probability of stored actions under `params`; cache feeds
        `logp_backward`."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        B = len(x)
        z, trunk_cache = self._trunk(params, x)
        logp = np.zeros(B)
        cache: dict = {"x": x, "z": z, "trunk": trunk_cache, "heads": {}}
        for head in self.layout.heads:
            if isinstance(head, CategoricalHead):
                logits = linear_forward(params, f"{head.name}.logits", z)
                logits = logits.reshape(B, head.rows, head.n)
                probs = _softmax(logits)
                acts = records[head.name].reshape(B, head.rows)
                rows = np.arange(head.rows)
                p_sel = probs[np.arange(B)[:, None], rows[None, :], acts]
                logp += np.log(np.maximum(p_sel, 1e-300)).sum(axis=1)
                cache["heads"][head.name] = {"probs": probs, "acts": acts}
            elif isinstance(head, GaussianHead):
                mean = linear_forward(params, f"{head.name}.mean", z)
                log_std = params[f"{head.name}.log_std"]
                std = np.exp(log_std)
                u = records[head.name].reshape(B, head.n)
                a = _sigmoid(u)
                resid = (u - mean) / std
                logp += (
                    -log_std[None, :]
                    - 0.5 * LOG_2PI
                    - 0.5 * resid**2
                    - np.log(np.maximum(a * (1.0 - a), 1e-300))
                ).sum(axis=1)
                cache["heads"][head.name] = {"mean": mean, "std": std, "u": u}
            else:
                v = linear_forward(params, f"{head.name}.V", z)
                a_stream = linear_forward(params, f"{head.name}.A", z)
                q = dueling_combine(v, a_stream)
                probs = _softmax(q)
                acts = records[head.name].reshape(B)
                logp += np.log(np.maximum(probs[np.arange(B), acts], 1e-300))
                cache["heads"][head.name] = {"probs": probs, "acts": acts}
        return logp, cache

    def logp_backward(self, params: Params, cache: dict, coef: np.ndarray) -> Params:
        """Gradient of sum_b coef_b * logp_b with respect to every parameter."""
        grads = zeros_like_params(params)
        x, z = cache["x"], cache["z"]
        B = len(x)
        dz = np.zeros_like(z)
        for head in self.layout.heads:
            hc = cache["heads"][head.name]
            if isinstance(head, CategoricalHead):
                probs, acts = hc["probs"], hc["acts"]
                dlogits = -probs * coef[:, None, None]
                rows = np.arange(head.rows)
                dlogits[np.arange(B)[:, None], rows[None, :], acts] += coef[:, None]
                dz += linear_backward(
                    params, f"{head.name}.logits", z, dlogits.reshape(B, -1), grads
                )
            elif isinstance(head, GaussianHead):
                mean, std, u = hc["mean"], hc["std"], hc["u"]
                resid = (u - mean) / std
                dmean = coef[:, None] * resid / std
                grads[f"{head.name}.log_std"] += (coef[:, None] * (resid**2 - 1.0)).sum(axis=0)
                dz += linear_backward(params, f"{head.name}.mean", z, dmean, grads)
            else:
                probs, acts = hc["probs"], hc["acts"]
                dq = -probs * coef[:, None]
                dq[np.arange(B), acts] += coef
                dv = dq.sum(axis=1, keepdims=True)
                da = dq - dq.mean(axis=1, keepdims=True)
                dz += linear_backward(params, f"{head.name}.V", z, dv, grads)
                dz += linear_backward(params, f"{head.name}.A", z, da, grads)
        mlp_backward(params, "trunk", cache["trunk"], dz, grads)
        return grads

    # -- critic --------------------------------------------------------------

    def value(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, dict]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z, trunk_cache = self._trunk(params, x)
        head = self.layout.dueling()
        name = f"{head.name}.V" if head is not None else "value"
        v = linear_forward(params, name, z)[:, 0]
        return v, {"x": x, "z": z, "trunk": trunk_cache, "head": name}

    def value_backward(self, params: Params, cache: dict, dv: np.ndarray) -> Params:
        grads = zeros_like_params(params)
        dz = linear_backward(params, cache["head"], cache["z"], dv[:, None], grads)
        mlp_backward(params, "trunk", cache["trunk"], dz, grads)
        return grads


def dueling_q(params: Params, core: PolicyCore, features: np.ndarray) -> np.ndarray:
    return core.dueling_q(params, features)


# --- state encoding -------------------------------------------------------------


@dataclass(frozen=True)
class StateEncoder:
    """Fixed-length normalized observation vector: either the full state
    blocks (loads, utilization matrix, queues, history, performance) or the
    compact (C, M, N, L) projection."""

    mode: str = "full"  # "full" | "compact"
    service_count: int = 8
    node_count: int = 4
    load_ref: float = 500.0  # requests/tick/service scale
    queue_ref: float = 1000.0
    latency_ref: float = 200.0  # ms
    throughput_ref: float = 500.0
    clip: float = 5.0

    @property
    def dim(self) -> int:
        if self.mode == "compact":
            return 4
        k, n = self.service_count, self.node_count
        return k + 3 * n + k + 2 * k + 2 * k

    def encode(self, state: SystemState) -> np.ndarray:
        if self.mode == "compact":
            vec = encode_compact_state(state, self.queue_ref)
        else:
            vec = np.concatenate(
                [
                    state.load / self.load_ref,
                    state.util.reshape(-1),
                    state.queue_len / self.queue_ref,
                    state.hist_mean / self.load_ref,
                    state.hist_var / (self.load_ref**2),
                    state.latency_ms / self.latency_ref,
                    state.throughput / self.throughput_ref,
                ]
            )
        if vec.shape[0] != self.dim:
            raise ValueError(f"state dimensions {vec.shape[0]} != encoder dim {self.dim}")
        return np.clip(vec, -self.clip, self.clip)


# --- cluster-facing adapter -----------------------------------------------------


def cluster_layout(service_count: int, migration_choices: int = 5) -> ActionLayout:
    return ActionLayout(
        heads=(
            CategoricalHead("delta", rows=service_count, n=3),
            GaussianHead("priority", n=service_count),
            GaussianHead("quota", n=service_count),
            DuelingHead("migration", n=migration_choices),
        )
    )


@dataclass
class SchedulerPolicy:
    """PolicyCore plus the mapping between action records and SchedulingActions."""

    core: PolicyCore
    encoder: StateEncoder
    params: Params = field(default_factory=dict)

    @classmethod
    def build(cls, encoder: StateEncoder, seed: int = 0, hidden: tuple[int, ...] = (64, 64),
              migration_choices: int = 5) -> "SchedulerPolicy":
        core = PolicyCore(encoder.dim, cluster_layout(encoder.service_count, migration_choices), hidden)
        return cls(core=core, encoder=encoder, params=core.init_params(seed))

    def migration_shortlist(self, state: SystemState) -> list[tuple[int, int]]:
        """(service, destination-node) pairs: busiest services by queue+load
        toward the least CPU-loaded node."""
        order = np.argsort(-(state.queue_len + state.load), kind="stable")
        dest = int(np.argmin(state.util[:, 0]))
        n_pairs = self.core.layout.dueling().n - 1
        return [(int(order[i % len(order)]), dest) for i in range(n_pairs)]

    def to_scheduling_action(self, record: dict[str, np.ndarray], state: SystemState) -> SchedulingAction:
        k = self.encoder.service_count
        n = self.encoder.node_count
        migration = np.zeros((k, n), dtype=int)
        choice = int(record["migration"][0])
        if choice > 0:
            service, dest = self.migration_shortlist(state)[choice - 1]
            migration[service, dest] = 1
        return SchedulingAction(
            instance_delta=record["delta"].astype(int) - 1,
            migration=migration,
            priority=_sigmoid(record["priority"]),
            quota=_sigmoid(record["quota"]),
        )

    def act(
        self, state: SystemState, mode: str = "sample", rng: np.random.Generator | None = None
    ) -> tuple[SchedulingAction, float, dict[str, np.ndarray]]:
        features = self.encoder.encode(state)
        record, logp = self.core.act(self.params, features, mode, rng)
        return self.to_scheduling_action(record, state), logp, record


def _stack_records(records: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {name: np.stack([r[name] for r in records]) for name in records[0]}


# --- checkpointing ---------------------------------------------------------------


def save_policy(policy: SchedulerPolicy, path) -> None:
    import json

    meta = {
        "encoder": {
            "mode": policy.encoder.mode,
            "service_count": policy.encoder.service_count,
            "node_count": policy.encoder.node_count,
            "load_ref": policy.encoder.load_ref,
            "queue_ref": policy.encoder.queue_ref,
            "latency_ref": policy.encoder.latency_ref,
            "throughput_ref": policy.encoder.throughput_ref,
            "clip": policy.encoder.clip,
        },
        "hidden": list(policy.core.hidden),
        "migration_choices": policy.core.layout.dueling().n,
    }
    np.savez(
        path,
        __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        **policy.params,
    )


def load_policy(path) -> SchedulerPolicy:
    import json
    from pathlib import Path

    from ..errors import ConfigError

    p = Path(path)
    if not p.exists():
        raise ConfigError(f"policy checkpoint not found: {p}")
    data = np.load(p)
    meta = json.loads(bytes(data["__meta__"]).decode())
    encoder = StateEncoder(**meta["encoder"])
    core = PolicyCore(
        encoder.dim,
        cluster_layout(meta["encoder"]["service_count"], meta["migration_choices"]),
        tuple(meta["hidden"]),
    )
    params = {k: data[k] for k in data.files if k != "__meta__"}
    return SchedulerPolicy(core=core, encoder=encoder, params=params)
