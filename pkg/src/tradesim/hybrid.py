"""Hybrid GA+RL scheduler: adaptive crossover/mutation rates, elite
preservation, non-dominated pre-filtering, policy-guided elite refinement,
local search and adaptive population sizing over cluster configurations.

Fitness is the weighted cost  w1*T/Tmax + w2*(1-U/Umax) + w3*(1-L/Lmax),
minimized. The adaptive-rate formulas consume quality values (negated cost)
so that better candidates receive the protective low rates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cluster import ClusterSim, ClusterTopology, NoiseSpec, scale_topology
from .errors import ConfigError
from .optim import AdamSpec, adam_init, adam_step
from .workload import WorkloadScenario, generate_tick_counts

INFEASIBLE = float("inf")
QUOTA_FLOOR = 0.01


@dataclass
class Chromosome:
    placement: np.ndarray  # (k, n) instance counts
    quota: np.ndarray  # (k,) per-instance fraction of node CPU
    priority: np.ndarray  # (k,)

    def copy(self) -> "Chromosome":
        return Chromosome(self.placement.copy(), self.quota.copy(), self.priority.copy())

    def genes(self) -> int:
        return self.placement.size + self.quota.size + self.priority.size

    def equals(self, other: "Chromosome") -> bool:
        return (
            np.array_equal(self.placement, other.placement)
            and np.array_equal(self.quota, other.quota)
            and np.array_equal(self.priority, other.priority)
        )


def repair(chromo: Chromosome) -> Chromosome:
    """Enforce invariants in place: >=1 instance per service, quotas in
    (0, 1], priorities in [0, 1], per-node quota commitment <= 1."""
    placement = np.maximum(chromo.placement, 0)
    for s in np.flatnonzero(placement.sum(axis=1) < 1):
        placement[s, int(np.argmin(placement.sum(axis=0)))] = 1
    chromo.placement = placement
    chromo.quota = np.clip(chromo.quota, QUOTA_FLOOR, 1.0)
    chromo.priority = np.clip(chromo.priority, 0.0, 1.0)
    pt = placement.T.astype(float)
    if (pt @ np.full_like(chromo.quota, QUOTA_FLOOR)).max() > 1.0:
        raise ConfigError("cannot satisfy per-node quota budget even at the quota floor")
    for _ in range(64):  # floor clipping can re-violate; iterate to feasibility
        worst = (pt @ chromo.quota).max()
        if worst <= 1.0:
            break
        chromo.quota = np.maximum(chromo.quota / worst, QUOTA_FLOOR)
    else:
        chromo.quota = np.full_like(chromo.quota, QUOTA_FLOOR)
    return chromo


def satisfies_invariants(chromo: Chromosome) -> bool:
    return (
        np.all(chromo.placement >= 0)
        and np.all(chromo.placement.sum(axis=1) >= 1)
        and np.all((chromo.quota > 0) & (chromo.quota <= 1))
        and np.all((chromo.priority >= 0) & (chromo.priority <= 1))
        and (chromo.placement.T.astype(float) @ chromo.quota).max() <= 1.0 + 1e-9
    )


@dataclass(frozen=True)
class FitnessWeights:
    w1: float = 0.4
    w2: float = 0.35
    w3: float = 0.25
    T_max: float = 500.0  # ms normalizer
    U_max: float = 1.0
    L_max: float = 1.0

    def __post_init__(self) -> None:
        if min(self.w1, self.w2, self.w3) < 0:
            raise ConfigError("fitness weights must be >= 0")
        if min(self.T_max, self.U_max, self.L_max) <= 0:
            raise ConfigError("normalizers must be > 0")


def fitness_from_metrics(T: float, U: float, L: float, w: FitnessWeights) -> float:
    """Weighted scheduling cost; lower is better. Non-finite metrics are infeasible."""
    if not (np.isfinite(T) and np.isfinite(U) and np.isfinite(L)):
        return INFEASIBLE
    u = min(U, w.U_max)
    l = min(max(L, 0.0), w.L_max)
    return w.w1 * (T / w.T_max) + w.w2 * (1.0 - u / w.U_max) + w.w3 * (1.0 - l / w.L_max)


def adaptive_rates(f_prime: float, f_avg: float, f_max: float) -> tuple[float, float]:
    """Adaptive crossover/mutation rates on quality values (higher = better).

    P_c = 0.9 - 0.6*(f'-f_avg)/(f_max-f_avg), P_m = 0.1 - 0.07*(same ratio);
    ratio clamps to [0, 1], and a degenerate population (f_max == f_avg)
    keeps the exploratory (0.9, 0.1).
    """
    if f_max < f_avg:
        raise ValueError(f"f_max {f_max} < f_avg {f_avg}")
    if f_max == f_avg:
        return 0.9, 0.1
    ratio = min(max((f_prime - f_avg) / (f_max - f_avg), 0.0), 1.0)
    # scaled integer form keeps the endpoint rate values exact in floats
    return (9.0 - 6.0 * ratio) / 10.0, (10.0 - 7.0 * ratio) / 100.0


@dataclass(frozen=True)
class RefineReward:
    alpha: float = 1.0  # performance gain (fitness improvement)
    beta: float = 0.5  # resource-efficiency gain (utilization increase)
    gamma_cost: float = 0.2  # action-magnitude cost

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma_cost) < 0:
            raise ConfigError("refine-reward coefficients must be >= 0")


def refine_reward(spec: RefineReward, perf_gain: float, efficiency_gain: float, cost: float) -> float:
    return spec.alpha * perf_gain + spec.beta * efficiency_gain - spec.gamma_cost * cost


# --- rollout evaluation --------------------------------------------------------


@dataclass
class RolloutMetrics:
    T: float  # mean completed-request latency, ms
    U: float  # mean node CPU utilization
    L: float  # load-balance degree = 1 - cv(node work)
    final_state: object = None


class RolloutEvaluator:
    """Pure fitness: same scenario slice and seed for every candidate of a
    generation, jitter and observation noise disabled."""

    def __init__(
        self,
        scenario: WorkloadScenario,
        topology: ClusterTopology,
        weights: FitnessWeights,
        eval_ticks: int = 120,
        start_tick: int = 0,
    ):
        self.scenario = scenario
        self.topology = replace(
            topology, latency=replace(topology.latency, jitter_enabled=False)
        )
        self.weights = weights
        self.eval_ticks = eval_ticks
        self.start_tick = start_tick
        self._counts_cache: dict[int, np.ndarray] = {}
        self._memo: dict[tuple, RolloutMetrics] = {}

    def _counts(self, t: int) -> np.ndarray:
        if t not in self._counts_cache:
            tick = min(self.start_tick + t, self.scenario.horizon - 1)
            self._counts_cache[t] = generate_tick_counts(self.scenario, tick)
        return self._counts_cache[t]

    def metrics(self, chromo: Chromosome) -> RolloutMetrics:
        key = (chromo.placement.tobytes(), chromo.quota.tobytes(), chromo.priority.tobytes())
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        out = self._rollout(chromo)
        self._memo[key] = out
        return out

    def _rollout(self, chromo: Chromosome) -> RolloutMetrics:
        topo = scale_topology(self.topology, chromo.placement, chromo.quota, chromo.priority)
        sim = ClusterSim(topo, seed=0, noise=NoiseSpec(std=0.0), latency_sample_cap=1)
        latency_sum = 0.0
        completed = 0
        util_sum = 0.0
        node_work = np.zeros(topo.node_count)
        for t in range(self.eval_ticks):
            state = sim.step_counts(sim.no_op_action(), self._counts(t))
            done = sim.last_throughput * topo.tick_length
            latency_sum += float(np.dot(state.latency_ms, done))
            completed += float(done.sum())
            util_sum += float(sim.util_true[:, 0].mean())
            node_work += sim.util_true[:, 0]
        T = latency_sum / completed if completed else 0.0
        U = util_sum / self.eval_ticks
        mean_work = node_work.mean()
        cv = float(node_work.std() / mean_work) if mean_work > 0 else 0.0
        L = max(0.0, 1.0 - cv)
        return RolloutMetrics(T=T, U=U, L=L, final_state=sim.observe_state())

    def fitness(self, chromo: Chromosome) -> float:
        m = self.metrics(chromo)
        return fitness_from_metrics(m.T, m.U, m.L, self.weights)


# --- GA operators ---------------------------------------------------------------


def random_chromosome(
    rng: np.random.Generator, k: int, n: int, max_instances: int = 3
) -> Chromosome:
    placement = rng.integers(0, max_instances + 1, size=(k, n))
    chromo = Chromosome(
        placement=placement.astype(int),
        quota=rng.uniform(QUOTA_FLOOR, 0.5, size=k),
        priority=rng.uniform(0.0, 1.0, size=k),
    )
    return repair(chromo)


def _tournament_index(fitnesses: np.ndarray, size: int, rng: np.random.Generator) -> int:
    picks = rng.integers(0, len(fitnesses), size=size)
    return int(picks[np.argmin(fitnesses[picks])])


def tournament_select(
    population: list[Chromosome],
    fitnesses: np.ndarray,
    size: int,
    rng: np.random.Generator,
) -> Chromosome:
    """Best of `size` uniform draws (with replacement)."""
    if not population:
        raise ValueError("empty population")
    return population[_tournament_index(np.asarray(fitnesses), size, rng)]


def crossover(
    a: Chromosome, b: Chromosome, p_c: float, rng: np.random.Generator
) -> tuple[Chromosome, Chromosome]:
    """Uniform per-gene crossover with probability p_c, else plain copies."""
    c1, c2 = a.copy(), b.copy()
    if rng.random() < p_c:
        for attr in ("placement", "quota", "priority"):
            ga, gb = getattr(c1, attr), getattr(c2, attr)
            swap = rng.random(ga.shape) < 0.5
            ga[swap], gb[swap] = gb[swap], ga[swap].copy()
    return repair(c1), repair(c2)


def mutate(
    x: Chromosome,
    p_m: float,
    rng: np.random.Generator,
    sigma: float = 0.05,
    max_instances: int | None = None,
) -> Chromosome:
    """Independent per-gene perturbation: placement +-1 (feasible direction,
    honoring the per-cell cap), continuous genes take a Gaussian step of
    scale sigma."""
    out = x.copy()
    flat = out.placement.reshape(-1)
    hit = rng.random(flat.size) < p_m
    if hit.any():
        signs = np.where(rng.random(flat.size) < 0.5, -1, 1)
        k, n = out.placement.shape
        for idx in np.flatnonzero(hit):
            row = idx // n
            step = signs[idx]
            if step < 0 and (flat[idx] == 0 or out.placement[row].sum() <= 1):
                step = 1  # removal infeasible: grow instead
            if step > 0 and max_instances is not None and flat[idx] >= max_instances:
                if flat[idx] > 0 and out.placement[row].sum() > 1:
                    step = -1
                else:
                    continue  # neither direction feasible for this gene
            flat[idx] += step
    for attr in ("quota", "priority"):
        arr = getattr(out, attr)
        hit = rng.random(arr.size) < p_m
        arr[hit] += sigma * rng.standard_normal(int(hit.sum()))
    return repair(out)


def select_top_k(
    population: list[Chromosome], fitnesses: np.ndarray, k: int
) -> list[Chromosome]:
    """k lowest-fitness chromosomes, ties broken by insertion order."""
    if k > len(population):
        raise ValueError(f"k={k} exceeds population size {len(population)}")
    order = np.argsort(fitnesses, kind="stable")
    return [population[int(i)] for i in order[:k]]


def non_dominated_sort(objectives: np.ndarray) -> list[list[int]]:
    """Pareto fronts over rows of (T, -U, -L)-style minimization objectives."""
    obj = np.asarray(objectives, dtype=float)
    if not np.all(np.isfinite(obj)):
        raise ValueError("objectives must be finite")
    n = len(obj)
    dominated_by: list[list[int]] = [[] for _ in range(n)]
    domination_count = np.zeros(n, dtype=int)
    for i in range(n):
        le_i = np.all(obj[i] <= obj, axis=1)
        lt_i = np.any(obj[i] < obj, axis=1)
        dominates = le_i & lt_i  # i dominates j
        for j in np.flatnonzero(dominates):
            dominated_by[i].append(int(j))
        domination_count += dominates
    fronts: list[list[int]] = []
    current = [i for i in range(n) if domination_count[i] == 0]
    while current:
        fronts.append(current)
        nxt: list[int] = []
        for i in current:
            for j in dominated_by[i]:
                domination_count[j] -= 1
                if domination_count[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
    return fronts


def local_search(
    x: Chromosome,
    fitness_fn,
    budget: int,
    rng: np.random.Generator,
    sigma: float = 0.05,
    fitness_x: float | None = None,
    max_instances: int | None = None,
) -> tuple[Chromosome, float]:
    """Hill-climb over single-gene neighbors; never returns a worse solution."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    best = x.copy()
    best_f = fitness_fn(best) if fitness_x is None else fitness_x
    genes = best.genes()
    for step in range(budget):
        cand = best.copy()
        idx = int(rng.integers(genes))
        if idx < cand.placement.size:
            flat = cand.placement.reshape(-1)
            row = idx // cand.placement.shape[1]
            step_dir = -1 if rng.random() < 0.5 else 1
            if step_dir < 0 and (flat[idx] == 0 or cand.placement[row].sum() <= 1):
                step_dir = 1
            if step_dir > 0 and max_instances is not None and flat[idx] >= max_instances:
                if flat[idx] > 0 and cand.placement[row].sum() > 1:
                    step_dir = -1
                else:
                    continue
            flat[idx] += step_dir
        elif idx < cand.placement.size + cand.quota.size:
            cand.quota[idx - cand.placement.size] += sigma * rng.standard_normal()
        else:
            cand.priority[idx - cand.placement.size - cand.quota.size] += (
                sigma * rng.standard_normal()
            )
        repair(cand)
        f = fitness_fn(cand)
        if f < best_f:
            best, best_f = cand, f
    return best, best_f


def adapt_population_size(
    best_history: list[float], n_current: int, n_min: int, n_max: int,
    window: int = 5, stagnation: float = 0.001, fast: float = 0.05,
) -> int:
    """Shrink 25% on stagnation over the window, grow 25% on fast improvement."""
    if len(best_history) < window + 1:
        return n_current
    then = best_history[-window - 1]
    now = best_history[-1]
    improvement = (then - now) / max(abs(then), 1e-12)
    if improvement < stagnation:
        n_new = int(round(n_current * 0.75))
    elif improvement > fast:
        n_new = int(round(n_current * 1.25))
    else:
        n_new = n_current
    return max(n_min, min(n_max, n_new))


# --- RL refinement ---------------------------------------------------------------


def apply_record_to_chromosome(
    record: dict[str, np.ndarray], chromo: Chromosome, step_scale: float = 0.2
) -> tuple[Chromosome, float]:
    """Delta-action on top of a chromosome; returns (refined, action magnitude).

    Instance deltas add/remove instances; the squashed continuous heads pull
    quota/priority toward the emitted values; a migration choice moves one
    instance of the chosen service toward its least-committed node.
    """
    out = chromo.copy()
    delta = record["delta"].astype(int) - 1
    magnitude = float(np.abs(delta).sum())
    for s in np.flatnonzero(delta != 0):
        d = int(delta[s])
        if d > 0:
            out.placement[s, int(np.argmin(out.placement.sum(axis=0)))] += 1
        elif out.placement[s].sum() > 1:
            out.placement[s, int(np.argmax(out.placement[s]))] -= 1

    def squash(u: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-u))

    for name, attr in (("priority", "priority"), ("quota", "quota")):
        target = squash(record[name])
        arr = getattr(out, attr)
        change = step_scale * (target - arr)
        magnitude += float(np.abs(change).sum()) if attr == "quota" else 0.0
        setattr(out, attr, arr + change)

    choice = int(record["migration"][0]) if "migration" in record else 0
    if choice > 0:
        service = int(np.argsort(-out.placement.sum(axis=1), kind="stable")[(choice - 1) % out.placement.shape[0]])
        src = int(np.argmax(out.placement[service]))
        dst = int(np.argmin(out.placement.sum(axis=0)))
        if src != dst and out.placement[service, src] > 0:
            out.placement[service, src] -= 1
            out.placement[service, dst] += 1
            magnitude += 1.0
    return repair(out), magnitude


@dataclass
class RefineStats:
    attempted: int = 0
    improved: int = 0
    discarded_nonfinite: int = 0


def rl_refine(
    elite: list[Chromosome],
    elite_fitness: list[float],
    elite_metrics: list[RolloutMetrics],
    core,
    params,
    adam_state,
    encoder,
    evaluator: RolloutEvaluator,
    reward_spec: RefineReward,
    rng: np.random.Generator,
    learning_rate: float = 1e-3,
) -> tuple[list[Chromosome], list[float], dict, RefineStats]:
    """One policy-guided refinement pass over the elite set.

    Each elite yields one transition (state features, delta-action, reward);
    the policy gets one update per transition; a refined chromosome replaces
    the elite member only when its fitness improved.
    """
    stats = RefineStats()
    spec = AdamSpec(learning_rate=learning_rate)
    refined: list[Chromosome] = []
    refined_fitness: list[float] = []
    for chromo, f_old, m_old in zip(elite, elite_fitness, elite_metrics):
        features = encoder.encode(m_old.final_state)
        record, _ = core.act(params, features, "sample", rng)
        candidate, magnitude = apply_record_to_chromosome(record, chromo)
        stats.attempted += 1
        if candidate.equals(chromo):
            refined.append(chromo)
            refined_fitness.append(f_old)
            continue
        m_new = evaluator.metrics(candidate)
        f_new = fitness_from_metrics(m_new.T, m_new.U, m_new.L, evaluator.weights)
        reward = refine_reward(reward_spec, f_old - f_new, m_new.U - m_old.U, magnitude)
        if not np.isfinite(reward):
            stats.discarded_nonfinite += 1
            refined.append(chromo)
            refined_fitness.append(f_old)
            continue
        # single-transition policy-gradient update: grad of -reward * logp
        logp, cache = core.log_prob(params, features[None], {k: v[None] for k, v in record.items()})
        grads = core.logp_backward(params, cache, np.array([-reward]))
        params = adam_step(params, grads, adam_state, spec)
        if f_new < f_old:
            refined.append(candidate)
            refined_fitness.append(f_new)
            stats.improved += 1
        else:
            refined.append(chromo)
            refined_fitness.append(f_old)
    return refined, refined_fitness, params, stats


# --- the full loop ----------------------------------------------------------------


@dataclass(frozen=True)
class HybridConfig:
    population: int = 24
    elite: int = 4
    max_iter: int = 30
    seed: int = 0
    eval_ticks: int = 120
    tournament: int = 2
    mutation_sigma: float = 0.05
    n_min: int = 8
    n_max: int = 48
    local_search_budget: int = 4
    refine: RefineReward = field(default_factory=RefineReward)
    refine_lr: float = 1e-3
    convergence_eps: float = 1e-4
    convergence_window: int = 10
    max_instances: int = 3
    adapt_population: bool = True
    rl_refinement: bool = True

    def __post_init__(self) -> None:
        if self.elite < 1 or self.elite >= self.population:
            raise ConfigError("need 1 <= elite < population")
        if not self.n_min <= self.population <= self.n_max:
            raise ConfigError("population outside [n_min, n_max]")
        if self.n_min <= self.elite:
            raise ConfigError("n_min must exceed the elite count")


@dataclass
class GenerationTrace:
    generation: int
    best_fitness: float  # best seen so far (monotone)
    gen_best_fitness: float
    mean_fitness: float
    pc_mean: float
    pm_mean: float
    population: int


@dataclass
class HybridResult:
    best: Chromosome
    best_fitness: float
    trace: list[GenerationTrace]
    refine_stats: RefineStats
    converged: bool


def hybrid_scheduling(
    scenario: WorkloadScenario,
    topology: ClusterTopology,
    config: HybridConfig,
    weights: FitnessWeights | None = None,
    seed_chromosome: Chromosome | None = None,
    initial_population: list[Chromosome] | None = None,
    start_tick: int = 0,
    encoder=None,
    core=None,
    policy_params=None,
) -> HybridResult:
    """Full optimization loop: evaluate, adapt rates, preserve+refine elites,
    breed offspring, iterate to convergence or the iteration cap."""
    from .drl.policy import PolicyCore, StateEncoder, cluster_layout

    weights = weights or FitnessWeights()
    k, n = topology.service_count, topology.node_count
    rng = np.random.default_rng([config.seed, 0xA11CE])
    evaluator = RolloutEvaluator(scenario, topology, weights, config.eval_ticks, start_tick)

    if encoder is None:
        encoder = StateEncoder(mode="full", service_count=k, node_count=n)
    if core is None:
        core = PolicyCore(encoder.dim, cluster_layout(k), hidden=(32, 32))
    params = policy_params if policy_params is not None else core.init_params(config.seed)
    adam_state = adam_init(params)

    population: list[Chromosome] = []
    if initial_population is not None:
        population.extend(repair(c.copy()) for c in initial_population[: config.population])
    if seed_chromosome is not None and len(population) < config.population:
        population.append(repair(seed_chromosome.copy()))
    attempts = 0
    while len(population) < config.population:
        cand = random_chromosome(rng, k, n, config.max_instances)
        attempts += 1
        if satisfies_invariants(cand):
            population.append(cand)
        elif attempts > 100 * config.population:
            raise ConfigError("could not build a feasible initial population")

    best: Chromosome | None = None
    best_fitness = INFEASIBLE
    trace: list[GenerationTrace] = []
    refine_totals = RefineStats()
    best_history: list[float] = []
    n_target = config.population
    converged = False

    for generation in range(config.max_iter):
        metrics = [evaluator.metrics(x) for x in population]
        fitnesses = np.array(
            [fitness_from_metrics(m.T, m.U, m.L, weights) for m in metrics]
        )
        gen_best_idx = int(np.argmin(fitnesses))
        if fitnesses[gen_best_idx] < best_fitness:
            best_fitness = float(fitnesses[gen_best_idx])
            best = population[gen_best_idx].copy()
        best_history.append(best_fitness)

        # adaptive rates on quality (negated cost): best candidates protected
        quality = -fitnesses
        finite = np.isfinite(quality)
        q_avg = float(quality[finite].mean()) if finite.any() else 0.0
        q_max = float(quality[finite].max()) if finite.any() else 0.0
        q_max = max(q_max, q_avg)  # mean can exceed max by one ulp when converged

        elite_idx = [int(i) for i in np.argsort(fitnesses, kind="stable")[: config.elite]]
        elite = [population[i] for i in elite_idx]
        elite_fitness = [float(fitnesses[i]) for i in elite_idx]
        elite_metrics = [metrics[i] for i in elite_idx]

        if config.rl_refinement:
            elite, elite_fitness, params, stats = rl_refine(
                elite, elite_fitness, elite_metrics, core, params, adam_state,
                encoder, evaluator, config.refine, rng, config.refine_lr,
            )
            refine_totals.attempted += stats.attempted
            refine_totals.improved += stats.improved
            refine_totals.discarded_nonfinite += stats.discarded_nonfinite

        if config.local_search_budget > 0:
            elite0, f0 = local_search(
                elite[0], evaluator.fitness, config.local_search_budget,
                rng, config.mutation_sigma, fitness_x=elite_fitness[0],
                max_instances=config.max_instances,
            )
            elite[0], elite_fitness[0] = elite0, f0

        if elite_fitness[0] < best_fitness:
            best_fitness = float(elite_fitness[0])
            best = elite[0].copy()
            best_history[-1] = best_fitness

        # non-dominated pre-filter of the mating pool
        objectives = np.array([[m.T, -m.U, -m.L] for m in metrics])
        fronts = non_dominated_sort(objectives)
        pool_idx: list[int] = []
        for front in fronts:
            pool_idx.extend(front)
            if len(pool_idx) >= max(len(population) // 2, 2 * config.elite):
                break
        pool = [population[i] for i in pool_idx]
        pool_fitness = fitnesses[pool_idx]

        if config.adapt_population:
            n_target = adapt_population_size(
                best_history, n_target, config.n_min, config.n_max
            )

        offspring: list[Chromosome] = []
        pc_values: list[float] = []
        pm_values: list[float] = []
        while len(offspring) < n_target - config.elite:
            ia = _tournament_index(pool_fitness, config.tournament, rng)
            ib = _tournament_index(pool_fitness, config.tournament, rng)
            pa, pb = pool[ia], pool[ib]
            q_prime = float(-min(pool_fitness[ia], pool_fitness[ib]))
            p_c, p_m = adaptive_rates(q_prime, q_avg, q_max)
            pc_values.append(p_c)
            pm_values.append(p_m)
            c1, c2 = crossover(pa, pb, p_c, rng)
            offspring.append(mutate(c1, p_m, rng, config.mutation_sigma, config.max_instances))
            if len(offspring) < n_target - config.elite:
                offspring.append(mutate(c2, p_m, rng, config.mutation_sigma, config.max_instances))

        population = [e.copy() for e in elite] + offspring
        trace.append(
            GenerationTrace(
                generation=generation,
                best_fitness=best_fitness,
                gen_best_fitness=float(fitnesses[gen_best_idx]),
                mean_fitness=float(fitnesses[np.isfinite(fitnesses)].mean())
                if np.isfinite(fitnesses).any()
                else INFEASIBLE,
                pc_mean=float(np.mean(pc_values)) if pc_values else 0.9,
                pm_mean=float(np.mean(pm_values)) if pm_values else 0.1,
                population=len(population),
            )
        )

        w = config.convergence_window
        if len(best_history) > w and best_history[-w - 1] - best_history[-1] < config.convergence_eps:
            converged = True
            break

    assert best is not None
    return HybridResult(best, best_fitness, trace, refine_totals, converged)


def trace_to_csv(trace: list[GenerationTrace], path) -> None:
    from pathlib import Path

    lines = ["generation,best_fitness,mean_fitness,P_c_mean,P_m_mean,N"]
    lines += [
        f"{t.generation},{t.best_fitness!r},{t.mean_fitness!r},{t.pc_mean!r},{t.pm_mean!r},{t.population}"
        for t in trace
    ]
    Path(path).write_text("\n".join(lines) + "\n")
