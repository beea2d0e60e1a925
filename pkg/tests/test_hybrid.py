from __future__ import annotations

import numpy as np
import pytest

from tradesim.cluster import ClusterTopology, LatencyModel, NodeSpec
from tradesim.errors import ConfigError
from tradesim.hybrid import (
    Chromosome,
    FitnessWeights,
    HybridConfig,
    RefineReward,
    RolloutEvaluator,
    adapt_population_size,
    adaptive_rates,
    apply_record_to_chromosome,
    crossover,
    fitness_from_metrics,
    hybrid_scheduling,
    local_search,
    mutate,
    non_dominated_sort,
    random_chromosome,
    refine_reward,
    repair,
    satisfies_invariants,
    select_top_k,
    tournament_select,
)
from tradesim.workload import ServiceSpec, WorkloadScenario


def toy_services() -> tuple[ServiceSpec, ...]:
    return (
        ServiceSpec("orders", 0.6, 10.0, 1000),
        ServiceSpec("quotes", 0.4, 5.0, 500),
    )


def toy_topology(node_cpu=800.0) -> ClusterTopology:
    return ClusterTopology(
        nodes=(NodeSpec(node_cpu, 4096.0, 100.0), NodeSpec(node_cpu, 4096.0, 100.0)),
        services=toy_services(),
        initial_placement=((1, 0), (0, 1)),
        initial_quota=(0.4, 0.4),
        initial_priority=(0.5, 0.5),
        latency=LatencyModel(jitter_enabled=False),
    )


def toy_scenario(rate=60.0, horizon=200, seed=5) -> WorkloadScenario:
    return WorkloadScenario(
        base_rate=rate, peak_rate=rate * 3, horizon=horizon, seed=seed,
        service_mix=toy_services(),
    )


def chromo(placement, quota=(0.4, 0.4), priority=(0.5, 0.5)) -> Chromosome:
    return Chromosome(
        placement=np.array(placement, dtype=int),
        quota=np.array(quota, dtype=float),
        priority=np.array(priority, dtype=float),
    )


class TestFitness:
    def test_boundary_all_max(self):
        w = FitnessWeights(T_max=100.0)
        assert fitness_from_metrics(100.0, 1.0, 1.0, w) == pytest.approx(0.4)

    def test_all_zero_metrics(self):
        w = FitnessWeights(T_max=100.0)
        assert fitness_from_metrics(0.0, 0.0, 0.0, w) == pytest.approx(0.6)

    def test_midpoint(self):
        w = FitnessWeights(T_max=100.0)
        assert fitness_from_metrics(50.0, 0.5, 0.5, w) == pytest.approx(0.5)

    def test_nonfinite_is_infeasible(self):
        w = FitnessWeights()
        assert fitness_from_metrics(float("nan"), 0.5, 0.5, w) == float("inf")


class TestAdaptiveRates:
    def test_best_candidate_protected(self):
        assert adaptive_rates(10.0, 5.0, 10.0) == pytest.approx((0.3, 0.03))

    def test_average_candidate_exploratory(self):
        assert adaptive_rates(5.0, 5.0, 10.0) == pytest.approx((0.9, 0.1))

    def test_midpoint_rates(self):
        assert adaptive_rates(7.5, 5.0, 10.0) == pytest.approx((0.6, 0.065))

    def test_below_average_clamps_to_exploratory(self):
        assert adaptive_rates(1.0, 5.0, 10.0) == pytest.approx((0.9, 0.1))

    def test_degenerate_population(self):
        assert adaptive_rates(5.0, 5.0, 5.0) == (0.9, 0.1)

    def test_invalid_order_raises(self):
        with pytest.raises(ValueError):
            adaptive_rates(5.0, 10.0, 5.0)

    def test_rates_bounded_over_range(self):
        for q in np.linspace(5.0, 10.0, 23):
            pc, pm = adaptive_rates(float(q), 5.0, 10.0)
            assert 0.3 <= pc <= 0.9
            assert 0.03 <= pm <= 0.1


class TestTournament:
    def test_single_candidate(self):
        pop = [chromo([[1, 0], [0, 1]])]
        assert tournament_select(pop, np.array([1.0]), 2, np.random.default_rng(0)) is pop[0]

    def test_full_size_tournament_returns_global_best(self):
        rng = np.random.default_rng(1)
        pop = [chromo([[1, 0], [0, 1]]) for _ in range(6)]
        fits = np.array([5.0, 3.0, 4.0, 1.0, 2.0, 6.0])
        # large tournament makes missing the best astronomically unlikely
        winners = {tournament_select(pop, fits, 64, rng) is pop[3] for _ in range(20)}
        assert winners == {True}

    def test_binary_tournament_win_probability(self):
        # fitnesses {1, 2}: the fitter wins unless both draws hit the other -> 3/4
        pop = [chromo([[1, 0], [0, 1]]), chromo([[0, 1], [1, 0]])]
        fits = np.array([1.0, 2.0])
        rng = np.random.default_rng(2)
        wins = sum(
            tournament_select(pop, fits, 2, rng) is pop[0] for _ in range(10_000)
        )
        assert wins / 10_000 == pytest.approx(0.75, abs=0.02)

    def test_empty_population_raises(self):
        with pytest.raises(ValueError):
            tournament_select([], np.array([]), 2, np.random.default_rng(0))


class TestCrossover:
    def test_zero_probability_copies_parents(self):
        rng = np.random.default_rng(3)
        a = chromo([[2, 0], [0, 1]], quota=(0.3, 0.2))
        b = chromo([[0, 1], [1, 1]], quota=(0.1, 0.4))
        c1, c2 = crossover(a, b, 0.0, rng)
        assert c1.equals(a) and c2.equals(b)

    def test_identical_parents_fixed_point(self):
        rng = np.random.default_rng(4)
        a = chromo([[1, 1], [0, 1]], quota=(0.25, 0.25))
        c1, c2 = crossover(a, a.copy(), 1.0, rng)
        assert c1.equals(a) and c2.equals(a)

    def test_children_satisfy_invariants(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            a = random_chromosome(rng, 3, 2)
            b = random_chromosome(rng, 3, 2)
            c1, c2 = crossover(a, b, 0.9, rng)
            assert satisfies_invariants(c1) and satisfies_invariants(c2)


class TestMutation:
    def test_zero_rate_is_identity(self):
        rng = np.random.default_rng(6)
        x = chromo([[2, 1], [1, 1]], quota=(0.2, 0.3))
        assert mutate(x, 0.0, rng).equals(x)

    def test_rate_one_sigma_zero_changes_every_placement_gene(self):
        rng = np.random.default_rng(7)
        x = chromo([[3, 2], [2, 3]], quota=(0.08, 0.08))
        y = mutate(x, 1.0, rng, sigma=0.0)
        assert np.all(y.placement != x.placement)
        assert np.array_equal(y.quota, x.quota)
        assert np.array_equal(y.priority, x.priority)

    def test_changed_gene_fraction_matches_binomial(self):
        # quota headroom keeps repair inactive so gene flips are independent
        rng = np.random.default_rng(8)
        x = chromo([[3, 3], [3, 3]], quota=(0.05, 0.05), priority=(0.5, 0.5))
        total_genes = x.genes()
        changed = 0
        trials = 10_000
        for _ in range(trials):
            y = mutate(x, 0.1, rng, sigma=0.01)
            changed += int(np.sum(y.placement != x.placement))
            changed += int(np.sum(y.quota != x.quota))
            changed += int(np.sum(y.priority != x.priority))
        frac = changed / (trials * total_genes)
        assert frac == pytest.approx(0.1, abs=0.01)

    def test_mutants_satisfy_invariants(self):
        rng = np.random.default_rng(9)
        for _ in range(300):
            x = random_chromosome(rng, 3, 2)
            assert satisfies_invariants(mutate(x, 0.5, rng))


class TestSelectTopK:
    def test_whole_population(self):
        pop = [chromo([[1, 0], [0, 1]]) for _ in range(4)]
        fits = np.array([4.0, 2.0, 3.0, 1.0])
        assert len(select_top_k(pop, fits, 4)) == 4

    def test_k_one_is_global_best(self):
        pop = [chromo([[1, 0], [0, 1]]) for _ in range(4)]
        fits = np.array([4.0, 2.0, 3.0, 1.0])
        assert select_top_k(pop, fits, 1)[0] is pop[3]

    def test_matches_sort_oracle_with_stable_ties(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            n = int(rng.integers(2, 30))
            pop = list(range(n))  # identity works for the oracle comparison
            fits = rng.integers(0, 5, size=n).astype(float)  # force ties
            k = int(rng.integers(1, n + 1))
            got = select_top_k(pop, fits, k)
            want = [i for _, i in sorted(zip(fits, range(n)), key=lambda t: (t[0], t[1]))][:k]
            assert got == want

    def test_oversized_k_raises(self):
        with pytest.raises(ValueError):
            select_top_k([chromo([[1, 0], [0, 1]])], np.array([1.0]), 2)


class TestNonDominatedSort:
    def brute_force(self, obj):
        n = len(obj)
        remaining = set(range(n))
        fronts = []
        while remaining:
            front = []
            for i in remaining:
                dominated = any(
                    np.all(obj[j] <= obj[i]) and np.any(obj[j] < obj[i])
                    for j in remaining
                    if j != i
                )
                if not dominated:
                    front.append(i)
            fronts.append(sorted(front))
            remaining -= set(front)
        return fronts

    def test_single_point_one_front(self):
        assert non_dominated_sort(np.array([[1.0, 2.0, 3.0]])) == [[0]]

    def test_mutually_nondominating_share_front(self):
        fronts = non_dominated_sort(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert fronts == [[0, 1]]

    def test_matches_brute_force_on_random_populations(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            obj = rng.integers(0, 6, size=(50, 3)).astype(float)
            got = [sorted(f) for f in non_dominated_sort(obj)]
            assert got == self.brute_force(obj)

    def test_scalar_minimizer_in_first_front(self):
        rng = np.random.default_rng(12)
        w = FitnessWeights(T_max=100.0)
        for _ in range(20):
            T = rng.uniform(0, 200, size=30)
            U = rng.uniform(0, 1, size=30)
            L = rng.uniform(0, 1, size=30)
            fits = [fitness_from_metrics(t, u, l, w) for t, u, l in zip(T, U, L)]
            objectives = np.stack([T, -U, -L], axis=1)
            fronts = non_dominated_sort(objectives)
            assert int(np.argmin(fits)) in fronts[0]


class TestLocalSearch:
    def test_no_improvement_returns_input(self):
        x = chromo([[1, 0], [0, 1]])
        best, best_f = local_search(x, lambda c: 0.0, budget=5, rng=np.random.default_rng(0))
        assert best.equals(x) and best_f == 0.0

    def test_never_worse_than_input(self):
        rng = np.random.default_rng(13)
        for trial in range(20):
            x = random_chromosome(rng, 2, 2)

            def noisy_fitness(c, t=trial):
                return float(np.sum(c.placement) * 0.1 + c.quota.sum())

            f0 = noisy_fitness(x)
            _, f1 = local_search(x, noisy_fitness, budget=8, rng=rng)
            assert f1 <= f0

    def test_reaches_single_gene_optimum(self):
        # convex landscape in one placement gene: optimum at placement[0,0] == 3
        def fitness_fn(c):
            return float((c.placement[0, 0] - 3) ** 2)

        x = chromo([[6, 1], [0, 1]])
        exhaustive_best = min(fitness_fn(chromo([[v, 1], [0, 1]])) for v in range(0, 10))
        best, best_f = local_search(x, fitness_fn, budget=60, rng=np.random.default_rng(3))
        assert best_f == exhaustive_best == 0.0
        assert best.placement[0, 0] == 3

    def test_budget_must_be_positive(self):
        with pytest.raises(ValueError):
            local_search(chromo([[1, 0], [0, 1]]), lambda c: 0.0, 0, np.random.default_rng(0))


class TestAdaptPopulation:
    def test_stagnation_shrinks_25_percent(self):
        history = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0]
        assert adapt_population_size(history, 40, 20, 60) == 30

    def test_clamped_at_minimum(self):
        history = [1.0] * 6
        assert adapt_population_size(history, 20, 20, 60) == 20

    def test_fast_improvement_grows_25_percent(self):
        history = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5]
        assert adapt_population_size(history, 40, 20, 60) == 50

    def test_short_history_unchanged(self):
        assert adapt_population_size([1.0, 0.5], 40, 20, 60) == 40


class TestRefinement:
    def test_zero_delta_reward_is_zero(self):
        assert refine_reward(RefineReward(), 0.0, 0.0, 0.0) == 0.0

    def test_direct_reward_arithmetic(self):
        spec = RefineReward(alpha=1.0, beta=0.0, gamma_cost=0.0)
        assert refine_reward(spec, 0.05, 0.3, 2.0) == pytest.approx(0.05)

    def test_zero_record_leaves_chromosome_unchanged(self):
        x = chromo([[1, 0], [0, 1]], quota=(0.5, 0.5), priority=(0.5, 0.5))
        record = {
            "delta": np.ones(2, dtype=int),  # maps to 0 delta
            "priority": np.zeros(2),  # sigmoid(0) = 0.5 = current value
            "quota": np.zeros(2),
            "migration": np.array([0]),
        }
        refined, magnitude = apply_record_to_chromosome(record, x)
        assert refined.equals(x)
        assert magnitude == 0.0

    def test_refined_always_satisfies_invariants(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            x = random_chromosome(rng, 2, 2)
            record = {
                "delta": rng.integers(0, 3, size=2),
                "priority": rng.normal(size=2),
                "quota": rng.normal(size=2),
                "migration": rng.integers(0, 3, size=1),
            }
            refined, _ = apply_record_to_chromosome(record, x)
            assert satisfies_invariants(refined)


class TestRepair:
    def test_every_service_keeps_an_instance(self):
        x = chromo([[0, 0], [1, 0]])
        assert satisfies_invariants(repair(x))

    def test_quota_commitment_scaled_down(self):
        x = chromo([[3, 0], [2, 0]], quota=(0.4, 0.4))
        repair(x)
        commit = x.placement.T.astype(float) @ x.quota
        assert commit.max() <= 1.0 + 1e-9


class TestHybridScheduling:
    def small_config(self, **kw) -> HybridConfig:
        cfg = dict(
            population=8, elite=2, max_iter=4, seed=3, eval_ticks=30,
            n_min=6, n_max=12, local_search_budget=2,
        )
        cfg.update(kw)
        return HybridConfig(**cfg)

    def test_single_iteration_returns_best_of_initial_population(self):
        result = hybrid_scheduling(
            toy_scenario(), toy_topology(), self.small_config(max_iter=1)
        )
        assert len(result.trace) == 1
        assert np.isfinite(result.best_fitness)
        assert satisfies_invariants(result.best)

    def test_best_fitness_trace_monotone_nonincreasing(self):
        result = hybrid_scheduling(
            toy_scenario(), toy_topology(), self.small_config(max_iter=6)
        )
        fits = [t.best_fitness for t in result.trace]
        assert all(b <= a + 1e-12 for a, b in zip(fits, fits[1:]))

    def test_population_size_tracks_target_each_generation(self):
        result = hybrid_scheduling(
            toy_scenario(), toy_topology(), self.small_config(max_iter=6)
        )
        for t in result.trace:
            assert t.population >= 6 and t.population <= 12

    def test_population_size_exact_without_adaptation(self):
        result = hybrid_scheduling(
            toy_scenario(), toy_topology(),
            self.small_config(max_iter=5, adapt_population=False),
        )
        assert all(t.population == 8 for t in result.trace)

    def test_rates_within_bounds_each_generation(self):
        result = hybrid_scheduling(
            toy_scenario(), toy_topology(), self.small_config(max_iter=5)
        )
        for t in result.trace:
            assert 0.3 - 1e-9 <= t.pc_mean <= 0.9 + 1e-9
            assert 0.03 - 1e-9 <= t.pm_mean <= 0.1 + 1e-9

    def test_determinism_fixed_seed(self):
        a = hybrid_scheduling(toy_scenario(), toy_topology(), self.small_config())
        b = hybrid_scheduling(toy_scenario(), toy_topology(), self.small_config())
        assert a.best_fitness == b.best_fitness
        assert a.best.equals(b.best)
        assert [t.best_fitness for t in a.trace] == [t.best_fitness for t in b.trace]

    def test_toy_instance_matches_exhaustive_search(self):
        # frozen continuous genes: GA explores placements only, so the
        # exhaustive enumeration over the same grid is a true optimum oracle
        scenario = toy_scenario(rate=80.0)
        topology = toy_topology(node_cpu=600.0)
        weights = FitnessWeights(T_max=300.0)
        evaluator = RolloutEvaluator(scenario, topology, weights, eval_ticks=30)

        quota = (0.2, 0.2)  # max 4-instance commit stays feasible: no repairs
        priority = (0.5, 0.5)
        best_exhaustive = float("inf")
        for p00 in range(0, 3):
            for p01 in range(0, 3):
                for p10 in range(0, 3):
                    for p11 in range(0, 3):
                        cand = chromo([[p00, p01], [p10, p11]], quota, priority)
                        if not satisfies_invariants(cand):
                            continue
                        if cand.placement.max() > 2:
                            continue
                        f = fitness_from_metrics(
                            *(lambda m: (m.T, m.U, m.L))(evaluator.metrics(cand)), weights
                        )
                        best_exhaustive = min(best_exhaustive, f)

        config = HybridConfig(
            population=14, elite=2, max_iter=30, seed=1, eval_ticks=30,
            n_min=6, n_max=20, mutation_sigma=0.0, max_instances=2,
            local_search_budget=8, rl_refinement=False, adapt_population=False,
            convergence_window=40,
        )
        rng = np.random.default_rng(1)
        init = [
            chromo(rng.integers(0, 3, size=(2, 2)), quota, priority)
            for _ in range(config.population)
        ]
        result = hybrid_scheduling(
            scenario, topology, config, weights, initial_population=init
        )
        assert result.best_fitness <= best_exhaustive + 1e-9

    def test_infeasible_config_rejected(self):
        with pytest.raises(ConfigError):
            HybridConfig(population=4, elite=4)
