import heapq
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tableshard.planners import (
    HeuristicKind, balance, brute_force, greedy_by_cost, greedy_shard, heuristic_cost, load_plan,
    random_search, random_shard, save_plan,
)
from tableshard.simcost import SimParams, marginal_costs, plan_latencies
from tableshard.tables import InfeasibleError, ShardingTask, TableDesc, generate_pool, generate_workload

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "brute_force_8x2.json").read_text())
P = SimParams()


def tiny_tables(n, dim=16, hash_size=1000):
    return [TableDesc(i, dim, hash_size, 1.0, 1.0) for i in range(n)]


def fixture_instance(seed):
    pool = generate_pool(seed, 8)
    return ShardingTask.build(pool, 2), generate_workload(seed, pool, 256)


def max_cost(plan, task, wl):
    return float(plan_latencies(np.asarray(plan.assignment), marginal_costs(task.tables, wl, P), task.num_shards, P).max())


def lpt_two_machines(costs):
    """Textbook longest-processing-time schedule; returns the machine loads."""
    heap = [(0.0, 0), (0.0, 1)]
    for c in sorted(costs, reverse=True):
        load, m = heapq.heappop(heap)
        heapq.heappush(heap, (load + c, m))
    return sorted(load for load, _ in heap)


def test_hand_example_43322():
    task = ShardingTask.build(tiny_tables(5), 2, budget_factor=10)
    plan = greedy_by_cost(task, [4, 3, 3, 2, 2])
    loads = sorted(sum(c for c, k in zip([4, 3, 3, 2, 2], plan.assignment) if k == s) for s in range(2))
    assert loads == [6, 8]
    assert plan.assignment == (0, 1, 1, 0, 0)


def test_single_table_goes_to_shard_zero():
    task = ShardingTask.build(tiny_tables(1), 3)
    assert greedy_shard(task, "lookup").assignment == (0,)


def test_equal_costs_equal_cardinality():
    task = ShardingTask.build(tiny_tables(12), 4, budget_factor=4)
    plan = greedy_shard(task, HeuristicKind.DIM)
    assert [len(m) for m in plan.shard_members] == [3, 3, 3, 3]


def test_heuristic_costs():
    t = TableDesc(0, 32, 500, 7.5, 1.0)
    assert heuristic_cost(t, "size") == 32 * 500
    assert heuristic_cost(t, "dim") == 32
    assert heuristic_cost(t, "lookup") == 32 * 7.5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 100.0, allow_nan=False), min_size=1, max_size=30, unique=True))
def test_greedy_matches_lpt(costs):
    task = ShardingTask.build(tiny_tables(len(costs)), 2, budget_factor=100)
    plan = greedy_by_cost(task, costs)
    loads = sorted(sum(c for c, k in zip(costs, plan.assignment) if k == s) for s in range(2))
    np.testing.assert_allclose(loads, lpt_two_machines(costs), rtol=1e-12)


def test_greedy_infeasible_lists_deficit():
    pool = tiny_tables(4)
    task = ShardingTask(tuple(pool), 2, (100, 100))
    with pytest.raises(InfeasibleError) as e:
        greedy_shard(task, "size")
    assert e.value.deficit == 4 * 16 * 1000 * 2 - 200


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 500), n=st.integers(1, 40), k=st.integers(1, 6))
def test_planners_emit_valid_plans(seed, n, k):
    task = ShardingTask.build(generate_pool(seed, n), k, budget_factor=3.0)
    for plan in [greedy_shard(task, kind) for kind in ("size", "dim", "lookup")] + [random_shard(task, seed)]:
        assert len(plan.assignment) == n
        assert all(0 <= a < k for a in plan.assignment)
        assert sum(plan.mem_used) == int(task.sizes.sum())


def test_random_shard_k1_and_determinism():
    task = ShardingTask.build(generate_pool(0, 9), 1)
    assert set(random_shard(task, 3).assignment) == {0}
    task = ShardingTask.build(generate_pool(0, 30), 3)
    assert random_shard(task, 5) == random_shard(task, 5)


def test_random_shard_cardinality_band():
    task = ShardingTask.build(tiny_tables(1000), 10, budget_factor=10)
    counts = np.bincount(random_shard(task, 0).assignment, minlength=10)
    assert np.all(np.abs(counts - 100) <= 40)


def test_random_search_one_sample_equals_random_shard():
    pool = generate_pool(2, 12)
    wl = generate_workload(2, pool, 128)
    task = ShardingTask.build(pool, 3)
    plan, hist = random_search(task, wl, n_samples=1, seed=17)
    assert plan == random_shard(task, 17)
    assert len(hist) == 1


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 200))
def test_random_search_history_monotone(seed):
    pool = generate_pool(seed, 10)
    wl = generate_workload(seed, pool, 64)
    task = ShardingTask.build(pool, 3, budget_factor=2.0)
    _, hist = random_search(task, wl, n_samples=50, seed=seed)
    assert all(b >= a for a, b in zip(hist, hist[1:]))


def test_balance_edge_cases():
    assert balance([10, 10, 10]) == 1.0
    assert balance([5, 15]) == pytest.approx(1 / 3)
    assert balance([7.0]) == 1.0


def test_brute_force_two_identical_tables():
    tabs = [TableDesc(0, 16, 5000, 4.0, 1.0), TableDesc(1, 16, 5000, 4.0, 1.0)]
    wl = generate_workload(0, tabs, 64)
    task = ShardingTask.build(tabs, 2)
    assert sorted(brute_force(task, wl).assignment) == [0, 1]


def test_brute_force_guard():
    task = ShardingTask.build(generate_pool(0, 30), 3)
    with pytest.raises(ValueError):
        brute_force(task, generate_workload(0, task.tables, 8))


@pytest.mark.parametrize("fx", FIXTURES, ids=[str(f["seed"]) for f in FIXTURES])
def test_brute_force_fixture(fx):
    task, wl = fixture_instance(fx["seed"])
    plan = brute_force(task, wl)
    assert max_cost(plan, task, wl) == pytest.approx(fx["optimal_max_cost"], rel=1e-12)
    assert plan.is_feasible(task)
    for kind in ("size", "dim", "lookup"):
        assert max_cost(greedy_shard(task, kind), task, wl) >= fx["optimal_max_cost"] * (1 - 1e-12)
    assert max_cost(random_shard(task, 0), task, wl) >= fx["optimal_max_cost"] * (1 - 1e-12)


def test_plan_file_round_trip(tmp_path):
    pool = generate_pool(3, 10)
    task = ShardingTask.build(pool, 2)
    plan = greedy_shard(task, "lookup")
    save_plan(tmp_path / "plan.json", plan, task, [1.0, 2.0])
    assert load_plan(tmp_path / "plan.json", task) == plan
    other = ShardingTask.build(pool, 3)
    with pytest.raises(ValueError):
        load_plan(tmp_path / "plan.json", other)
