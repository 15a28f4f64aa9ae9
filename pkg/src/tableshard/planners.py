"""Non-learned sharding baselines and an exhaustive oracle for tiny instances."""

from __future__ import annotations

import enum
import json
from typing import Callable, Sequence

import numpy as np

from .simcost import SimParams, marginal_costs, par, plan_latencies
from .tables import InfeasibleError, ShardingPlan, ShardingTask, TableDesc, Workload

PLAN_FILE_VERSION = 1
BRUTE_FORCE_LIMIT = 10**7


class HeuristicKind(str, enum.Enum):
    SIZE = "size"
    DIM = "dim"
    LOOKUP = "lookup"
    RANDOM = "random"


def heuristic_cost(table: TableDesc, kind: HeuristicKind) -> float:
    kind = HeuristicKind(kind)
    if kind is HeuristicKind.SIZE:
        return float(table.dim * table.hash_size)
    if kind is HeuristicKind.DIM:
        return float(table.dim)
    if kind is HeuristicKind.LOOKUP:
        return float(table.dim * table.pooling_mean)
    raise ValueError("random sharding has no cost function")


def greedy_by_cost(task: ShardingTask, costs: Sequence[float]) -> ShardingPlan:
    """Descending-cost greedy: each table goes to the admitting shard with the lowest running cost.

    Ties go to the lower table id / lower shard id. When no shard has room the
    table lands on the shard with the most free memory.
    """
    task.check_aggregate_memory()
    costs = np.asarray(costs, dtype=float)
    ids = np.array(task.table_ids)
    order = np.lexsort((ids, -costs))
    sizes = task.sizes
    load = np.zeros(task.num_shards)
    free = np.array(task.mem_budget, dtype=np.int64)
    assignment = np.zeros(task.n_tables, dtype=np.int64)
    for i in order:
        admits = free >= sizes[i]
        if admits.any():
            k = int(np.argmin(np.where(admits, load, np.inf)))
        else:
            k = int(np.argmax(free))
        assignment[i] = k
        load[k] += costs[i]
        free[k] -= sizes[i]
    return ShardingPlan.from_assignment(task, assignment)


def greedy_shard(task: ShardingTask, kind: HeuristicKind | str, seed: int | None = None) -> ShardingPlan:
    kind = HeuristicKind(kind)
    if kind is HeuristicKind.RANDOM:
        return random_shard(task, 0 if seed is None else seed)
    return greedy_by_cost(task, [heuristic_cost(t, kind) for t in task.tables])


def _random_assignment(task: ShardingTask, rng: np.random.Generator) -> np.ndarray:
    sizes = task.sizes
    free = np.array(task.mem_budget, dtype=np.int64)
    assignment = np.zeros(task.n_tables, dtype=np.int64)
    for i in range(task.n_tables):
        k = int(rng.integers(task.num_shards))
        if free[k] < sizes[i]:
            # rejection-resampling until a shard admits is a uniform draw among admitting shards
            admitting = np.flatnonzero(free >= sizes[i])
            k = int(rng.choice(admitting)) if admitting.size else int(np.argmax(free))
        assignment[i] = k
        free[k] -= sizes[i]
    return assignment


def random_shard(task: ShardingTask, seed) -> ShardingPlan:
    task.check_aggregate_memory()
    rng = np.random.default_rng(seed)
    return ShardingPlan.from_assignment(task, _random_assignment(task, rng))


def balance(costs: Sequence[float]) -> float:
    costs = np.asarray(costs, dtype=float)
    if costs.size <= 1:
        return 1.0
    return float(costs.min() / costs.max())


def exact_evaluator(task: ShardingTask, workload: Workload, p: SimParams) -> Callable[[ShardingPlan], float]:
    w = marginal_costs(task.tables, workload, p)

    def evaluate(plan: ShardingPlan) -> float:
        return balance(plan_latencies(np.asarray(plan.assignment), w, task.num_shards, p))

    return evaluate


def random_search(
    task: ShardingTask,
    workload: Workload,
    evaluator: Callable[[ShardingPlan], float] | None = None,
    n_samples: int = 1000,
    seed=0,
    p: SimParams | None = None,
) -> tuple[ShardingPlan, list[float]]:
    """Best of ``n_samples`` random plans by degree of balance; history is best-so-far.

    Draws share one stream seeded by ``seed``, so the first candidate is exactly
    ``random_shard(task, seed)``. Infeasible candidates only win if nothing
    feasible has been seen, and they count as balance 0 in the history.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    task.check_aggregate_memory()
    evaluator = evaluator or exact_evaluator(task, workload, p or SimParams())
    rng = np.random.default_rng(seed)
    best_plan, best_key = None, None
    history = []
    for _ in range(n_samples):
        plan = ShardingPlan.from_assignment(task, _random_assignment(task, rng))
        key = (plan.is_feasible(task), evaluator(plan))
        if best_key is None or key > best_key:
            best_plan, best_key = plan, key
        history.append(best_key[1] if best_key[0] else 0.0)
    return best_plan, history


def _digits(start: int, stop: int, n: int, k: int) -> np.ndarray:
    """Base-``k`` digits (most significant first) of the integers in ``[start, stop)``."""
    codes = np.arange(start, stop, dtype=np.int64)
    out = np.empty((codes.size, n), dtype=np.int64)
    for j in range(n - 1, -1, -1):
        out[:, j] = codes % k
        codes //= k
    return out


def brute_force(
    task: ShardingTask,
    workload: Workload,
    p: SimParams | None = None,
    chunk: int = 1 << 16,
) -> ShardingPlan:
    """Exhaustive minimizer of the max shard latency under memory budgets.

    Enumerates assignments in lexicographic order; the first minimum wins.
    """
    p = p or SimParams()
    n, k = task.n_tables, task.num_shards
    total = k**n
    if total > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force over {k}^{n} = {total} plans exceeds the {BRUTE_FORCE_LIMIT} guard")
    task.check_aggregate_memory()
    w = marginal_costs(task.tables, workload, p)
    sizes = task.sizes.astype(float)
    budget = np.array(task.mem_budget, dtype=float)
    desc = np.argsort(-w, kind="stable")
    w_desc = w[desc]
    par_by_rank = par(np.arange(n + 1), p)
    best_val, best_code = np.inf, -1
    for start in range(0, total, chunk):
        a = _digits(start, min(total, start + chunk), n, k)
        onehot = a[:, :, None] == np.arange(k)[None, None, :]  # (m, n, k)
        # running top-r sums per shard with tables in decreasing marginal order
        oh = onehot[:, desc, :]
        top = np.cumsum(oh * w_desc[None, :, None], axis=1)
        rank = np.cumsum(oh, axis=1)
        lat = p.c0 + np.where(oh, par_by_rank[rank] * top, 0.0).max(axis=1)
        worst = lat.max(axis=1)
        mem = np.einsum("mnk,n->mk", onehot, sizes)
        worst[(mem > budget).any(axis=1)] = np.inf
        i = int(np.argmin(worst))
        if worst[i] < best_val:
            best_val, best_code = worst[i], start + i
    if best_code < 0:
        raise InfeasibleError(0, "no assignment satisfies every memory budget")
    return ShardingPlan.from_assignment(task, _digits(best_code, best_code + 1, n, k)[0])


# ---------------------------------------------------------------- plan files


def save_plan(path, plan: ShardingPlan, task: ShardingTask, costs: Sequence[float] | None = None,
              extra: dict | None = None) -> None:
    doc = {
        "version": PLAN_FILE_VERSION,
        "task_fingerprint": task.fingerprint(),
        "num_shards": plan.num_shards,
        "table_ids": list(plan.table_ids),
        "assignment": list(plan.assignment),
        "mem_used": list(plan.mem_used),
        "costs_ms": None if costs is None else [float(c) for c in costs],
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_plan(path, task: ShardingTask) -> ShardingPlan:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != PLAN_FILE_VERSION:
        raise ValueError(f"unsupported plan file version {doc.get('version')!r}")
    if doc["task_fingerprint"] != task.fingerprint():
        raise ValueError("plan was produced for a different task (fingerprint mismatch)")
    return ShardingPlan.from_assignment(task, doc["assignment"])
