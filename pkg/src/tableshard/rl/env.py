"""Sequential sharding MDP: one table is placed per step, reward only at the end."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..planners import balance
from ..simcost import BenchConfig, SimParams, marginal_costs, measure_costs
from ..tables import FEATURE_DIM, ShardingPlan, ShardingTask, Workload


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EnvState:
    order: tuple[int, ...]  # task positions in visitation order
    t: int
    assignment: np.ndarray  # shard per task position, -1 while unassigned
    episode_seed: int = 0
    costs: tuple[float, ...] | None = None  # measured at a feasible terminal step

    @property
    def n_tables(self) -> int:
        return len(self.order)

    @property
    def done(self) -> bool:
        return self.t >= len(self.order)

    @property
    def step_aware(self) -> float:
        return self.t / len(self.order)

    @property
    def next_table(self) -> int:
        if self.done:
            raise EpisodeDone("episode is finished")
        return self.order[self.t]


@dataclass(frozen=True)
class Transition:
    table_features: np.ndarray
    step_aware: float
    action: int
    reward: float
    behavior_prob: float
    done: bool


def terminal_reward(assignment: np.ndarray, task: ShardingTask, costs_fn) -> tuple[float, np.ndarray | None]:
    """Balance of the measured costs when every budget holds, otherwise minus the worst overflow ratio."""
    mem = np.bincount(assignment, weights=task.sizes.astype(float), minlength=task.num_shards)
    budget = np.asarray(task.mem_budget, dtype=float)
    if np.all(mem <= budget):
        costs = costs_fn(assignment)
        return balance(costs), costs
    return -float(np.max((mem - budget) / budget)), None


class ShardingEnv:
    """Immutable environment context for one task; states are threaded through ``step``."""

    def __init__(
        self,
        task: ShardingTask,
        workload: Workload,
        features: np.ndarray,
        sim: SimParams | None = None,
        bench: BenchConfig | None = None,
        order_seed: int | None = None,
    ):
        task.check_aggregate_memory()
        if features.shape != (task.n_tables, FEATURE_DIM):
            raise ValueError(f"features must have shape ({task.n_tables}, {FEATURE_DIM})")
        self.task = task
        self.workload = workload
        self.features = features
        self.sim = sim or SimParams()
        self.bench = bench or BenchConfig()
        self.order_seed = order_seed
        self.marginals = marginal_costs(task.tables, workload, self.sim)
        lookup = np.array([t.dim * t.pooling_mean for t in task.tables])
        ids = np.array(task.table_ids)
        self._default_order = tuple(int(i) for i in np.lexsort((ids, -lookup)))

    @property
    def num_shards(self) -> int:
        return self.task.num_shards

    def visitation_order(self, order_seed: int | None = None) -> tuple[int, ...]:
        seed = self.order_seed if order_seed is None else order_seed
        if seed is None:
            return self._default_order
        perm = np.random.default_rng(seed).permutation(self.task.n_tables)
        return tuple(int(i) for i in perm)

    def reset(self, order_seed: int | None = None, episode_seed: int = 0) -> EnvState:
        a = np.full(self.task.n_tables, -1, dtype=np.int64)
        a.setflags(write=False)
        return EnvState(self.visitation_order(order_seed), 0, a, episode_seed)

    def measure(self, assignment: np.ndarray, episode_seed: int = 0) -> np.ndarray:
        return measure_costs(assignment, self.marginals, self.num_shards, self.sim, self.bench,
                             seed=(self.bench.seed, episode_seed))

    def step(self, state: EnvState, action: int) -> tuple[EnvState, float, bool]:
        if state.done:
            raise EpisodeDone("step called after the episode finished")
        action = int(action)
        if not 0 <= action < self.num_shards:
            raise ValueError(f"action {action} outside [0, {self.num_shards})")
        a = state.assignment.copy()
        a[state.next_table] = action
        a.setflags(write=False)
        t = state.t + 1
        if t < state.n_tables:
            return EnvState(state.order, t, a, state.episode_seed), 0.0, False
        reward, costs = terminal_reward(a, self.task, lambda x: self.measure(x, state.episode_seed))
        final = EnvState(state.order, t, a, state.episode_seed,
                         None if costs is None else tuple(float(c) for c in costs))
        return final, reward, True

    def plan(self, state: EnvState) -> ShardingPlan:
        if not state.done:
            raise ValueError("plan requested before every table was assigned")
        return ShardingPlan.from_assignment(self.task, state.assignment)


def env_reset(task: ShardingTask, workload: Workload, features: np.ndarray,
              table_order_seed: int | None = None, **kw) -> tuple[ShardingEnv, EnvState]:
    env = ShardingEnv(task, workload, features, order_seed=table_order_seed, **kw)
    return env, env.reset()


def env_step(env: ShardingEnv, state: EnvState, action: int) -> tuple[EnvState, float, bool]:
    return env.step(state, action)
