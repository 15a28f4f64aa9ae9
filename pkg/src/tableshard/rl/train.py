"""Actor-learner training loop, checkpoints, and inference with a trained agent."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..costmodel import CostBuffer, CostModel, FingerprintMismatch
from ..netcore import ParamStore, load_container, save_container
from ..planners import balance
from ..simcost import BenchConfig, CostSample, SimParams, marginal_costs, plan_latencies, _micro_benchmark_latency, shard_latency_from_marginals
from ..tables import (ConfigError, FeatureMask, NormStats, ShardingPlan, ShardingTask, TableDesc,
                      Workload, feature_matrix)
from .env import ShardingEnv
from .policy import PolicyValueNet, Unroll, learner_update, rollout, run_episode
from .vtrace import VTraceConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ActorFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    actors: int = 8  # trajectories per learner update
    cost_batch: int = 512
    cost_steps: int = 20  # cost-model steps per learner update
    buffer_capacity: int = 5000
    bootstrap_samples: int = 500  # random shards measured before the first update
    warmup_cost_steps: int = 200
    lr: float = 1e-3
    cost_lr: float = 1e-3
    clip: float = 40.0
    eval_every: int = 10
    plateau_patience: int = 0  # evaluations without improvement before stopping; 0 never stops
    time_budget_s: float | None = None
    use_cost_model: bool = True
    order_seed: int | None = None
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.actors < 1 or self.eval_every < 1:
            raise ConfigError("iterations >= 0, actors >= 1 and eval_every >= 1 required")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown train config keys: {sorted(bad)}")
        return cls(**d)


def pool_fingerprint(tables: Sequence[TableDesc]) -> str:
    blob = json.dumps([t.to_dict() for t in tables], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- agent


class Agent:
    """Policy-value network, shared-encoder cost model and the feature setup they were trained with."""

    def __init__(self, norm: NormStats, mask: FeatureMask | None = None, seed: int = 0,
                 use_cost_model: bool = True, vtrace: VTraceConfig | None = None,
                 sim: SimParams | None = None, meta: dict | None = None):
        self.norm = norm
        self.mask = mask or FeatureMask.all()
        self.sim = sim or SimParams()
        self.vtrace = vtrace or VTraceConfig()
        self.store = ParamStore(seed)
        self.cost_model = CostModel(self.store, norm, sim_fingerprint=self.sim.fingerprint())
        self.net = PolicyValueNet(self.store, self.cost_model, use_cost_model)
        self.meta = dict(meta or {})

    @property
    def use_cost_model(self) -> bool:
        return self.net.use_cost_model

    def features(self, tables: Sequence[TableDesc], workload: Workload) -> np.ndarray:
        return feature_matrix(tables, workload, self.norm, self.mask)

    def check_norm(self, norm: NormStats | None) -> None:
        if norm is not None and norm.fingerprint() != self.norm.fingerprint():
            raise FingerprintMismatch(
                "feature normalization differs from the checkpoint "
                f"({norm.fingerprint()} vs {self.norm.fingerprint()}); "
                "regenerate features from the pool the agent was trained on"
            )

    def shard(self, task: ShardingTask, workload: Workload, norm: NormStats | None = None,
              order_seed: int | None = None) -> tuple[ShardingPlan, np.ndarray]:
        """One deterministic episode; returns the plan and the cost model's per-shard predictions."""
        self.check_norm(norm)
        feats = self.features(task.tables, workload)
        env = ShardingEnv(task, workload, feats, self.sim, BenchConfig(exact=True), order_seed)
        state, _ = run_episode(self.net, env, "argmax")
        plan = env.plan(state)
        predicted = self.cost_model.predict_many([feats[m] for m in plan.shard_positions()])
        return plan, predicted

    def save(self, path) -> None:
        meta = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "store": self.store.state_meta(),
            "cost_model": self.cost_model.to_meta(),
            "mask": self.mask.to_list(),
            "use_cost_model": self.use_cost_model,
            "vtrace": self.vtrace.to_dict(),
            "sim": self.sim.to_dict(),
            "extra": self.meta,
        }
        save_container(path, self.store.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> "Agent":
        arrays, meta = load_container(path)
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
        cm = meta["cost_model"]
        agent = cls(
            NormStats.from_dict(cm["norm"]),
            FeatureMask(frozenset(meta["mask"])),
            seed=meta["store"]["seed"],
            use_cost_model=meta["use_cost_model"],
            vtrace=VTraceConfig(**meta["vtrace"]),
            sim=SimParams.from_dict(meta["sim"]),
            meta=meta.get("extra", {}),
        )
        agent.store.load_state(arrays, meta["store"])
        agent.cost_model.load_meta(cm)
        return agent


# ---------------------------------------------------------------- evaluation


def plan_balance(plan: ShardingPlan, task: ShardingTask, workload: Workload, sim: SimParams) -> float:
    """Exact-cost balance; a plan that breaks a memory budget scores 0."""
    if not plan.is_feasible(task):
        return 0.0
    w = marginal_costs(task.tables, workload, sim)
    return balance(plan_latencies(np.asarray(plan.assignment), w, task.num_shards, sim))


def evaluate_agent(agent: Agent, tasks: Sequence[ShardingTask], workload: Workload) -> list[float]:
    out = []
    for task in tasks:
        plan, _ = agent.shard(task, workload)
        out.append(plan_balance(plan, task, workload, agent.sim))
    return out


def learned_cost_greedy(agent: Agent, task: ShardingTask, workload: Workload) -> ShardingPlan:
    """Place tables (largest lookup cost first) on the admitting shard whose predicted cost after placement is lowest."""
    feats = agent.features(task.tables, workload)
    enc, _ = agent.cost_model.encode(feats)
    env = ShardingEnv(task, workload, feats, agent.sim, BenchConfig(exact=True))
    K = task.num_shards
    sums = np.zeros((K, enc.shape[1]))
    mem = np.zeros(K)
    budget = np.asarray(task.mem_budget, dtype=float)
    sizes = task.sizes.astype(float)
    a = np.full(task.n_tables, -1, dtype=np.int64)
    for pos in env.visitation_order():
        pred = agent.cost_model.head_standardized(sums + enc[pos])
        fits = mem + sizes[pos] <= budget
        if fits.any():
            k = int(np.flatnonzero(fits)[np.argmin(pred[fits])])
        else:
            k = int(np.argmax(budget - mem))
        a[pos] = k
        sums[k] += enc[pos]
        mem[k] += sizes[pos]
    return ShardingPlan.from_assignment(task, a)


# ---------------------------------------------------------------- training


@dataclass
class CurvePoint:
    iteration: int
    plans_evaluated: int  # terminal train episodes measured so far (bootstrap shards excluded)
    cost_samples: int
    eval_balance: float
    test_balance: float | None
    elapsed_s: float


@dataclass
class TrainResult:
    agent: Agent
    curve: list[CurvePoint] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    best_iteration: int = 0


def bootstrap_cost_samples(tasks: Sequence[ShardingTask], workload: Workload, feats: dict[int, np.ndarray],
                           n: int, sim: SimParams, bench: BenchConfig, rng: np.random.Generator) -> list[CostSample]:
    """Measure ``n`` random table subsets (sizes 1..2n/K of a random train task) with the micro-benchmark."""
    out = []
    marg = [marginal_costs(t.tables, workload, sim) for t in tasks]
    prov = "exact" if bench.exact else "bench"
    for _ in range(n):
        ti = int(rng.integers(len(tasks)))
        task = tasks[ti]
        hi = max(1, min(task.n_tables, 2 * task.n_tables // task.num_shards))
        size = int(rng.integers(1, hi + 1))
        members = np.sort(rng.choice(task.n_tables, size, replace=False))
        exact = shard_latency_from_marginals(marg[ti][members], sim)
        if bench.exact:
            lat = exact
        else:
            lat, _ = _micro_benchmark_latency(exact, sim, bench.warmup, bench.measure, bench.trim, rng)
        out.append(CostSample(feats[ti][members], float(lat), prov))
    return out


_WORKER: dict = {}


def _worker_init(tasks, workload, feats, sim, bench, norm, mask, use_cost_model, store_seed, order_seed):
    agent = Agent(norm, mask, store_seed, use_cost_model, sim=sim)
    envs = [ShardingEnv(t, workload, feats[i], sim, bench, order_seed) for i, t in enumerate(tasks)]
    _WORKER.update(agent=agent, envs=envs)


def _worker_rollout(params, target_scale, task_index, length, rng_key):
    agent = _WORKER["agent"]
    agent.store.load_snapshot(params)
    agent.cost_model.target_scale = target_scale
    return rollout(agent.net, _WORKER["envs"][task_index], task_index, length, np.random.default_rng(rng_key))


def train(
    train_tasks: Sequence[ShardingTask],
    workload: Workload,
    norm: NormStats,
    cfg: TrainConfig | None = None,
    vtrace: VTraceConfig | None = None,
    sim: SimParams | None = None,
    bench: BenchConfig | None = None,
    mask: FeatureMask | None = None,
    eval_tasks: Sequence[ShardingTask] | None = None,
    test_tasks: Sequence[ShardingTask] | None = None,
    checkpoint_path=None,
    on_metrics: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train an agent; the returned agent holds the parameters with the best ``eval_tasks`` balance.

    ``eval_tasks`` defaults to the training tasks so model selection never sees
    the test tasks; ``test_tasks`` are only logged on the curve.
    """
    cfg = cfg or TrainConfig()
    vtrace = vtrace or VTraceConfig()
    sim = sim or SimParams()
    bench = bench or BenchConfig(seed=cfg.seed)
    if not train_tasks:
        raise ConfigError("at least one training task is required")
    eval_tasks = list(train_tasks) if eval_tasks is None else list(eval_tasks)
    pool_tables = {t.id: t for task in train_tasks for t in task.tables}
    agent = Agent(norm, mask, cfg.seed, cfg.use_cost_model, vtrace, sim, meta={
        "train": cfg.to_dict(),
        "pool_fingerprint": pool_fingerprint([pool_tables[i] for i in sorted(pool_tables)]),
    })
    result = TrainResult(agent)
    if cfg.iterations == 0:
        if checkpoint_path:
            agent.save(checkpoint_path)
        return result

    t0 = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, 7])
    feats = {i: agent.features(t.tables, workload) for i, t in enumerate(train_tasks)}
    envs = [ShardingEnv(t, workload, feats[i], sim, bench, cfg.order_seed) for i, t in enumerate(train_tasks)]
    buffer = CostBuffer(cfg.buffer_capacity)
    cost_rng = np.random.default_rng([cfg.seed, 8])
    if cfg.use_cost_model:
        buffer.extend(bootstrap_cost_samples(train_tasks, workload, feats, cfg.bootstrap_samples, sim, bench,
                                             np.random.default_rng([cfg.seed, 9])))
        for _ in range(cfg.warmup_cost_steps):
            agent.cost_model.train_step(buffer.sample(cost_rng, cfg.cost_batch), lr=cfg.cost_lr)

    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(cfg.workers, initializer=_worker_init, initargs=(
            list(train_tasks), workload, feats, sim, bench, norm, agent.mask, cfg.use_cost_model,
            cfg.seed, cfg.order_seed))

    best, best_snap, stale = -np.inf, agent.store.snapshot(), 0
    plans = 0
    try:
        for it in range(1, cfg.iterations + 1):
            picks = [int(rng.integers(len(train_tasks))) for _ in range(cfg.actors)]
            keys = [[cfg.seed, 11, it, j] for j in range(cfg.actors)]
            try:
                if pool is None:
                    unrolls = [rollout(agent.net, envs[ti], ti, vtrace.unroll_length, np.random.default_rng(k))
                               for ti, k in zip(picks, keys)]
                else:
                    snap = agent.store.snapshot()
                    futs = [pool.submit(_worker_rollout, snap, agent.cost_model.target_scale, ti,
                                        vtrace.unroll_length, k) for ti, k in zip(picks, keys)]
                    unrolls = [f.result() for f in futs]
            except Exception as exc:
                if checkpoint_path:
                    agent.save(checkpoint_path)
                raise ActorFailure(f"actor failed at iteration {it}: {exc}") from exc

            m = learner_update(agent.net, unrolls, feats, vtrace, lr=cfg.lr, clip=cfg.clip)
            plans += m["episodes"]
            if cfg.use_cost_model:
                for u in unrolls:
                    buffer.extend(u.cost_samples)
                closs = [agent.cost_model.train_step(buffer.sample(cost_rng, cfg.cost_batch), lr=cfg.cost_lr)
                         for _ in range(cfg.cost_steps)]
                m["cost_mse"] = float(np.mean(closs)) if closs else float("nan")
            m["step"] = it
            m["plans_evaluated"] = plans

            last = it == cfg.iterations
            over_time = cfg.time_budget_s is not None and time.perf_counter() - t0 > cfg.time_budget_s
            if it % cfg.eval_every == 0 or last or over_time:
                ev = float(np.mean(evaluate_agent(agent, eval_tasks, workload)))
                te = float(np.mean(evaluate_agent(agent, test_tasks, workload))) if test_tasks else None
                m["eval_balance"] = ev
                m["test_balance"] = te
                result.curve.append(CurvePoint(it, plans, len(buffer), ev, te, time.perf_counter() - t0))
                if ev > best:
                    best, best_snap, stale = ev, agent.store.snapshot(), 0
                    result.best_iteration = it
                    if checkpoint_path:
                        agent.save(checkpoint_path)
                else:
                    stale += 1
            result.metrics.append(m)
            if on_metrics:
                on_metrics(m)
            log.info("step %d loss %.4f entropy %.3f train_reward %.4f eval %s", it, m["loss"], m["entropy"],
                     m["mean_train_reward"], m.get("eval_balance", ""))
            if over_time or (cfg.plateau_patience and stale >= cfg.plateau_patience):
                break
    finally:
        if pool is not None:
            pool.shutdown()

    agent.store.load_snapshot(best_snap)
    agent.meta["best_iteration"] = result.best_iteration
    agent.meta["best_eval_balance"] = best
    if checkpoint_path:
        agent.save(checkpoint_path)
    return result
