"""Experiment configuration, task construction, metrics and report protocols."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from . import plotting
from .planners import HeuristicKind, greedy_shard, random_search, random_shard
from .costmodel import CostBuffer
from .rl.train import Agent, TrainConfig, bootstrap_cost_samples, learned_cost_greedy, plan_balance, train
from .rl.vtrace import VTraceConfig
from .simcost import BenchConfig, SimParams, marginal_costs, plan_latencies
from .tables import (FEATURE_GROUPS, ConfigError, FeatureMask, GeneratorConfig, ShardingPlan, ShardingTask,
                     TableDesc, Workload, compute_norm_stats, generate_pool, generate_workload)

log = logging.getLogger(__name__)

HEURISTICS = ("rand", "size", "dim", "lookup")
ALGORITHMS = HEURISTICS + ("autoshard",)


# ---------------------------------------------------------------- metrics


def metric_balance(costs: Sequence[float]) -> float:
    costs = np.asarray(costs, dtype=float)
    if costs.size <= 1:
        return 1.0
    return float(costs.min() / costs.max())


def metric_speedup(costs: Sequence[float], random_costs: Sequence[float]) -> float:
    return float(np.max(random_costs) / np.max(costs))


# ---------------------------------------------------------------- config


@dataclass
class TaskSpec:
    n_tables: int = 40
    num_shards: int | None = 4  # None applies one shard per ten tables
    budget_factor: float = 1.6


@dataclass
class TransferSpec:
    unseen_ratios: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    scale_factors: tuple = (2, 5, 10)
    n_tasks: int = 5


@dataclass
class ExperimentConfig:
    """Every number a report produces follows from this plus the code version."""

    seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    pool_size: int = 200
    batch_size: int = 1024
    n_train_tasks: int = 20
    n_test_tasks: int = 5
    algorithms: tuple = ALGORITHMS
    ablations: tuple = ("full", "no_cost_model", "learned_cost_greedy") + tuple(f"without_{g}" for g in FEATURE_GROUPS)
    search_samples: int = 1000
    sim: SimParams = field(default_factory=SimParams)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    transfer: TransferSpec = field(default_factory=TransferSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    vtrace: VTraceConfig = field(default_factory=VTraceConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "seeds": list(self.seeds),
            "pool_size": self.pool_size,
            "batch_size": self.batch_size,
            "n_train_tasks": self.n_train_tasks,
            "n_test_tasks": self.n_test_tasks,
            "algorithms": list(self.algorithms),
            "ablations": list(self.ablations),
            "search_samples": self.search_samples,
            "sim": self.sim.to_dict(),
            "generator": self.generator.to_dict(),
            "task": dict(vars(self.task)),
            "transfer": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(self.transfer).items()},
            "train": self.train.to_dict(),
            "vtrace": self.vtrace.to_dict(),
            "bench": self.bench.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls().to_dict())
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        kw: dict[str, Any] = {}
        for k in ("seed", "pool_size", "batch_size", "n_train_tasks", "n_test_tasks", "search_samples"):
            if k in d:
                kw[k] = int(d[k])
        for k in ("seeds", "algorithms", "ablations"):
            if k in d:
                kw[k] = tuple(d[k])
        if "sim" in d:
            kw["sim"] = SimParams.from_dict(d["sim"])
        if "generator" in d:
            kw["generator"] = GeneratorConfig.from_dict({**GeneratorConfig().to_dict(), **d["generator"]})
        if "task" in d:
            kw["task"] = _build(TaskSpec, d["task"], "task")
        if "transfer" in d:
            t = {k: tuple(v) if isinstance(v, list) else v for k, v in d["transfer"].items()}
            kw["transfer"] = _build(TransferSpec, t, "transfer")
        if "train" in d:
            kw["train"] = TrainConfig.from_dict(d["train"])
        if "vtrace" in d:
            kw["vtrace"] = _build(VTraceConfig, d["vtrace"], "vtrace")
        if "bench" in d:
            kw["bench"] = _build(BenchConfig, d["bench"], "bench")
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        bad = set(self.algorithms) - set(ALGORITHMS)
        if bad:
            raise ConfigError(f"unknown algorithms: {sorted(bad)}")
        if self.task.n_tables > self.pool_size:
            raise ConfigError("task.n_tables exceeds pool_size")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for ab in self.ablations:
            ablation_mask(ab)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def num_shards(self, n_tables: int | None = None) -> int:
        n = self.task.n_tables if n_tables is None else n_tables
        if n_tables is None and self.task.num_shards is not None:
            return self.task.num_shards
        return max(1, -(-n // 10))


def _build(cls, d: dict, section: str):
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {section} section: {exc}") from exc


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """YAML file (optional) plus ``dotted.key=value`` overrides, values parsed as YAML scalars."""
    d = ExperimentConfig().to_dict()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        _merge(d, loaded)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key=value")
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return ExperimentConfig.from_dict(d)


def _merge(base: dict, new: dict) -> None:
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# ---------------------------------------------------------------- setup


@dataclass
class Setup:
    pool: list[TableDesc]
    workload: Workload
    norm: Any
    train_tasks: list[ShardingTask]
    test_tasks: list[ShardingTask]


def sample_task(tables: Sequence[TableDesc], n: int, K: int, budget_factor: float,
                rng: np.random.Generator) -> ShardingTask:
    idx = np.sort(rng.choice(len(tables), n, replace=False))
    return ShardingTask.build([tables[i] for i in idx], K, budget_factor)


def build_setup(cfg: ExperimentConfig, pool_size: int | None = None) -> Setup:
    """Pool, workload and tasks; each comes from its own named stream of ``cfg.seed``."""
    pool = generate_pool(cfg.seed, pool_size or cfg.pool_size, cfg.generator)
    wl = generate_workload(cfg.seed, pool, cfg.batch_size, cfg.generator)
    base = pool[: cfg.pool_size]
    norm = compute_norm_stats(base, wl.subset([t.id for t in base]))
    K = cfg.num_shards()
    tr_rng = np.random.default_rng([cfg.seed, 101])
    te_rng = np.random.default_rng([cfg.seed, 102])
    train_tasks = [sample_task(base, cfg.task.n_tables, K, cfg.task.budget_factor, tr_rng)
                   for _ in range(cfg.n_train_tasks)]
    test_tasks = [sample_task(base, cfg.task.n_tables, K, cfg.task.budget_factor, te_rng)
                  for _ in range(cfg.n_test_tasks)]
    return Setup(pool, wl, norm, train_tasks, test_tasks)


def scale_tasks(cfg: ExperimentConfig, factor: int, setup: Setup | None = None) -> tuple[list[ShardingTask], Workload]:
    """Tasks ``factor`` times larger than the training tasks, from a prefix-consistent extended pool."""
    n = cfg.task.n_tables * factor
    size = max(cfg.pool_size, 2 * n)
    ext = build_setup(cfg, size) if setup is None or len(setup.pool) < size else setup
    rng = np.random.default_rng([cfg.seed, 103, factor])
    K = cfg.num_shards(n)
    tasks = [sample_task(ext.pool, n, K, cfg.task.budget_factor, rng) for _ in range(cfg.transfer.n_tasks)]
    return tasks, ext.workload


# ---------------------------------------------------------------- evaluation


def exact_costs(plan: ShardingPlan, task: ShardingTask, workload: Workload, sim: SimParams) -> np.ndarray:
    w = marginal_costs(task.tables, workload, sim)
    return plan_latencies(np.asarray(plan.assignment), w, task.num_shards, sim)


def baseline_plan(name: str, task: ShardingTask, seed) -> ShardingPlan:
    if name == "rand":
        return random_shard(task, seed)
    return greedy_shard(task, HeuristicKind(name))


@dataclass
class Score:
    balance: float
    speedup: float
    feasible: bool


def score_plan(plan: ShardingPlan, task: ShardingTask, workload: Workload, sim: SimParams,
               random_costs: np.ndarray) -> Score:
    costs = exact_costs(plan, task, workload, sim)
    return Score(plan_balance(plan, task, workload, sim), metric_speedup(costs, random_costs),
                 plan.is_feasible(task))


def random_reference(task: ShardingTask, workload: Workload, sim: SimParams, seed: int, index: int) -> np.ndarray:
    return exact_costs(random_shard(task, [seed, 104, index]), task, workload, sim)


def ablation_mask(name: str) -> tuple[FeatureMask, bool]:
    """Feature mask and cost-model flag of an ablation row."""
    if name in ("full", "learned_cost_greedy"):
        return FeatureMask.all(), True
    if name == "no_cost_model":
        return FeatureMask.all(), False
    if name.startswith("without_") and name[len("without_"):] in FEATURE_GROUPS:
        return FeatureMask.all().without(name[len("without_"):]), True
    raise ConfigError(f"unknown ablation {name!r}")


# ---------------------------------------------------------------- reports


def _header(cfg: ExperimentConfig, kind: str) -> list[str]:
    return [
        f"# report: {kind}",
        f"# cfg_hash: {cfg.fingerprint()}",
        f"# code_version: {code_version()}",
        f"# sim: {json.dumps(cfg.sim.to_dict(), sort_keys=True)}",
    ]


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{x:.6f}"
    return str(x)


def write_table(path, header: list[str], columns: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = header + ["\t".join(columns)] + ["\t".join(_fmt(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def train_or_load(cfg: ExperimentConfig, setup: Setup, seed: int, out: Path | None,
                  mask: FeatureMask | None = None, use_cost_model: bool = True, tag: str = "autoshard",
                  train_tasks: Sequence[ShardingTask] | None = None) -> Agent:
    """Reuse ``out/<tag>_seed<seed>.ckpt`` when it was produced by the same config and code."""
    path = None if out is None else Path(out) / f"{tag}_seed{seed}.ckpt"
    if path is not None and path.exists():
        agent = Agent.load(path)
        if agent.meta.get("cfg_hash") == cfg.fingerprint() and agent.meta.get("code_version") == code_version():
            agent.check_norm(setup.norm)
            return agent
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed, "use_cost_model": use_cost_model})
    bench = BenchConfig.from_dict({**cfg.bench.to_dict(), "seed": seed})
    res = train(train_tasks or setup.train_tasks, setup.workload, setup.norm, tcfg, cfg.vtrace, cfg.sim,
                bench, mask)
    res.agent.meta["cfg_hash"] = cfg.fingerprint()
    res.agent.meta["code_version"] = code_version()
    res.agent.meta["curve"] = [vars(p) for p in res.curve]
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        res.agent.save(path)
    return res.agent


def run_compare(cfg: ExperimentConfig, out, agents: dict[int, Agent] | None = None) -> dict:
    """Per-task and mean/std balance and speedup of every algorithm over ``cfg.seeds``."""
    out = Path(out)
    setup = build_setup(cfg)
    rows = []
    per_seed: dict[str, list[float]] = {a: [] for a in cfg.algorithms}
    per_seed_speed: dict[str, list[float]] = {a: [] for a in cfg.algorithms}
    for seed in cfg.seeds:
        refs = [random_reference(t, setup.workload, cfg.sim, seed, i) for i, t in enumerate(setup.test_tasks)]
        agent = None
        if "autoshard" in cfg.algorithms:
            agent = (agents or {}).get(seed) or train_or_load(cfg, setup, seed, out)
        for alg in cfg.algorithms:
            bals, speeds = [], []
            for i, task in enumerate(setup.test_tasks):
                if alg == "autoshard":
                    plan, _ = agent.shard(task, setup.workload, setup.norm)
                else:
                    plan = baseline_plan(alg, task, [seed, 104, i])
                s = score_plan(plan, task, setup.workload, cfg.sim, refs[i])
                rows.append((seed, alg, i, s.balance, s.speedup, s.feasible))
                bals.append(s.balance)
                speeds.append(s.speedup)
            per_seed[alg].append(float(np.mean(bals)))
            per_seed_speed[alg].append(float(np.mean(speeds)))
    summary = {a: {"balance_mean": float(np.mean(per_seed[a])), "balance_std": float(np.std(per_seed[a])),
                   "speedup_mean": float(np.mean(per_seed_speed[a])), "speedup_std": float(np.std(per_seed_speed[a]))}
               for a in cfg.algorithms}
    head = _header(cfg, "compare")
    write_table(out / "compare_tasks.tsv", head, ["seed", "algorithm", "task", "balance", "speedup", "feasible"], rows)
    srows = [(a, v["balance_mean"], v["balance_std"], v["speedup_mean"], v["speedup_std"]) for a, v in summary.items()]
    cols = ["algorithm", "balance_mean", "balance_std", "speedup_mean", "speedup_std"]
    write_table(out / "compare_summary.tsv", head, cols, srows)
    write_table(out / "compare_bars.dat", head, cols, [(i,) + r[1:] for i, r in enumerate(srows)])
    plotting.bar_balance(list(summary), [v["balance_mean"] for v in summary.values()],
                         [v["balance_std"] for v in summary.values()], out / "compare_balance.png")
    return summary


def run_transfer(cfg: ExperimentConfig, out, agent: Agent | None = None) -> dict:
    """Balance at each unseen-table ratio (agent trained on the first half of the pool) and at larger scales."""
    out = Path(out)
    setup = build_setup(cfg)
    half = cfg.pool_size // 2
    seen, unseen = setup.pool[:half], setup.pool[half: cfg.pool_size]
    n, K = cfg.task.n_tables, cfg.num_shards()
    if n > half:
        raise ConfigError("transfer needs task.n_tables <= pool_size / 2")
    seed = cfg.seeds[0]
    rng = np.random.default_rng([cfg.seed, 105])
    half_train = [sample_task(seen, n, K, cfg.task.budget_factor, rng) for _ in range(cfg.n_train_tasks)]
    if agent is None:
        agent = train_or_load(cfg, setup, seed, out, tag="transfer", train_tasks=half_train)
    rows = []
    ratio_curves: dict[str, list[float]] = {"autoshard": [], "lookup": [], "rand": []}
    for r in cfg.transfer.unseen_ratios:
        n_new = int(round(r * n))
        sums = {k: [] for k in ratio_curves}
        for j in range(cfg.transfer.n_tasks):
            trng = np.random.default_rng([cfg.seed, 106, int(round(r * 100)), j])
            a = trng.choice(len(seen), n - n_new, replace=False)
            b = trng.choice(len(unseen), n_new, replace=False)
            tables = sorted([seen[i] for i in a] + [unseen[i] for i in b], key=lambda t: t.id)
            task = ShardingTask.build(tables, K, cfg.task.budget_factor)
            ref = random_reference(task, setup.workload, cfg.sim, seed, j)
            for alg in ratio_curves:
                plan = agent.shard(task, setup.workload, setup.norm)[0] if alg == "autoshard" \
                    else baseline_plan(alg, task, [seed, 104, j])
                s = score_plan(plan, task, setup.workload, cfg.sim, ref)
                rows.append(("unseen", r, alg, j, s.balance, s.speedup, s.feasible))
                sums[alg].append(s.balance)
        for alg in ratio_curves:
            ratio_curves[alg].append(float(np.mean(sums[alg])))
    scale_rows = evaluate_scale(cfg, agent, cfg.transfer.scale_factors)
    rows.extend(scale_rows)
    head = _header(cfg, "transfer")
    cols = ["kind", "x", "algorithm", "task", "balance", "speedup", "feasible"]
    write_table(out / "transfer.tsv", head, cols, rows)
    write_table(out / "transfer_unseen.dat", head, ["ratio"] + list(ratio_curves),
                [(r,) + tuple(ratio_curves[a][i] for a in ratio_curves)
                 for i, r in enumerate(cfg.transfer.unseen_ratios)])
    plotting.line_curves(list(cfg.transfer.unseen_ratios), ratio_curves, out / "transfer_unseen.png",
                         "ratio of unseen tables")
    scale_means = {}
    for f in cfg.transfer.scale_factors:
        for alg in ("autoshard", "lookup", "rand"):
            vals = [r[4] for r in scale_rows if r[1] == f and r[2] == alg]
            scale_means.setdefault(alg, []).append(float(np.mean(vals)))
    plotting.line_curves([cfg.task.n_tables * f for f in cfg.transfer.scale_factors], scale_means,
                         out / "transfer_scale.png", "number of tables")
    return {"unseen": ratio_curves, "scale": scale_means}


def evaluate_scale(cfg: ExperimentConfig, agent: Agent, factors: Sequence[int]) -> list[tuple]:
    """Rows ``("scale", factor, algorithm, task, balance, speedup, feasible)`` without retraining."""
    rows = []
    seed = cfg.seeds[0]
    for f in factors:
        tasks, wl = scale_tasks(cfg, f)
        for j, task in enumerate(tasks):
            ref = random_reference(task, wl, cfg.sim, seed, j)
            for alg in ("autoshard", "lookup", "rand"):
                plan = agent.shard(task, wl)[0] if alg == "autoshard" else baseline_plan(alg, task, [seed, 104, j])
                s = score_plan(plan, task, wl, cfg.sim, ref)
                rows.append(("scale", f, alg, j, s.balance, s.speedup, s.feasible))
    return rows


def run_ablation(cfg: ExperimentConfig, out) -> dict:
    """One row per ablation: mean test balance over ``cfg.seeds``."""
    out = Path(out)
    setup = build_setup(cfg)
    result = {}
    rows = []
    for ab in cfg.ablations:
        mask, use_cm = ablation_mask(ab)
        vals = []
        for seed in cfg.seeds:
            if ab == "learned_cost_greedy":
                agent = cost_model_only(cfg, setup, seed)
                plans = [learned_cost_greedy(agent, t, setup.workload) for t in setup.test_tasks]
            else:
                agent = train_or_load(cfg, setup, seed, out, mask, use_cm, tag=ab)
                plans = [agent.shard(t, setup.workload, setup.norm)[0] for t in setup.test_tasks]
            vals.append(float(np.mean([plan_balance(p, t, setup.workload, cfg.sim)
                                       for p, t in zip(plans, setup.test_tasks)])))
        result[ab] = (float(np.mean(vals)), float(np.std(vals)))
        rows.append((ab, *result[ab]))
    head = _header(cfg, "ablation")
    write_table(out / "ablation.tsv", head, ["ablation", "balance_mean", "balance_std"], rows)
    plotting.bar_balance([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], out / "ablation.png")
    return result


def cost_model_only(cfg: ExperimentConfig, setup: Setup, seed: int) -> Agent:
    """Cost model trained on the bootstrap shards alone; no policy learning."""
    agent = Agent(setup.norm, seed=seed, vtrace=cfg.vtrace, sim=cfg.sim)
    feats = {i: agent.features(t.tables, setup.workload) for i, t in enumerate(setup.train_tasks)}
    buf = CostBuffer(cfg.train.buffer_capacity)
    bench = BenchConfig.from_dict({**cfg.bench.to_dict(), "seed": seed})
    buf.extend(bootstrap_cost_samples(setup.train_tasks, setup.workload, feats, cfg.train.bootstrap_samples,
                                      cfg.sim, bench, np.random.default_rng([seed, 9])))
    rng = np.random.default_rng([seed, 8])
    for _ in range(cfg.train.warmup_cost_steps + cfg.train.iterations * cfg.train.cost_steps):
        agent.cost_model.train_step(buf.sample(rng, cfg.train.cost_batch), lr=cfg.train.cost_lr)
    return agent


def run_random_search(cfg: ExperimentConfig, out, agent: Agent | None = None) -> dict:
    """Mean best-so-far balance over the test tasks against sample count, with reference lines."""
    out = Path(out)
    setup = build_setup(cfg)
    seed = cfg.seeds[0]
    curves = []
    for i, task in enumerate(setup.test_tasks):
        _, hist = random_search(task, setup.workload, n_samples=cfg.search_samples, seed=[seed, 107, i], p=cfg.sim)
        curves.append(hist)
    mean_curve = np.mean(np.array(curves), axis=0)
    consts = {}
    for alg in HEURISTICS[1:]:
        consts[alg] = float(np.mean([plan_balance(greedy_shard(t, alg), t, setup.workload, cfg.sim)
                                     for t in setup.test_tasks]))
    if agent is not None:
        consts["autoshard"] = float(np.mean([plan_balance(agent.shard(t, setup.workload)[0], t, setup.workload,
                                                          cfg.sim) for t in setup.test_tasks]))
    head = _header(cfg, "random_search") + [f"# reference: {json.dumps(consts, sort_keys=True)}"]
    xs = np.arange(1, len(mean_curve) + 1)
    write_table(out / "search.tsv", head, ["samples", "best_balance"], list(zip(xs.tolist(), mean_curve.tolist())))
    write_table(out / "search.dat", head, ["samples", "best_balance"], list(zip(xs.tolist(), mean_curve.tolist())))
    plotting.line_curves(xs, {"random search": mean_curve}, out / "search.png", "samples", constants=consts,
                         logx=True)
    return {"curve": mean_curve, "reference": consts}
