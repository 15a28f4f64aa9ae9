"""Command-line entry point: ``tableshard <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .planners import greedy_shard, load_plan, random_shard, save_plan
from .rl.train import Agent, train
from .simcost import BenchConfig, measure_plan
from .tables import (ConfigError, ShardingTask, WorkloadFormatError, compute_norm_stats, generate_pool,
                     generate_workload, load_pool, load_workload, save_pool, save_workload)

log = logging.getLogger("tableshard")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.iterations=50 (repeatable)")
    p.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--deterministic", action="store_true", help="single actor, serial execution")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args) -> ex.ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.deterministic:
        overrides.append("train.workers=1")
    return ex.load_config(args.config, overrides)


def _task_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pool", type=Path, help="pool file (default: generated from the config)")
    p.add_argument("--workload", type=Path, help="workload file (default: generated from the config)")
    p.add_argument("--tables", type=int, help="use the first N tables of the pool as the task")
    p.add_argument("--shards", type=int, help="number of shards (default: one per ten tables)")


def _load_task(args, cfg):
    if args.workload is not None:
        wl = load_workload(args.workload)
        pool = load_pool(args.pool) if args.pool else wl.tables
    elif args.pool is not None:
        pool = load_pool(args.pool)
        wl = generate_workload(cfg.seed, pool, cfg.batch_size, cfg.generator)
    else:
        setup = ex.build_setup(cfg, max(cfg.pool_size, args.tables or 0))
        pool, wl = setup.pool, setup.workload
    n = args.tables or cfg.task.n_tables
    tables = pool[:n]
    K = args.shards or (cfg.task.num_shards if args.tables is None else None)
    return ShardingTask.build(tables, K or cfg.num_shards(n), cfg.task.budget_factor), wl, pool


def cmd_gen_pool(args, cfg) -> int:
    pool = generate_pool(cfg.seed, args.n or cfg.pool_size, cfg.generator)
    path = args.out / "pool.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_pool(path, pool)
    print(f"pool\t{path}\t{len(pool)}")
    return 0


def cmd_gen_workload(args, cfg) -> int:
    pool = load_pool(args.pool) if args.pool else generate_pool(cfg.seed, cfg.pool_size, cfg.generator)
    wl = generate_workload(cfg.seed, pool, cfg.batch_size, cfg.generator)
    path = args.out / "workload.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_workload(path, wl)
    print(f"workload\t{path}\t{len(wl.table_ids)}\t{cfg.batch_size}")
    return 0


def cmd_bench(args, cfg) -> int:
    task, wl, _ = _load_task(args, cfg)
    plan = load_plan(args.plan, task) if args.plan else random_shard(task, cfg.seed)
    bench = BenchConfig.from_dict({**cfg.bench.to_dict(), "exact": args.exact})
    costs = measure_plan(plan, task, wl, cfg.sim, bench, seed=cfg.seed)
    print("shard\tlatency_ms")
    for k, c in enumerate(costs):
        print(f"{k}\t{c:.6f}")
    print(f"# balance\t{ex.metric_balance(costs):.6f}")
    return 0


def cmd_train(args, cfg) -> int:
    setup = ex.build_setup(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / "agent.ckpt"
    log_path = args.out / "train_log.tsv"
    cols = ["step", "loss", "policy_loss", "baseline_loss", "entropy_loss", "entropy", "mean_train_reward",
            "cost_mse", "plans_evaluated", "eval_balance", "test_balance"]
    with open(log_path, "w") as fh:
        fh.write("\t".join(cols) + "\n")

        def on_metrics(m):
            fh.write("\t".join(ex._fmt(m.get(c, "")) if m.get(c) is not None else "" for c in cols) + "\n")
            fh.flush()

        tcfg = ex.TrainConfig.from_dict({**cfg.train.to_dict(), "seed": cfg.seed})
        res = train(setup.train_tasks, setup.workload, setup.norm, tcfg, cfg.vtrace, cfg.sim,
                    BenchConfig.from_dict({**cfg.bench.to_dict(), "seed": cfg.seed}),
                    test_tasks=setup.test_tasks, checkpoint_path=ckpt, on_metrics=on_metrics)
    res.agent.meta["cfg_hash"] = cfg.fingerprint()
    res.agent.meta["curve"] = [vars(p) for p in res.curve]
    res.agent.save(ckpt)
    if res.curve:
        from . import plotting
        plotting.line_curves([p.plans_evaluated for p in res.curve],
                             {"eval": [p.eval_balance for p in res.curve],
                              "test": [p.test_balance for p in res.curve]},
                             args.out / "train_curve.png", "evaluated plans")
    print(f"checkpoint\t{ckpt}\tbest_iteration\t{res.best_iteration}")
    return 0


def cmd_shard(args, cfg) -> int:
    agent = Agent.load(args.checkpoint)
    task, wl, pool = _load_task(args, cfg)
    norm = compute_norm_stats(pool[: cfg.pool_size], wl.subset([t.id for t in pool[: cfg.pool_size]]))
    plan, predicted = agent.shard(task, wl, None if args.skip_norm_check else norm)
    args.out.mkdir(parents=True, exist_ok=True)
    costs = ex.exact_costs(plan, task, wl, cfg.sim)
    save_plan(args.out / "plan.json", plan, task, costs)
    print("table_id\tshard")
    for tid, k in zip(task.table_ids, plan.assignment):
        print(f"{tid}\t{k}")
    print("# shard\tpredicted_ms\texact_ms")
    for k in range(task.num_shards):
        print(f"# {k}\t{predicted[k]:.6f}\t{costs[k]:.6f}")
    return 0


def cmd_eval(args, cfg) -> int:
    task, wl, _ = _load_task(args, cfg)
    plan = load_plan(args.plan, task)
    ref = ex.random_reference(task, wl, cfg.sim, cfg.seed, 0)
    s = ex.score_plan(plan, task, wl, cfg.sim, ref)
    print("balance\tspeedup\tfeasible")
    print(f"{s.balance:.6f}\t{s.speedup:.6f}\t{int(s.feasible)}")
    return 0


def _print_summary(title: str, data: dict) -> None:
    print(f"# {title}")
    for k, v in data.items():
        print(f"{k}\t{json.dumps(v, sort_keys=True, default=lambda x: np.asarray(x).round(6).tolist())}")


def cmd_compare(args, cfg) -> int:
    _print_summary("compare", ex.run_compare(cfg, args.out))
    return 0


def cmd_transfer(args, cfg) -> int:
    agent = Agent.load(args.checkpoint) if args.checkpoint else None
    _print_summary("transfer", ex.run_transfer(cfg, args.out, agent))
    return 0


def cmd_ablate(args, cfg) -> int:
    _print_summary("ablation", ex.run_ablation(cfg, args.out))
    return 0


def cmd_search(args, cfg) -> int:
    agent = Agent.load(args.checkpoint) if args.checkpoint else None
    res = ex.run_random_search(cfg, args.out, agent)
    print(f"# search\tfinal\t{res['curve'][-1]:.6f}")
    _print_summary("reference", res["reference"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tableshard", description="Embedding-table sharding with learned costs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-pool", help="generate a synthetic table pool")
    _common(s)
    s.add_argument("-n", type=int, help="number of tables")
    s.set_defaults(fn=cmd_gen_pool)

    s = sub.add_parser("gen-workload", help="generate lookup indices for a pool")
    _common(s)
    s.add_argument("--pool", type=Path)
    s.set_defaults(fn=cmd_gen_workload)

    s = sub.add_parser("bench", help="micro-benchmark the shards of a plan")
    _common(s)
    _task_arg(s)
    s.add_argument("--plan", type=Path, help="plan file (default: a random plan)")
    s.add_argument("--exact", action="store_true", help="noiseless latency instead of the benchmark protocol")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("train", help="train the sharding agent")
    _common(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("shard", help="shard a task with a trained agent")
    _common(s)
    _task_arg(s)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--skip-norm-check", action="store_true")
    s.set_defaults(fn=cmd_shard)

    s = sub.add_parser("eval", help="score a saved plan")
    _common(s)
    _task_arg(s)
    s.add_argument("--plan", type=Path, required=True)
    s.set_defaults(fn=cmd_eval)

    for name, fn, help_ in (("compare", cmd_compare, "compare all algorithms on the test tasks"),
                            ("transfer", cmd_transfer, "unseen-table and scale-up transfer"),
                            ("ablate", cmd_ablate, "feature and cost-model ablations"),
                            ("search", cmd_search, "random-search curve against the other planners")):
        s = sub.add_parser(name, help=help_)
        _common(s)
        if name in ("transfer", "search"):
            s.add_argument("--checkpoint", type=Path)
        s.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return args.fn(args, cfg)
    except (ConfigError, WorkloadFormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
