"""Analytic multi-table latency oracle and the micro-benchmark protocol around it.

The oracle reproduces the qualitative structure of embedding-bag kernel time:
dimension and lookup count dominate, hash size has a logarithmic effect,
skewed (cache-friendly) access lowers cost, and co-located tables are
sub-additive because they execute in parallel.

    single:  c0 + a * L * dim * cache(u) + b * dim * log10(1 + hash_size)
    shard:   c0 + max_m par(m) * (sum of the m largest w_t),  w_t = single_t - c0
    par(m) = (1 - rho) + rho / m,  cache(u) = cache_floor + (1 - cache_floor) * u

The shard term is ``max(max_t w_t, par(n) * sum_t w_t)`` taken over every
subset of the shard, so a shard is never faster than any subset of its tables.

with ``L`` the batch's lookups and ``u`` the distinct-row fraction of them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .tables import ConfigError, ShardingPlan, ShardingTask, TableDesc, Workload


@dataclass(frozen=True)
class SimParams:
    c0: float = 0.05
    a: float = 2e-6
    b: float = 0.001
    rho: float = 0.5
    cache_floor: float = 0.5
    noise_sigma: float = 0.03
    outlier_prob: float = 0.05
    outlier_scale: float = 3.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"SimParams.{f.name} must be non-negative")
        if self.rho >= 1:
            raise ConfigError("SimParams.rho must be < 1")
        if not 0 < self.cache_floor <= 1:
            raise ConfigError("SimParams.cache_floor must lie in (0, 1]")
        if self.outlier_prob > 1:
            raise ConfigError("SimParams.outlier_prob must be <= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SimParams fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def noiseless(self) -> "SimParams":
        return SimParams(**{**self.to_dict(), "noise_sigma": 0.0, "outlier_prob": 0.0})

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class CostSample:
    table_features: np.ndarray  # (n_tables, 21), normalized
    latency_ms: float
    provenance: str = "exact"  # "exact" or "bench" (trimmed noisy micro-benchmark)

    def __post_init__(self):
        if not self.latency_ms > 0:
            raise ValueError("latency_ms must be positive")
        if self.provenance not in ("exact", "bench"):
            raise ValueError(f"unknown provenance {self.provenance!r}")


def _cache_factor(u: float, p: SimParams) -> float:
    return p.cache_floor + (1.0 - p.cache_floor) * u


def single_latency(table: TableDesc, workload: Workload, p: SimParams) -> float:
    """Latency in ms of running ``table`` alone on the workload's batch."""
    if table.id not in workload:
        raise KeyError(f"table {table.id} is not part of this workload")
    st = workload.stats(table.id)
    n = st.n_lookups
    u = min(1.0, st.n_distinct / n) if n else 1.0
    return (
        p.c0
        + p.a * n * table.dim * _cache_factor(u, p)
        + p.b * table.dim * math.log10(1.0 + table.hash_size)
    )


def marginal_costs(tables: Sequence[TableDesc], workload: Workload, p: SimParams) -> np.ndarray:
    """Per-table ``single_latency - c0``."""
    return np.array([single_latency(t, workload, p) - p.c0 for t in tables], dtype=float)


def par(m, p: SimParams):
    return (1.0 - p.rho) + p.rho / np.maximum(m, 1)


def shard_latency_from_marginals(w: np.ndarray, p: SimParams) -> float:
    if len(w) == 0:
        return p.c0
    top = np.cumsum(np.sort(np.asarray(w, dtype=float))[::-1])
    m = np.arange(1, len(top) + 1)
    return p.c0 + float(np.max(par(m, p) * top))


def shard_latency(tables_in_shard: Sequence[TableDesc], workload: Workload, p: SimParams) -> float:
    return shard_latency_from_marginals(marginal_costs(tables_in_shard, workload, p), p)


def plan_latencies(assignment: np.ndarray, w: np.ndarray, num_shards: int, p: SimParams) -> np.ndarray:
    """Exact per-shard latencies for an assignment over tables with marginals ``w``."""
    assignment = np.asarray(assignment)
    w = np.asarray(w, dtype=float)
    out = np.zeros(num_shards)
    if len(w):
        # group by shard, largest marginal first, then running sums per shard
        order = np.lexsort((-w, assignment))
        a, ws = assignment[order], w[order]
        start = np.r_[True, a[1:] != a[:-1]]
        seg = np.flatnonzero(start)
        csum = np.cumsum(ws)
        base = np.repeat(csum[seg] - ws[seg], np.diff(np.r_[seg, len(ws)]))
        rank = np.arange(len(ws)) - np.repeat(seg, np.diff(np.r_[seg, len(ws)])) + 1
        np.maximum.at(out, a, par(rank, p) * (csum - base))
    return p.c0 + out


def _noisy(latency: float, p: SimParams, rng: np.random.Generator) -> float:
    # both draws always happen so the stream advances identically in every configuration
    z = rng.standard_normal()
    spike = rng.random() < p.outlier_prob
    value = latency * math.exp(p.noise_sigma * z)
    return value * p.outlier_scale if spike else value


def benchmark_op(
    shard: Sequence[TableDesc], workload: Workload, p: SimParams, rng: np.random.Generator
) -> float:
    """One timed run: cache flush, event-timed execution, possibly an anomalous sample."""
    return _noisy(shard_latency(shard, workload, p), p, rng)


@dataclass(frozen=True)
class BenchConfig:
    warmup: int = 5
    measure: int = 10
    trim: int = 2
    exact: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.warmup < 0 or self.measure < 1 or self.trim < 0:
            raise ConfigError("warmup/measure/trim must be non-negative (measure >= 1)")
        if self.measure - 2 * self.trim < 1:
            raise ConfigError(
                f"measure - 2 * trim must be >= 1 (got B={self.measure}, R={self.trim})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        return cls(**d)


def trimmed_mean(samples: Sequence[float], trim: int) -> float:
    s = sorted(samples)
    kept = s[trim: len(s) - trim]
    if not kept:
        raise ConfigError("trim removes every sample")
    # offset form keeps the mean of identical samples exact
    base = kept[0]
    return float(base + sum(x - base for x in kept) / len(kept))


def _micro_benchmark_latency(
    latency: float, p: SimParams, W: int, B: int, R: int, rng: np.random.Generator
) -> tuple[float, list[float]]:
    if B - 2 * R < 1:
        raise ConfigError(f"measure - 2 * trim must be >= 1 (got B={B}, R={R})")
    # the simulator holds no warm state; warmup calls only consume the stream
    for _ in range(W):
        _noisy(latency, p, rng)
    samples = [_noisy(latency, p, rng) for _ in range(B)]
    return trimmed_mean(samples, R), samples


def micro_benchmark(
    shard: Sequence[TableDesc],
    workload: Workload,
    p: SimParams,
    W: int = 5,
    B: int = 10,
    R: int = 2,
    rng: np.random.Generator | None = None,
    return_samples: bool = False,
):
    """Warm up ``W`` times, time ``B`` runs, drop the ``R`` highest and lowest, average."""
    if B - 2 * R < 1:
        raise ConfigError(f"measure - 2 * trim must be >= 1 (got B={B}, R={R})")
    rng = rng if rng is not None else np.random.default_rng(0)
    est, samples = _micro_benchmark_latency(shard_latency(shard, workload, p), p, W, B, R, rng)
    return (est, samples) if return_samples else est


def shard_rng(seed, shard_index: int) -> np.random.Generator:
    base = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng(base + [int(shard_index)])


def measure_costs(
    assignment: np.ndarray,
    w: np.ndarray,
    num_shards: int,
    p: SimParams,
    bench: BenchConfig,
    seed=None,
) -> np.ndarray:
    """Per-shard cost vector from precomputed marginals; the fast path of :func:`measure_plan`."""
    exact = plan_latencies(assignment, w, num_shards, p)
    if bench.exact:
        return exact
    seed = bench.seed if seed is None else seed
    out = np.empty(num_shards)
    for k in range(num_shards):
        out[k], _ = _micro_benchmark_latency(
            exact[k], p, bench.warmup, bench.measure, bench.trim, shard_rng(seed, k)
        )
    return out


def measure_plan(
    plan: ShardingPlan,
    task: ShardingTask,
    workload: Workload,
    p: SimParams,
    bench: BenchConfig | None = None,
    seed=None,
) -> list[float]:
    """Cost vector of a plan, one micro-benchmark (or exact latency) per shard.

    Shard ``k`` draws noise from its own stream ``(seed, k)``.
    """
    bench = bench or BenchConfig()
    if plan.num_shards != task.num_shards or len(plan.assignment) != task.n_tables:
        raise ValueError(
            f"plan ({len(plan.assignment)} tables, K={plan.num_shards}) does not match "
            f"task ({task.n_tables} tables, K={task.num_shards})"
        )
    w = marginal_costs(task.tables, workload, p)
    return measure_costs(np.asarray(plan.assignment), w, task.num_shards, p, bench, seed).tolist()
