"""Embedding table descriptions, synthetic workloads, table features and file I/O."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

BYTES_PER_PARAM = 2
N_BINS = 17
FEATURE_DIM = 21
GB = 1024**3

# upper edges of the frequency bins (0,1], (1,2], (2,4], ..., (16384,32768]; the last bin is open
BIN_EDGES = np.concatenate([[1], 2 ** np.arange(1, 16)]).astype(np.int64)

FEATURE_GROUPS = ("dim", "hash", "pooling", "size", "distribution")
_GROUP_SLICES = {
    "dim": slice(0, 1),
    "hash": slice(1, 2),
    "pooling": slice(2, 3),
    "size": slice(3, 4),
    "distribution": slice(4, 21),
}

WORKLOAD_MAGIC = "# tableshard-workload"
POOL_MAGIC = "# tableshard-pool"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid generator or experiment configuration."""


class InvalidTableError(ValueError):
    pass


class InfeasibleError(ValueError):
    """Tables cannot fit into the aggregate memory budget."""

    def __init__(self, deficit: int, message: str | None = None):
        self.deficit = deficit
        super().__init__(message or f"total table bytes exceed total budget by {deficit} bytes")


class WorkloadFormatError(ValueError):
    """Base class for workload / pool file parse errors."""

    def __init__(self, message: str, table_id: int | None = None):
        self.table_id = table_id
        if table_id is not None:
            message = f"table {table_id}: {message}"
        super().__init__(message)


class HeaderError(WorkloadFormatError):
    pass


class TruncatedError(WorkloadFormatError):
    pass


class OffsetError(WorkloadFormatError):
    pass


class IndexRangeError(WorkloadFormatError):
    pass


@dataclass(frozen=True)
class TableDesc:
    id: int
    dim: int
    hash_size: int
    pooling_mean: float
    access_ratio: float
    bytes_per_param: int = BYTES_PER_PARAM

    def __post_init__(self):
        if self.dim < 1 or self.bytes_per_param < 1:
            raise InvalidTableError(f"table {self.id}: dim and bytes_per_param must be positive")
        if self.hash_size < 1:
            raise InvalidTableError(f"table {self.id}: hash_size must be >= 1, got {self.hash_size}")
        if self.pooling_mean < 0:
            raise InvalidTableError(f"table {self.id}: negative pooling_mean")
        if not 0.0 < self.access_ratio <= 1.0:
            raise InvalidTableError(f"table {self.id}: access_ratio must lie in (0, 1]")

    @property
    def size_bytes(self) -> int:
        return self.dim * self.hash_size * self.bytes_per_param

    @property
    def size_gb(self) -> float:
        return self.size_bytes / GB

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TableDesc":
        return cls(
            id=int(d["id"]),
            dim=int(d["dim"]),
            hash_size=int(d["hash_size"]),
            pooling_mean=float(d["pooling_mean"]),
            access_ratio=float(d["access_ratio"]),
            bytes_per_param=int(d.get("bytes_per_param", BYTES_PER_PARAM)),
        )


@dataclass(frozen=True)
class GeneratorConfig:
    """Distribution targets for synthetic table pools and their lookup streams.

    Hash sizes and access ratios are log-uniform; table pooling factors follow a
    Lomax (Pareto II) law clipped at ``pooling_cap``; per-query lookup counts
    are a multinomial split of the table total with Pareto-distributed weights.
    """

    hash_min: int = 1_000
    hash_max: int = 10_000_000
    pooling_shape: float = 2.0
    pooling_scale: float = 15.0
    pooling_cap: float = 193.0
    dims: tuple[int, ...] = (16, 32)
    access_min: float = 1e-3
    access_max: float = 1.0
    zipf_exponent: float = 1.05
    query_shape: float = 2.5

    def validate(self) -> None:
        if not 1 <= self.hash_min <= self.hash_max:
            raise ConfigError(f"invalid hash range [{self.hash_min}, {self.hash_max}]")
        if not 0 < self.access_min <= self.access_max <= 1.0:
            raise ConfigError(f"invalid access_ratio range [{self.access_min}, {self.access_max}]")
        if not self.dims or any(int(d) < 1 for d in self.dims):
            raise ConfigError("dims must be a non-empty set of positive integers")
        if self.pooling_shape <= 0 or self.pooling_scale < 0 or self.pooling_cap < 0:
            raise ConfigError("pooling law parameters must be positive")
        if self.zipf_exponent <= 0 or self.query_shape <= 0:
            raise ConfigError("zipf_exponent and query_shape must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        d = dict(d)
        if "dims" in d:
            d["dims"] = tuple(int(x) for x in d["dims"])
        return cls(**d)


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return float(lo)
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def generate_table(seed: int, table_id: int, cfg: GeneratorConfig) -> TableDesc:
    rng = np.random.default_rng([seed, 0, table_id])
    hash_size = int(round(_log_uniform(rng, cfg.hash_min, cfg.hash_max)))
    hash_size = min(max(hash_size, cfg.hash_min), cfg.hash_max)
    u = rng.random()
    pooling = cfg.pooling_scale * ((1.0 - u) ** (-1.0 / cfg.pooling_shape) - 1.0)
    pooling = round(min(pooling, cfg.pooling_cap), 2)
    dim = int(cfg.dims[int(rng.integers(len(cfg.dims)))])
    access = _log_uniform(rng, cfg.access_min, cfg.access_max)
    return TableDesc(
        id=table_id,
        dim=dim,
        hash_size=hash_size,
        pooling_mean=pooling,
        access_ratio=min(access, 1.0),
    )


def generate_pool(seed: int, n_tables: int, cfg: GeneratorConfig | None = None) -> list[TableDesc]:
    """Generate ``n_tables`` tables with dense ids ``0..n-1``.

    Table ``i`` depends only on ``(seed, i)``, so a larger pool extends a smaller
    one generated with the same seed.
    """
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    if n_tables < 1:
        raise ConfigError("n_tables must be >= 1")
    return [generate_table(seed, i, cfg) for i in range(n_tables)]


@dataclass(frozen=True, eq=False)
class TableLookups:
    """One table's batch of lookups in embedding-bag layout."""

    table: TableDesc
    indices: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        self.indices.setflags(write=False)
        self.offsets.setflags(write=False)

    @property
    def table_id(self) -> int:
        return self.table.id

    def __eq__(self, other):
        if not isinstance(other, TableLookups):
            return NotImplemented
        return (
            self.table == other.table
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.offsets, other.offsets)
        )


@dataclass(frozen=True)
class LookupStats:
    n_lookups: int
    n_distinct: int
    bin_counts: np.ndarray  # distinct rows per frequency bin


class Workload:
    """Per-table lookup streams for one batch, ordered by ``(table_id, batch_offset)``."""

    def __init__(self, batch_size: int, per_table: Iterable[TableLookups]):
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.batch_size = int(batch_size)
        items = sorted(per_table, key=lambda t: t.table_id)
        self._by_id = {t.table_id: t for t in items}
        if len(self._by_id) != len(items):
            raise ValueError("duplicate table ids in workload")
        self._stats: dict[int, LookupStats] = {}

    @property
    def per_table(self) -> list[TableLookups]:
        return list(self._by_id.values())

    @property
    def table_ids(self) -> list[int]:
        return list(self._by_id)

    @property
    def tables(self) -> list[TableDesc]:
        return [t.table for t in self._by_id.values()]

    def __contains__(self, table_id: int) -> bool:
        return table_id in self._by_id

    def __getitem__(self, table_id: int) -> TableLookups:
        try:
            return self._by_id[table_id]
        except KeyError:
            raise KeyError(f"table {table_id} is not part of this workload") from None

    def __len__(self) -> int:
        return len(self._by_id)

    def __eq__(self, other):
        if not isinstance(other, Workload):
            return NotImplemented
        return self.batch_size == other.batch_size and self.per_table == other.per_table

    def subset(self, table_ids: Iterable[int]) -> "Workload":
        return Workload(self.batch_size, [self[i] for i in table_ids])

    def merged(self, other: "Workload") -> "Workload":
        if other.batch_size != self.batch_size:
            raise ValueError("cannot merge workloads with different batch sizes")
        by_id = dict(self._by_id)
        by_id.update(other._by_id)
        return Workload(self.batch_size, by_id.values())

    def stats(self, table_id: int) -> LookupStats:
        st = self._stats.get(table_id)
        if st is None:
            st = lookup_stats(self[table_id].indices)
            self._stats[table_id] = st
        return st

    def pooling_factor(self, table_id: int) -> float:
        return self.stats(table_id).n_lookups / self.batch_size


def lookup_stats(indices: np.ndarray) -> LookupStats:
    if len(indices) == 0:
        return LookupStats(0, 0, np.zeros(N_BINS, dtype=np.int64))
    _, counts = np.unique(indices, return_counts=True)
    bins = np.searchsorted(BIN_EDGES, counts, side="left")
    return LookupStats(
        n_lookups=int(len(indices)),
        n_distinct=int(len(counts)),
        bin_counts=np.bincount(bins, minlength=N_BINS).astype(np.int64),
    )


def _coprime_multiplier(rng: np.random.Generator, n: int) -> int:
    if n <= 2:
        return 1
    while True:
        a = int(rng.integers(1, n))
        if math.gcd(a, n) == 1:
            return a


def generate_table_lookups(
    seed: int, table: TableDesc, batch_size: int, cfg: GeneratorConfig | None = None
) -> TableLookups:
    cfg = cfg or GeneratorConfig()
    if table.hash_size < 1:
        raise InvalidTableError(f"table {table.id}: hash_size must be >= 1")
    rng = np.random.default_rng([seed, 1, table.id])
    total = int(round(table.pooling_mean * batch_size))
    if total == 0:
        return TableLookups(table, np.zeros(0, np.int64), np.zeros(batch_size + 1, np.int64))

    weights = (1.0 - rng.random(batch_size)) ** (-1.0 / cfg.query_shape)
    counts = rng.multinomial(total, weights / weights.sum())

    n_warm = max(1, min(table.hash_size, math.ceil(table.access_ratio * table.hash_size - 1e-9)))
    s = cfg.zipf_exponent
    u = rng.random(total)
    if abs(s - 1.0) < 1e-12:
        x = np.exp(u * math.log(n_warm + 1.0))
    else:
        top = (n_warm + 1.0) ** (1.0 - s)
        x = (1.0 + u * (top - 1.0)) ** (1.0 / (1.0 - s))
    ranks = np.clip(np.floor(x).astype(np.int64) - 1, 0, n_warm - 1)

    # seeded affine bijection on [0, hash_size) stands in for a full row permutation
    mult = _coprime_multiplier(rng, table.hash_size)
    shift = int(rng.integers(table.hash_size))
    indices = (ranks * mult + shift) % table.hash_size
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return TableLookups(table, indices.astype(np.int64), offsets)


def generate_workload(
    seed: int,
    tables: Sequence[TableDesc],
    batch_size: int = 1024,
    cfg: GeneratorConfig | None = None,
) -> Workload:
    """Draw one batch of lookups for every table.

    Each table's stream depends only on ``(seed, table.id)``.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    return Workload(batch_size, [generate_table_lookups(seed, t, batch_size, cfg) for t in tables])


# ---------------------------------------------------------------- features


@dataclass(frozen=True)
class FeatureMask:
    enabled: frozenset = field(default_factory=lambda: frozenset(FEATURE_GROUPS))

    def __post_init__(self):
        bad = set(self.enabled) - set(FEATURE_GROUPS)
        if bad:
            raise ConfigError(f"unknown feature groups: {sorted(bad)}")

    @classmethod
    def all(cls) -> "FeatureMask":
        return cls(frozenset(FEATURE_GROUPS))

    @classmethod
    def only(cls, *groups: str) -> "FeatureMask":
        return cls(frozenset(groups))

    def without(self, *groups: str) -> "FeatureMask":
        return FeatureMask(self.enabled - set(groups))

    def vector(self) -> np.ndarray:
        m = np.zeros(FEATURE_DIM)
        for g in self.enabled:
            m[_GROUP_SLICES[g]] = 1.0
        return m

    def to_list(self) -> list[str]:
        return [g for g in FEATURE_GROUPS if g in self.enabled]


@dataclass(frozen=True)
class NormStats:
    """Mean/std of dim, hash size and pooling factor over a training pool."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(float(x) for x in d["mean"]), tuple(float(x) for x in d["std"]))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict()).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class FeatureVector:
    raw: np.ndarray
    normalized: np.ndarray


def compute_norm_stats(pool: Sequence[TableDesc], workload: Workload) -> NormStats:
    if not pool:
        raise ValueError("pool must be non-empty")
    vals = np.array([[t.dim, t.hash_size, workload.pooling_factor(t.id)] for t in pool], dtype=float)
    return NormStats(tuple(vals.mean(axis=0).tolist()), tuple(vals.std(axis=0).tolist()))


def bin_ratios(stats: LookupStats) -> np.ndarray:
    if stats.n_distinct == 0:
        return np.zeros(N_BINS)
    return stats.bin_counts / stats.n_distinct


def extract_features(
    table: TableDesc,
    workload: Workload,
    norm: NormStats,
    mask: FeatureMask | None = None,
) -> FeatureVector:
    st = workload.stats(table.id)
    raw = np.empty(FEATURE_DIM)
    raw[0] = table.dim
    raw[1] = table.hash_size
    raw[2] = st.n_lookups / workload.batch_size
    raw[3] = table.size_gb
    raw[4:] = bin_ratios(st)
    normalized = raw.copy()
    for j in range(3):
        normalized[j] = raw[j] - norm.mean[j]
        if norm.std[j] > 0:
            normalized[j] /= norm.std[j]
    if mask is not None:
        m = mask.vector()
        raw = raw * m
        normalized = normalized * m
    return FeatureVector(raw, normalized)


def feature_matrix(
    tables: Sequence[TableDesc],
    workload: Workload,
    norm: NormStats,
    mask: FeatureMask | None = None,
) -> np.ndarray:
    """Normalized features, one row per table."""
    if not tables:
        return np.zeros((0, FEATURE_DIM))
    return np.stack([extract_features(t, workload, norm, mask).normalized for t in tables])


# ---------------------------------------------------------------- tasks and plans


def default_num_shards(n_tables: int) -> int:
    return max(1, math.ceil(n_tables / 10))


@dataclass(frozen=True)
class ShardingTask:
    tables: tuple[TableDesc, ...]
    num_shards: int
    mem_budget: tuple[int, ...]

    def __post_init__(self):
        if self.num_shards < 1:
            raise ConfigError("num_shards must be >= 1")
        if len(self.mem_budget) != self.num_shards:
            raise ConfigError("mem_budget must have one entry per shard")
        if any(b <= 0 for b in self.mem_budget):
            raise ConfigError("memory budgets must be positive")

    @classmethod
    def build(
        cls,
        tables: Sequence[TableDesc],
        num_shards: int | None = None,
        budget_factor: float = 1.6,
    ) -> "ShardingTask":
        """Uniform budgets of ``budget_factor * total_bytes / K``."""
        k = num_shards or default_num_shards(len(tables))
        total = sum(t.size_bytes for t in tables)
        budget = max(1, math.ceil(budget_factor * total / k))
        return cls(tuple(tables), k, (budget,) * k)

    @property
    def n_tables(self) -> int:
        return len(self.tables)

    @property
    def table_ids(self) -> list[int]:
        return [t.id for t in self.tables]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([t.size_bytes for t in self.tables], dtype=np.int64)

    def deficit(self) -> int:
        return int(self.sizes.sum()) - int(sum(self.mem_budget))

    def check_aggregate_memory(self) -> None:
        d = self.deficit()
        if d > 0:
            raise InfeasibleError(d)

    def to_dict(self) -> dict:
        return {
            "table_ids": self.table_ids,
            "num_shards": self.num_shards,
            "mem_budget": list(self.mem_budget),
        }

    def fingerprint(self) -> str:
        payload = {"tables": [t.to_dict() for t in self.tables], **self.to_dict()}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ShardingPlan:
    """Table-to-shard mapping; ``assignment[i]`` is the shard of ``task.tables[i]``."""

    assignment: tuple[int, ...]
    num_shards: int
    table_ids: tuple[int, ...]
    mem_used: tuple[int, ...]

    @classmethod
    def from_assignment(cls, task: ShardingTask, assignment: Sequence[int]) -> "ShardingPlan":
        a = np.asarray(assignment, dtype=np.int64)
        if a.shape != (task.n_tables,):
            raise ValueError(f"assignment has {a.size} entries for {task.n_tables} tables")
        if a.size and (a.min() < 0 or a.max() >= task.num_shards):
            raise ValueError("assignment values must lie in [0, K)")
        mem = np.zeros(task.num_shards, dtype=np.int64)
        np.add.at(mem, a, task.sizes)
        return cls(tuple(int(x) for x in a), task.num_shards, tuple(task.table_ids), tuple(int(x) for x in mem))

    @property
    def shard_members(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.num_shards)]
        for tid, k in zip(self.table_ids, self.assignment):
            out[k].append(tid)
        return out

    def shard_positions(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.num_shards)]
        for i, k in enumerate(self.assignment):
            out[k].append(i)
        return out

    def is_feasible(self, task: ShardingTask) -> bool:
        return all(u <= b for u, b in zip(self.mem_used, task.mem_budget))

    def overflow_ratio(self, task: ShardingTask) -> float:
        return max((u - b) / b for u, b in zip(self.mem_used, task.mem_budget))


# ---------------------------------------------------------------- file I/O


def _table_header(t: TableDesc) -> dict:
    return t.to_dict()


def save_pool(path, tables: Sequence[TableDesc]) -> None:
    header = {"version": FORMAT_VERSION, "kind": "pool", "num_tables": len(tables),
              "tables": [_table_header(t) for t in tables]}
    with open(path, "w") as f:
        f.write(f"{POOL_MAGIC} v{FORMAT_VERSION}\n")
        f.write(json.dumps(header, sort_keys=True) + "\n")


def _read_header(f, magic: str, kind: str) -> dict:
    first = f.readline()
    if not first.startswith(magic.encode()):
        raise HeaderError(f"missing '{magic}' magic line")
    line = f.readline()
    if not line.endswith(b"\n"):
        raise HeaderError("header line is truncated")
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise HeaderError(f"malformed header: {e}") from None
    if not isinstance(header, dict) or "version" not in header:
        raise HeaderError("header has no version field")
    if header["version"] != FORMAT_VERSION:
        raise HeaderError(f"unsupported version {header['version']}")
    if header.get("kind") != kind:
        raise HeaderError(f"expected kind '{kind}', got {header.get('kind')!r}")
    for key in ("num_tables", "tables"):
        if key not in header:
            raise HeaderError(f"header missing '{key}'")
    if len(header["tables"]) != header["num_tables"]:
        raise HeaderError("num_tables does not match table metadata")
    return header


def _parse_table(meta: dict) -> TableDesc:
    try:
        return TableDesc.from_dict(meta)
    except (KeyError, TypeError, ValueError) as e:
        raise HeaderError(f"bad table metadata ({e})", meta.get("id") if isinstance(meta, dict) else None) from None


def load_pool(path) -> list[TableDesc]:
    with open(path, "rb") as f:
        header = _read_header(f, POOL_MAGIC, "pool")
    return [_parse_table(m) for m in header["tables"]]


def save_workload(path, workload: Workload) -> None:
    """Write a workload file.

    Layout: a magic line ``# tableshard-workload v1``, one JSON header line
    (version, batch_size, num_tables, per-table metadata including
    ``num_indices``), then for each table in ascending id order its indices
    followed by its ``batch_size + 1`` offsets, all as little-endian int64.
    """
    metas = []
    for tl in workload.per_table:
        m = _table_header(tl.table)
        m["num_indices"] = int(len(tl.indices))
        metas.append(m)
    header = {
        "version": FORMAT_VERSION,
        "kind": "workload",
        "batch_size": workload.batch_size,
        "num_tables": len(metas),
        "dtype": "<i8",
        "tables": metas,
    }
    with open(path, "wb") as f:
        f.write(f"{WORKLOAD_MAGIC} v{FORMAT_VERSION}\n".encode())
        f.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for tl in workload.per_table:
            f.write(np.asarray(tl.indices, dtype="<i8").tobytes())
            f.write(np.asarray(tl.offsets, dtype="<i8").tobytes())


def _read_array(f, count: int, table_id: int) -> np.ndarray:
    nbytes = 8 * count
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise TruncatedError("payload ends early", table_id)
    return np.frombuffer(buf, dtype="<i8").astype(np.int64)


def load_workload(path) -> Workload:
    with open(path, "rb") as f:
        header = _read_header(f, WORKLOAD_MAGIC, "workload")
        batch = header.get("batch_size")
        if not isinstance(batch, int) or batch < 1:
            raise HeaderError("batch_size must be a positive integer")
        items = []
        last_id = -1
        for meta in header["tables"]:
            table = _parse_table(meta)
            if table.id <= last_id:
                raise HeaderError("tables not in ascending id order", table.id)
            last_id = table.id
            n = meta.get("num_indices")
            if not isinstance(n, int) or n < 0:
                raise HeaderError("num_indices missing or invalid", table.id)
            indices = _read_array(f, n, table.id)
            offsets = _read_array(f, batch + 1, table.id)
            if offsets[0] != 0:
                raise OffsetError(f"offsets must start at 0, got {offsets[0]}", table.id)
            if np.any(np.diff(offsets) < 0):
                raise OffsetError("offsets are not nondecreasing", table.id)
            if offsets[-1] != n:
                raise OffsetError(f"last offset {offsets[-1]} != number of indices {n}", table.id)
            if n and (indices.min() < 0 or indices.max() >= table.hash_size):
                raise IndexRangeError(f"index outside [0, {table.hash_size})", table.id)
            items.append(TableLookups(table, indices, offsets))
        if f.read(1):
            raise WorkloadFormatError("trailing bytes after last table")
    return Workload(batch, items)
