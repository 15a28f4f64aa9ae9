"""Neural multi-table cost model: per-table encoder, sum pooling, regression head."""

from __future__ import annotations

import logging
import threading
from collections import deque
from typing import Sequence

import numpy as np

from .netcore import MLP, DimensionError, ParamStore, adam_step
from .simcost import CostSample
from .tables import FEATURE_DIM, NormStats

log = logging.getLogger(__name__)

REPR_DIM = 32


class FingerprintMismatch(ValueError):
    pass


def segment_sum(rows: np.ndarray, lengths: Sequence[int]) -> np.ndarray:
    """Sum consecutive row blocks of the given lengths (zero rows for empty blocks)."""
    lengths = np.asarray(lengths, dtype=np.int64)
    out = np.zeros((len(lengths), rows.shape[1]))
    nonempty = lengths > 0
    if nonempty.any():
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])[nonempty]
        out[nonempty] = np.add.reduceat(rows, starts, axis=0)
    return out


_ROW_KEY = np.random.default_rng(12345).normal(size=FEATURE_DIM)


def unique_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct rows and the index of each input row among them.

    Sorting a 1-D projection is much faster than a lexicographic row sort; the
    result is verified and the exact routine takes over on a key collision.
    """
    _, first, inverse = np.unique(rows @ _ROW_KEY, return_index=True, return_inverse=True)
    uniq = rows[first]
    if not np.array_equal(uniq[inverse], rows):
        uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


class CostModel:
    """Predicts the latency of executing a set of tables together on one device.

    The table encoder is shared with the sharding policy; both see the same
    parameter arrays through the common :class:`ParamStore`.
    """

    def __init__(self, store: ParamStore, norm: NormStats | None = None,
                 hidden: int = 128, head_hidden: int = 64, sim_fingerprint: str | None = None):
        self.store = store
        self.norm = norm
        self.sim_fingerprint = sim_fingerprint
        self.encoder = MLP(store, "encoder", [FEATURE_DIM, hidden, REPR_DIM])
        self.head = MLP(store, "cost_head", [REPR_DIM, head_hidden, 1])
        self.target_scale: float | None = None

    @property
    def encoder_params(self) -> list[str]:
        return self.encoder.param_names

    @property
    def param_names(self) -> list[str]:
        return self.encoder.param_names + self.head.param_names

    @property
    def scale(self) -> float:
        return 1.0 if self.target_scale is None else self.target_scale

    def check_compatible(self, norm: NormStats) -> None:
        if self.norm is not None and norm.fingerprint() != self.norm.fingerprint():
            raise FingerprintMismatch(
                f"feature normalization {norm.fingerprint()} differs from the model's {self.norm.fingerprint()}"
            )

    def encode(self, features: np.ndarray):
        features = np.asarray(features, dtype=float)
        if features.ndim != 2 or features.shape[1] != FEATURE_DIM:
            raise DimensionError(f"table features must have shape (n, {FEATURE_DIM}), got {features.shape}")
        return self.encoder.forward(features)

    def head_standardized(self, reps: np.ndarray) -> np.ndarray:
        """Head output in units of ``target_scale``; ``reps`` is ``(..., 32)``."""
        return self.head(reps)[..., 0]

    def predict(self, features) -> float:
        """Latency (ms) of one table set; ``features`` is ``(n, 21)``, ``n`` may be 0."""
        features = np.asarray(features, dtype=float)
        if features.size == 0:
            features = np.zeros((0, FEATURE_DIM))
        elif features.ndim == 1:
            features = features[None, :]
        return float(self.predict_many([features])[0])

    def predict_many(self, feature_sets: Sequence[np.ndarray]) -> np.ndarray:
        lengths = [len(f) for f in feature_sets]
        if sum(lengths):
            rows = np.concatenate([np.asarray(f, dtype=float) for f in feature_sets if len(f)])
            enc, _ = self.encode(rows)
        else:
            enc = np.zeros((0, REPR_DIM))
        reps = segment_sum(enc, lengths)
        return self.scale * self.head_standardized(reps)

    def fit_scale(self, samples: Sequence[CostSample]) -> None:
        if self.target_scale is None and samples:
            self.target_scale = float(np.mean([s.latency_ms for s in samples]))

    def loss_and_backward(self, batch: Sequence[CostSample]) -> float:
        """Standardized MSE over ``batch``; adds its gradient to the store.

        Samples share tables, so each distinct feature row is encoded once and
        shard representations come from a (samples x distinct rows) count matrix.
        """
        lengths = [len(s.table_features) for s in batch]
        rows = np.concatenate([s.table_features for s in batch if len(s.table_features)] or [np.zeros((0, FEATURE_DIM))])
        uniq, inverse = unique_rows(rows)
        counts = np.zeros((len(batch), len(uniq)))
        np.add.at(counts, (np.repeat(np.arange(len(batch)), lengths), inverse), 1.0)
        enc, enc_cache = self.encode(uniq)
        reps = counts @ enc
        out, head_cache = self.head.forward(reps)
        target = np.array([s.latency_ms for s in batch]) / self.scale
        diff = out[:, 0] - target
        loss = float(np.mean(diff * diff))
        dout = (2.0 * diff / len(batch))[:, None]
        drep = self.head.backward(dout, head_cache)
        self.encoder.backward(counts.T @ drep, enc_cache)
        return loss

    def train_step(self, batch: Sequence[CostSample], lr: float = 1e-3, clip: float | None = 40.0) -> float:
        """One Adam step on the batch; returns the pre-update MSE in ms^2."""
        if not batch:
            log.warning("cost model train_step called with an empty batch; skipping")
            return float("nan")
        self.fit_scale(batch)
        names = self.param_names
        self.store.zero_grad(names)
        loss = self.loss_and_backward(batch)
        adam_step(self.store, names, lr=lr, clip=clip, slot="cost_adam")
        return loss * self.scale**2

    def to_meta(self) -> dict:
        return {
            "target_scale": self.target_scale,
            "norm": None if self.norm is None else self.norm.to_dict(),
            "sim_fingerprint": self.sim_fingerprint,
        }

    def load_meta(self, meta: dict) -> None:
        self.target_scale = meta.get("target_scale")
        self.norm = None if meta.get("norm") is None else NormStats.from_dict(meta["norm"])
        self.sim_fingerprint = meta.get("sim_fingerprint")


class CostBuffer:
    """FIFO ring buffer of cost samples; appends are atomic, sampling reads a snapshot."""

    def __init__(self, capacity: int = 5000):
        self.capacity = capacity
        self._items: deque[CostSample] = deque(maxlen=capacity)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._items)

    def append(self, sample: CostSample) -> None:
        with self._lock:
            self._items.append(sample)

    def extend(self, samples: Sequence[CostSample]) -> None:
        with self._lock:
            self._items.extend(samples)

    def snapshot(self) -> list[CostSample]:
        with self._lock:
            return list(self._items)

    def sample(self, rng: np.random.Generator, n: int) -> list[CostSample]:
        items = self.snapshot()
        if not items:
            return []
        idx = rng.integers(len(items), size=n)
        return [items[i] for i in idx]


def train_cost_model(model: CostModel, buffer: CostBuffer, steps: int, batch_size: int = 512,
                     lr: float = 1e-3, rng: np.random.Generator | None = None) -> list[float]:
    rng = rng if rng is not None else np.random.default_rng(0)
    losses = []
    for _ in range(steps):
        batch = buffer.sample(rng, batch_size)
        losses.append(model.train_step(batch, lr=lr))
    return losses
