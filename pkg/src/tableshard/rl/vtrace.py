"""V-trace value targets and policy-gradient advantages (time-major arrays)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class DataCorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class VTraceConfig:
    gamma: float = 1.0
    rho_bar: float = 1.0
    c_bar: float = 1.0
    unroll_length: int = 100
    entropy_weight: float = 0.001
    baseline_weight: float = 0.5

    def __post_init__(self):
        if self.rho_bar < self.c_bar:
            raise ValueError("V-trace requires rho_bar >= c_bar")
        if self.unroll_length < 1:
            raise ValueError("unroll_length must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def vtrace_targets(
    rewards: np.ndarray,
    values: np.ndarray,
    bootstrap_value,
    target_probs: np.ndarray,
    behavior_probs: np.ndarray,
    dones: np.ndarray | None = None,
    cfg: VTraceConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(vs, pg_advantages)`` for an unroll of length ``T`` (leading axis).

    ``values[t] = V(s_t)`` for ``t < T`` and ``bootstrap_value = V(s_T)``. A done
    flag at ``t`` cuts the discount between ``t`` and ``t + 1``.
    """
    cfg = cfg or VTraceConfig()
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    behavior_probs = np.asarray(behavior_probs, dtype=float)
    if np.any(behavior_probs <= 0) or not np.all(np.isfinite(behavior_probs)):
        raise DataCorruptionError("behavior probabilities must be positive and finite")
    ratio = np.asarray(target_probs, dtype=float) / behavior_probs
    rho = np.minimum(cfg.rho_bar, ratio)
    c = np.minimum(cfg.c_bar, ratio)
    disc = np.full_like(rewards, cfg.gamma)
    if dones is not None:
        disc = disc * (1.0 - np.asarray(dones, dtype=float))
    bootstrap = np.asarray(bootstrap_value, dtype=float)
    v_next = np.concatenate([values[1:], bootstrap[None]], axis=0)
    delta = rho * (rewards + disc * v_next - values)
    vs_minus_v = np.empty_like(values)
    acc = np.zeros_like(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        acc = delta[t] + disc[t] * c[t] * acc
        vs_minus_v[t] = acc
    vs = values + vs_minus_v
    vs_next = np.concatenate([vs[1:], bootstrap[None]], axis=0)
    advantages = rho * (rewards + disc * vs_next - values)
    return vs, advantages
