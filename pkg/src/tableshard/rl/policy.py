"""LSTM policy-value network over the sharding MDP and its V-trace learner loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..costmodel import REPR_DIM, CostModel
from ..netcore import LSTM, MLP, ParamStore, adam_step, log_softmax, softmax
from ..simcost import CostSample
from ..tables import FEATURE_DIM
from .env import ShardingEnv
from .vtrace import VTraceConfig, vtrace_targets

STEP_DIM = 32
STATE_DIM = 64
COST_DIM = 32
COST_SKIP_GAIN = 10.0  # the skip weight moves this much faster than the Adam step


class PolicyValueNet:
    """Scores every shard with one shared head; any number of shards is accepted.

    state  = [table encoding (32) | step embedding (32)] -> 2-layer LSTM -> h (64)
    action = [sum of encodings over shard + candidate (32) | embedding of predicted cost over the cheapest (32)]
    score  = MLP([h | action | h * action]) - gain * w * (relative predicted cost) ; value = MLP(h)

    The skip weight ``w`` starts at zero, so an untrained policy is uniform.
    """

    def __init__(self, store: ParamStore, cost_model: CostModel, use_cost_model: bool = True):
        self.store = store
        self.cost_model = cost_model
        self.use_cost_model = use_cost_model
        self.step_embed = MLP(store, "step_embed", [1, STEP_DIM], out_activation="relu")
        self.lstm = LSTM(store, "lstm", STATE_DIM, 64, 2)
        self.cost_embed = MLP(store, "cost_embed", [1, COST_DIM], out_activation="relu")
        self.policy_head = MLP(store, "policy_head", [3 * 64, 128, 128, 64, 1], zero_last=True)
        self.value_head = MLP(store, "value_head", [64, 64, 1], zero_last=True)
        self.cost_skip = store.create("cost_skip/w", (1,), zero=True)

    @property
    def param_names(self) -> list[str]:
        return (
            self.cost_model.encoder_params
            + self.step_embed.param_names
            + self.lstm.param_names
            + self.cost_embed.param_names
            + self.policy_head.param_names
            + self.value_head.param_names
            + [self.cost_skip]
        )

    # -- shared pieces

    def action_table_reps(self, enc: np.ndarray, features: np.ndarray) -> np.ndarray:
        if self.use_cost_model:
            return enc
        # raw-feature ablation: zero-padded normalized features stand in for learned encodings
        out = np.zeros((len(features), REPR_DIM))
        out[:, :FEATURE_DIM] = features
        return out

    def _predicted_cost(self, reps: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
        """Predicted cost of each candidate shard relative to the cheapest one (standardized units)."""
        if not self.use_cost_model:
            return np.zeros(reps.shape[:-1])
        pred = self.cost_model.head_standardized(reps)
        lowest = np.min(pred if valid is None else np.where(valid, pred, np.inf), axis=-1, keepdims=True)
        return pred - lowest

    def _scores_forward(self, h: np.ndarray, reps: np.ndarray, valid: np.ndarray | None = None):
        """``h``: (..., 64); ``reps``: (..., K, 32) -> scores (..., K); ``valid`` masks padded shards."""
        pred = self._predicted_cost(reps, valid)  # treated as a constant input
        cemb, c_cache = self.cost_embed.forward(pred[..., None])
        act = np.concatenate([reps, cemb], axis=-1)
        hb = np.broadcast_to(h[..., None, :], act.shape)
        pin = np.concatenate([hb, act, hb * act], axis=-1)
        out, p_cache = self.policy_head.forward(pin)
        skip = -COST_SKIP_GAIN * pred
        w = self.store.params[self.cost_skip]
        return out[..., 0] + w[0] * skip, (hb, act, c_cache, p_cache, skip)

    def _scores_backward(self, dscores: np.ndarray, cache):
        hb, act, c_cache, p_cache, skip = cache
        self.store.grads[self.cost_skip][0] += float(np.sum(dscores * skip))
        dpin = self.policy_head.backward(dscores[..., None], p_cache)
        d_h = (dpin[..., :64] + dpin[..., 128:] * act).sum(axis=-2)
        d_act = dpin[..., 64:128] + dpin[..., 128:] * hb
        self.cost_embed.backward(d_act[..., REPR_DIM:], c_cache)
        return d_h, d_act[..., :REPR_DIM]

    # -- acting

    def encode_task(self, features: np.ndarray) -> "TaskEncoding":
        enc, _ = self.cost_model.encode(features)
        return TaskEncoding(enc, self.action_table_reps(enc, features))

    def step_state(self, enc: "TaskEncoding", position: int, step_aware: float, rstate):
        semb = self.step_embed(np.array([[step_aware]]))
        z = np.concatenate([enc.state_reps[position][None, :], semb], axis=-1)
        return self.lstm.step(rstate, z)

    def action_probs(self, h: np.ndarray, reps: np.ndarray) -> np.ndarray:
        scores, _ = self._scores_forward(h, reps)
        return softmax(scores)

    def value(self, h: np.ndarray) -> float:
        return float(self.value_head(h)[..., 0].reshape(-1)[0])


@dataclass
class TaskEncoding:
    state_reps: np.ndarray  # (n, 32) table encodings
    action_reps: np.ndarray  # (n, 32) per-table contribution to shard representations


def shard_sums(enc: TaskEncoding, assignment: np.ndarray, num_shards: int) -> np.ndarray:
    sums = np.zeros((num_shards, REPR_DIM))
    placed = assignment >= 0
    np.add.at(sums, assignment[placed], enc.action_reps[placed])
    return sums


def _packs(free: np.ndarray, sizes: np.ndarray) -> bool:
    """Best-fit decreasing of ``sizes`` into the ``free`` capacities."""
    free = free.copy()
    for s in np.sort(sizes)[::-1]:
        room = free - s
        if room.max() < 0:
            return False
        free[int(np.argmin(np.where(room >= 0, room, np.iinfo(np.int64).max)))] -= s
    return True


def admissible_argmax(probs: np.ndarray, env: ShardingEnv, state) -> int:
    """Most probable shard that has room for the next table and still leaves room for the largest ones to come.

    Falls back to the most probable shard with room, then to the one with most free memory.
    """
    task = env.task
    sizes = task.sizes
    placed = state.assignment >= 0
    free = np.asarray(task.mem_budget, dtype=np.int64) - np.bincount(
        state.assignment[placed], weights=sizes[placed], minlength=env.num_shards).astype(np.int64)
    size = sizes[state.next_table]
    fits = free >= size
    if not fits.any():
        return int(np.argmax(free))
    rest = sizes[list(state.order[state.t + 1:])]
    if len(rest) > env.num_shards:
        rest = np.partition(rest, len(rest) - env.num_shards)[-env.num_shards:]
    ranked = [int(k) for k in np.argsort(-probs, kind="stable") if fits[k]]
    for k in ranked:
        free[k] -= size
        ok = _packs(free, rest)
        free[k] += size
        if ok:
            return k
    return ranked[0]


def act(net: PolicyValueNet, env: ShardingEnv, state, rstate, mode: str = "sample",
        rng: np.random.Generator | None = None, enc: TaskEncoding | None = None,
        sums: np.ndarray | None = None):
    """Choose a shard for ``state.next_table``; returns ``(action, prob, rstate', probs)``.

    ``mode`` is ``"sample"`` (training, records the behavior probability) or
    ``"argmax"`` (deterministic inference over shards that still admit the table).
    ``enc``/``sums`` are caches the
    caller may keep across steps of one episode.
    """
    enc = enc if enc is not None else net.encode_task(env.features)
    if state.t == 0:
        rstate = net.lstm.zero_state(1)
    if sums is None:
        sums = shard_sums(enc, state.assignment, env.num_shards)
    pos = state.next_table
    rstate, h = net.step_state(enc, pos, state.step_aware, rstate)
    reps = sums + enc.action_reps[pos]
    probs = net.action_probs(h[0], reps)
    if mode == "argmax":
        a = admissible_argmax(probs, env, state)
    elif mode == "sample":
        rng = rng if rng is not None else np.random.default_rng()
        a = int(min(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"), len(probs) - 1))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return a, float(probs[a]), rstate, probs


# ---------------------------------------------------------------- rollouts


@dataclass
class Unroll:
    """``T`` steps of one task plus the observation after the last step (time-major)."""

    task_index: int
    num_shards: int
    positions: np.ndarray  # (T+1,)
    step_aware: np.ndarray  # (T+1,)
    assignments: np.ndarray  # (T+1, n)
    resets: np.ndarray  # (T+1,) episode starts at this step
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,)
    behavior_probs: np.ndarray  # (T,)
    episode_rewards: list[float] = field(default_factory=list)
    episode_feasible: list[bool] = field(default_factory=list)
    cost_samples: list[CostSample] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.actions)


def run_episode(net: PolicyValueNet, env: ShardingEnv, mode: str = "argmax",
                rng: np.random.Generator | None = None, episode_seed: int = 0):
    """Play one full episode; returns the terminal state and its reward."""
    enc = net.encode_task(env.features)
    state = env.reset(episode_seed=episode_seed)
    rstate = net.lstm.zero_state(1)
    sums = np.zeros((env.num_shards, REPR_DIM))
    reward = 0.0
    while not state.done:
        pos = state.next_table
        a, _, rstate, _ = act(net, env, state, rstate, mode, rng, enc, sums)
        state, reward, _ = env.step(state, a)
        sums[a] += enc.action_reps[pos]
    return state, reward


def episode_cost_samples(env: ShardingEnv, state) -> list[CostSample]:
    if state.costs is None:
        return []
    prov = "exact" if env.bench.exact else "bench"
    out = []
    for k, members in enumerate(env.plan(state).shard_positions()):
        if members:
            out.append(CostSample(env.features[members], state.costs[k], prov))
    return out


def rollout(net: PolicyValueNet, env: ShardingEnv, task_index: int, length: int,
            rng: np.random.Generator) -> Unroll:
    """Collect ``length`` sampled steps, starting a fresh episode and restarting at each end."""
    n, K = env.task.n_tables, env.num_shards
    enc = net.encode_task(env.features)
    positions = np.zeros(length + 1, dtype=np.int64)
    steps = np.zeros(length + 1)
    assigns = np.zeros((length + 1, n), dtype=np.int64)
    resets = np.zeros(length + 1, dtype=bool)
    actions = np.zeros(length, dtype=np.int64)
    rewards = np.zeros(length)
    dones = np.zeros(length, dtype=bool)
    bprobs = np.zeros(length)
    u = Unroll(task_index, K, positions, steps, assigns, resets, actions, rewards, dones, bprobs)

    state = env.reset(episode_seed=int(rng.integers(2**31)))
    rstate = net.lstm.zero_state(1)
    sums = np.zeros((K, REPR_DIM))
    for t in range(length + 1):
        positions[t] = state.next_table
        steps[t] = state.step_aware
        assigns[t] = state.assignment
        resets[t] = state.t == 0
        if t == length:
            break
        if state.t == 0:
            sums[:] = 0.0
        pos = state.next_table
        a, prob, rstate, _ = act(net, env, state, rstate, "sample", rng, enc, sums)
        state, r, done = env.step(state, a)
        sums[a] += enc.action_reps[pos]
        actions[t], rewards[t], dones[t], bprobs[t] = a, r, done, prob
        if done:
            u.episode_rewards.append(r)
            u.episode_feasible.append(state.costs is not None)
            u.cost_samples.extend(episode_cost_samples(env, state))
            state = env.reset(episode_seed=int(rng.integers(2**31)))
    return u


# ---------------------------------------------------------------- learner


@dataclass
class LossTerms:
    total: float
    policy: float
    baseline: float
    entropy: float
    mean_entropy: float
    vs: np.ndarray
    advantages: np.ndarray


def learner_loss(net: PolicyValueNet, unrolls: list[Unroll], features: dict[int, np.ndarray],
                 cfg: VTraceConfig, targets: tuple[np.ndarray, np.ndarray] | None = None,
                 backward: bool = True) -> LossTerms:
    """Summed V-trace actor-critic loss over a batch of equal-length unrolls.

    Gradients are accumulated into the store when ``backward`` is set. V-trace
    targets are constants of the loss; pass ``targets`` to pin them (gradient audits).
    """
    B = len(unrolls)
    T = unrolls[0].length
    if any(u.length != T for u in unrolls):
        raise ValueError("all unrolls in a batch must share one length")
    K_max = max(u.num_shards for u in unrolls)

    task_ids = sorted({u.task_index for u in unrolls})
    offsets, rows = {}, []
    start = 0
    for ti in task_ids:
        offsets[ti] = start
        rows.append(features[ti])
        start += len(features[ti])
    X_all = np.concatenate(rows, axis=0)
    E_all, enc_cache = net.cost_model.encode(X_all)
    R_all = net.action_table_reps(E_all, X_all)

    G = np.stack([offsets[u.task_index] + u.positions for u in unrolls], axis=1)  # (T+1, B)
    S = E_all[G]
    steps = np.stack([u.step_aware for u in unrolls], axis=1)[..., None]
    semb, s_cache = net.step_embed.forward(steps)
    Z = np.concatenate([S, semb], axis=-1)
    resets = np.stack([u.resets for u in unrolls], axis=1)
    Hs, _, l_cache = net.lstm.forward(Z, None, resets)
    V_out, v_cache = net.value_head.forward(Hs)
    V = V_out[..., 0]  # (T+1, B)

    reps = np.zeros((B, T, K_max, REPR_DIM))
    valid = np.zeros((B, K_max), dtype=bool)
    onehots = []
    for b, u in enumerate(unrolls):
        K = u.num_shards
        n = len(features[u.task_index])
        off = offsets[u.task_index]
        O = (u.assignments[:T, None, :] == np.arange(K)[None, :, None]).astype(float)  # (T, K, n)
        Rb = R_all[off: off + n]
        reps[b, :, :K] = O @ Rb + Rb[u.positions[:T]][:, None, :]
        valid[b, :K] = True
        onehots.append(O)

    Hb = Hs[:T].transpose(1, 0, 2)  # (B, T, 64)
    vmask = np.broadcast_to(valid[:, None, :], (B, T, K_max))
    scores, sc_cache = net._scores_forward(Hb, reps, vmask)
    scores = np.where(vmask, scores, -np.inf)
    logp = log_softmax(scores)
    pi = np.exp(logp)
    logp0 = np.where(vmask, logp, 0.0)
    ent = -np.sum(pi * logp0, axis=-1)  # (B, T)
    actions = np.stack([u.actions for u in unrolls], axis=0)  # (B, T)
    logp_a = np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]

    if targets is None:
        rewards = np.stack([u.rewards for u in unrolls], axis=1)
        dones = np.stack([u.dones for u in unrolls], axis=1)
        beh = np.stack([u.behavior_probs for u in unrolls], axis=1)
        vs, adv = vtrace_targets(rewards, V[:T], V[T], np.exp(logp_a).T, beh, dones, cfg)
    else:
        vs, adv = targets
    adv_bt = adv.T

    pg = -float(np.sum(adv_bt * logp_a))
    base = cfg.baseline_weight * float(np.sum((vs - V[:T]) ** 2))
    entropy_term = -cfg.entropy_weight * float(np.sum(ent))
    terms = LossTerms(pg + base + entropy_term, pg, base, entropy_term, float(np.mean(ent)), vs, adv)
    if not backward:
        return terms

    onehot_a = np.zeros_like(pi)
    np.put_along_axis(onehot_a, actions[..., None], 1.0, axis=-1)
    dscores = -adv_bt[..., None] * (onehot_a - pi) + cfg.entropy_weight * pi * (logp0 + ent[..., None])
    dscores = np.where(vmask, dscores, 0.0)
    d_hb, d_reps = net._scores_backward(dscores, sc_cache)

    dV = np.zeros_like(V)
    dV[:T] = -2.0 * cfg.baseline_weight * (vs - V[:T])
    dHs = net.value_head.backward(dV[..., None], v_cache)
    dHs[:T] += d_hb.transpose(1, 0, 2)
    dZ, _ = net.lstm.backward(dHs, l_cache)
    net.step_embed.backward(dZ[..., REPR_DIM:], s_cache)
    dE_all = np.zeros_like(E_all)
    np.add.at(dE_all, G, dZ[..., :REPR_DIM])
    if net.use_cost_model:
        for b, u in enumerate(unrolls):
            K = u.num_shards
            n = len(features[u.task_index])
            off = offsets[u.task_index]
            dr = d_reps[b, :, :K]  # (T, K, 32)
            dRb = np.einsum("tkn,tkd->nd", onehots[b], dr)
            np.add.at(dRb, u.positions[:T], dr.sum(axis=1))
            dE_all[off: off + n] += dRb
    net.cost_model.encoder.backward(dE_all, enc_cache)
    return terms


def learner_update(net: PolicyValueNet, unrolls: list[Unroll], features: dict[int, np.ndarray],
                   cfg: VTraceConfig, lr: float = 1e-3, clip: float = 40.0) -> dict:
    if not unrolls:
        return {}
    names = net.param_names
    net.store.zero_grad(names)
    terms = learner_loss(net, unrolls, features, cfg)
    grad_norm = adam_step(net.store, names, lr=lr, clip=clip, slot="policy_adam")
    ep = [r for u in unrolls for r in u.episode_rewards]
    return {
        "loss": terms.total,
        "policy_loss": terms.policy,
        "baseline_loss": terms.baseline,
        "entropy_loss": terms.entropy,
        "entropy": terms.mean_entropy,
        "grad_norm": grad_norm,
        "mean_train_reward": float(np.mean(ep)) if ep else float("nan"),
        "episodes": len(ep),
    }
