"""Small hand-differentiated network kernel (float64, numpy only).

Layers keep no state between calls: ``forward`` returns an output and a cache,
``backward`` consumes the cache, accumulates parameter gradients into the
owning :class:`ParamStore` and returns the input gradient.
"""

from __future__ import annotations

import json
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

NETCORE_VERSION = 1
CONTAINER_MAGIC = "# tableshard-container"


class DimensionError(ValueError):
    pass


class StateMismatchError(ValueError):
    pass


class ParamStore:
    """Named parameters, their gradient slots and optimizer moments."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.version = NETCORE_VERSION
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.slots: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def create(self, name: str, shape: Sequence[int], fan_in: int | None = None, zero: bool = False) -> str:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if zero or fan_in is None:
            value = np.zeros(shape)
        else:
            rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        self.params[name] = value
        self.grads[name] = np.zeros(shape)
        return name

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self, names: Iterable[str] | None = None) -> None:
        for n in self.params if names is None else names:
            self.grads[n].fill(0.0)

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            if self.params[k].shape != v.shape:
                raise DimensionError(f"snapshot shape mismatch for {k}")
            self.params[k][...] = v

    # serialization

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"slot/{k}": v for k, v in self.slots.items()})
        return out

    def state_meta(self) -> dict:
        return {"netcore_version": self.version, "seed": self.seed, "steps": dict(sorted(self.steps.items()))}

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        if meta.get("netcore_version") != self.version:
            raise StateMismatchError(f"checkpoint netcore version {meta.get('netcore_version')} != {self.version}")
        for key, v in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                if name not in self.params or self.params[name].shape != v.shape:
                    raise DimensionError(f"parameter {name!r} missing or reshaped")
                self.params[name][...] = v
            elif kind == "slot":
                self.slots[name] = v.copy()
        self.steps = {k: int(v) for k, v in meta.get("steps", {}).items()}


# ---------------------------------------------------------------- activations


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "linear":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(kind: str, z: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return dy * (z > 0)
    if kind == "tanh":
        return dy * (1.0 - y * y)
    return dy


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Dense:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 activation: str = "relu", zero_init: bool = False):
        self.store, self.name = store, name
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        self.W = store.create(f"{name}/W", (n_in, n_out), fan_in=n_in, zero=zero_init)
        self.b = store.create(f"{name}/b", (n_out,), fan_in=n_in, zero=zero_init)

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"layer {self.name}: expected input width {self.n_in}, got {x.shape[-1]}")
        z = x @ self.store.params[self.W] + self.store.params[self.b]
        y = _act(self.activation, z)
        return y, (x, z, y)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, z, y = cache
        dz = _act_grad(self.activation, z, y, dy)
        dz2 = dz.reshape(-1, self.n_out)
        self.store.grads[self.W] += x.reshape(-1, self.n_in).T @ dz2
        self.store.grads[self.b] += dz2.sum(axis=0)
        return dz @ self.store.params[self.W].T


class MLP:
    """Affine stack; hidden layers use ``activation``, the last one ``out_activation``."""

    def __init__(self, store: ParamStore, name: str, dims: Sequence[int], activation: str = "relu",
                 out_activation: str = "linear", zero_last: bool = False):
        if len(dims) < 2:
            raise DimensionError(f"mlp {name}: needs at least input and output sizes")
        self.dims = list(dims)
        n = len(dims) - 1
        self.layers = [
            Dense(store, f"{name}/{i}", dims[i], dims[i + 1],
                  activation if i < n - 1 else out_activation,
                  zero_init=zero_last and i == n - 1)
            for i in range(n)
        ]

    @property
    def param_names(self) -> list[str]:
        return [p for layer in self.layers for p in (layer.W, layer.b)]

    def forward(self, x: np.ndarray):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, dy: np.ndarray, caches) -> np.ndarray:
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(dy, c)
        return dy


class LSTM:
    """Stacked LSTM; state is ``(h, c)`` with shape ``(layers, batch, hidden)``.

    Gate layout along the last axis of each weight matrix: input, forget, cell, output.
    """

    def __init__(self, store: ParamStore, name: str, input_dim: int = 64, hidden: int = 64, layers: int = 2):
        self.store, self.name = store, name
        self.input_dim, self.hidden, self.num_layers = input_dim, hidden, layers
        self.W, self.b = [], []
        for l in range(layers):
            n_in = (input_dim if l == 0 else hidden) + hidden
            self.W.append(store.create(f"{name}/{l}/W", (n_in, 4 * hidden), fan_in=hidden))
            self.b.append(store.create(f"{name}/{l}/b", (4 * hidden,), fan_in=hidden))

    @property
    def param_names(self) -> list[str]:
        return self.W + self.b

    def zero_state(self, batch: int = 1):
        shape = (self.num_layers, batch, self.hidden)
        return np.zeros(shape), np.zeros(shape)

    def _check_state(self, state):
        h, c = state
        expect = (self.num_layers, h.shape[1] if h.ndim == 3 else -1, self.hidden)
        if h.ndim != 3 or h.shape != expect or c.shape != h.shape:
            raise StateMismatchError(
                f"lstm {self.name}: state shape {h.shape} does not match {self.num_layers} layers x {self.hidden}"
            )

    def _cell(self, l: int, x: np.ndarray, h: np.ndarray, c: np.ndarray):
        H = self.hidden
        inp = np.concatenate([x, h], axis=-1)
        a = inp @ self.store.params[self.W[l]] + self.store.params[self.b[l]]
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = sigmoid(a[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        return h_new, c_new, (inp, i, f, g, o, c, tc)

    def step(self, state, x: np.ndarray):
        """Advance one step; pure in ``(state, x, params)``."""
        self._check_state(state)
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"lstm {self.name}: expected input width {self.input_dim}, got {x.shape[-1]}")
        h, c = state
        hs, cs = [], []
        inp = x
        for l in range(self.num_layers):
            hn, cn, _ = self._cell(l, inp, h[l], c[l])
            hs.append(hn)
            cs.append(cn)
            inp = hn
        return (np.stack(hs), np.stack(cs)), inp

    def forward(self, xs: np.ndarray, state0=None, resets: np.ndarray | None = None):
        """Run a ``(T, B, D)`` sequence; ``resets[t, b]`` zeroes row ``b``'s state before step ``t``."""
        T, B, D = xs.shape
        if D != self.input_dim:
            raise DimensionError(f"lstm {self.name}: expected input width {self.input_dim}, got {D}")
        if state0 is None:
            state0 = self.zero_state(B)
        self._check_state(state0)
        h = [state0[0][l] for l in range(self.num_layers)]
        c = [state0[1][l] for l in range(self.num_layers)]
        keep = None if resets is None else (~np.asarray(resets, dtype=bool))[:, :, None].astype(float)
        out = np.empty((T, B, self.hidden))
        caches = []
        for t in range(T):
            if keep is not None:
                h = [hl * keep[t] for hl in h]
                c = [cl * keep[t] for cl in c]
            inp = xs[t]
            step_cache = []
            for l in range(self.num_layers):
                h[l], c[l], cc = self._cell(l, inp, h[l], c[l])
                step_cache.append(cc)
                inp = h[l]
            out[t] = inp
            caches.append(step_cache)
        final = (np.stack(h), np.stack(c))
        return out, final, (caches, keep)

    def backward(self, douts: np.ndarray, cache):
        """Backpropagate through time; returns ``(dxs, (dh0, dc0))``."""
        caches, keep = cache
        T = len(caches)
        H, L = self.hidden, self.num_layers
        B = douts.shape[1]
        dxs = np.empty((T, B, self.input_dim))
        dh_next = [np.zeros((B, H)) for _ in range(L)]
        dc_next = [np.zeros((B, H)) for _ in range(L)]
        params, grads = self.store.params, self.store.grads
        for t in range(T - 1, -1, -1):
            d_above = douts[t]
            for l in range(L - 1, -1, -1):
                inp, i, f, g, o, c_prev, tc = caches[t][l]
                dh = d_above + dh_next[l]
                dc = dc_next[l] + dh * o * (1.0 - tc * tc)
                da = np.concatenate(
                    [
                        dc * g * i * (1.0 - i),
                        dc * c_prev * f * (1.0 - f),
                        dc * i * (1.0 - g * g),
                        dh * tc * o * (1.0 - o),
                    ],
                    axis=-1,
                )
                grads[self.W[l]] += inp.T @ da
                grads[self.b[l]] += da.sum(axis=0)
                dinp = da @ params[self.W[l]].T
                n_x = inp.shape[1] - H
                d_above = dinp[:, :n_x]
                dh_next[l] = dinp[:, n_x:]
                dc_next[l] = dc * f
            dxs[t] = d_above
            if keep is not None:
                dh_next = [d * keep[t] for d in dh_next]
                dc_next = [d * keep[t] for d in dc_next]
        return dxs, (np.stack(dh_next), np.stack(dc_next))


# ---------------------------------------------------------------- softmax / losses


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    z = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    z = scores - np.max(scores, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------- optimizer


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


def adam_step(store: ParamStore, names: Sequence[str], lr: float = 1e-3, clip: float | None = 40.0,
              slot: str = "adam", beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> float:
    """Clip gradients of ``names`` to global norm ``clip`` and apply one Adam update.

    Moments live in ``store.slots`` under ``slot``, so two optimizers can update
    overlapping parameter sets independently. Returns the pre-clip norm.
    """
    norm = global_norm(store.grads[n] for n in names)
    scale = clip / norm if clip is not None and norm > clip else 1.0
    t = store.steps.get(slot, 0) + 1
    store.steps[slot] = t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for n in names:
        g = store.grads[n] * scale
        m = store.slots.setdefault(f"{slot}/m/{n}", np.zeros_like(g))
        v = store.slots.setdefault(f"{slot}/v/{n}", np.zeros_like(g))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[n] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm


# ---------------------------------------------------------------- gradient audit


def check_gradients(
    loss_fn: Callable[[], float],
    store: ParamStore,
    names: Sequence[str] | None = None,
    h: float = 1e-5,
    max_entries: int | None = 25,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    ``loss_fn`` must run forward and backward, leaving gradients in ``store.grads``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. At most ``max_entries``
    randomly chosen entries per parameter are probed.
    """
    names = list(store.params) if names is None else list(names)
    store.zero_grad()
    loss_fn()
    analytic = {n: store.grads[n].copy() for n in names}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in names:
        p = store.params[n]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            store.zero_grad()
            up = loss_fn()
            flat[j] = old - h
            store.zero_grad()
            down = loss_fn()
            flat[j] = old
            num = (up - down) / (2 * h)
            a = analytic[n].reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    store.zero_grad()
    return worst


def check_input_gradient(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray,
                         h: float = 1e-5, floor: float = 1e-6) -> float:
    """Same audit for an input array; ``f(x)`` returns ``(loss, dloss/dx)``."""
    _, analytic = f(x)
    worst = 0.0
    flat = x.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        up, _ = f(x)
        flat[j] = old - h
        down, _ = f(x)
        flat[j] = old
        num = (up - down) / (2 * h)
        a = analytic.reshape(-1)[j]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


# ---------------------------------------------------------------- container format


def save_container(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned container: magic line, one JSON header line, raw little-endian array bytes.

    Arrays are written in sorted-name order so equal content gives equal bytes.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        b = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = {"version": NETCORE_VERSION, "dtype": "<f8", "arrays": entries, "meta": meta}
    with open(path, "wb") as f:
        f.write(f"{CONTAINER_MAGIC} v{NETCORE_VERSION}\n".encode())
        f.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for b in blobs:
            f.write(b)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        first = f.readline()
        if not first.startswith(CONTAINER_MAGIC.encode()):
            raise ValueError(f"{path}: not a tableshard container")
        header = json.loads(f.readline())
        if header.get("version") != NETCORE_VERSION:
            raise StateMismatchError(f"container version {header.get('version')} unsupported")
        payload = f.read()
    arrays = {}
    for e in header["arrays"]:
        chunk = payload[e["offset"]: e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ValueError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).copy()
    return arrays, header["meta"]
