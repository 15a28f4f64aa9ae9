import numpy as np
import pytest

from tableshard.netcore import (
    LSTM, MLP, Dense, DimensionError, ParamStore, StateMismatchError, adam_step, check_gradients,
    check_input_gradient, global_norm, load_container, log_softmax, save_container, softmax,
)

TOL = 1e-4


def quad_loss(y, target):
    d = y - target
    return float(0.5 * np.sum(d * d)), d


def mlp_audit(dims, activation, seed=0):
    store = ParamStore(seed)
    net = MLP(store, "net", dims, activation=activation)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(7, dims[0]))
    target = rng.normal(size=(7, dims[-1]))

    def loss():
        y, cache = net.forward(x)
        val, dy = quad_loss(y, target)
        net.backward(dy, cache)
        return val

    return store, net, x, target, loss


@pytest.mark.parametrize("activation", ["relu", "tanh", "linear"])
def test_mlp_param_gradients(activation):
    store, _, _, _, loss = mlp_audit([21, 128, 1], activation)
    assert check_gradients(loss, store, h=1e-5) < TOL


def test_mlp_input_gradient():
    store, net, x, target, _ = mlp_audit([5, 8, 3], "tanh")

    def f(x_):
        y, cache = net.forward(x_)
        val, dy = quad_loss(y, target)
        store.zero_grad()
        return val, net.backward(dy, cache)

    assert check_input_gradient(f, x.copy()) < TOL


def test_identity_layer_and_zero_input():
    store = ParamStore(0)
    layer = Dense(store, "d", 4, 4, activation="relu")
    store.params[layer.W][:] = np.eye(4)
    store.params[layer.b][:] = 0.0
    x = np.array([[-1.0, 0.5, 2.0, -3.0]])
    np.testing.assert_array_equal(layer.forward(x)[0], np.maximum(x, 0))
    _, (_, z, _) = layer.forward(np.zeros((1, 4)))
    assert np.all(z == 0)


def test_dimension_error_names_layer():
    store = ParamStore(0)
    net = MLP(store, "enc", [3, 4])
    with pytest.raises(DimensionError, match="enc/0"):
        net(np.zeros((1, 5)))
    with pytest.raises(DimensionError):
        MLP(store, "bad", [3])


def test_lstm_zero_weights_zero_output():
    store = ParamStore(0)
    lstm = LSTM(store, "l", 6, 5, 2)
    for n in lstm.param_names:
        store.params[n][:] = 0.0
    _, h = lstm.step(lstm.zero_state(2), np.zeros((2, 6)))
    assert np.all(h == 0)


def test_lstm_step_pure_and_matches_forward():
    store = ParamStore(3)
    lstm = LSTM(store, "l", 4, 6, 2)
    xs = np.random.default_rng(0).normal(size=(5, 2, 4))
    s1 = s2 = lstm.zero_state(2)
    for t in range(5):
        s1, h1 = lstm.step(s1, xs[t])
        s2, _ = lstm.step(s2, xs[t])
    np.testing.assert_array_equal(s1[0], s2[0])
    out, final, _ = lstm.forward(xs)
    np.testing.assert_allclose(out[-1], h1, rtol=1e-14)
    np.testing.assert_allclose(final[1], s1[1], rtol=1e-14)


def test_lstm_state_mismatch():
    store = ParamStore(0)
    lstm = LSTM(store, "l", 4, 6, 2)
    with pytest.raises(StateMismatchError):
        lstm.step((np.zeros((1, 1, 6)), np.zeros((1, 1, 6))), np.zeros((1, 4)))


def test_lstm_bptt_gradients_with_resets():
    store = ParamStore(1)
    lstm = LSTM(store, "l", 4, 5, 2)
    rng = np.random.default_rng(2)
    xs = rng.normal(size=(5, 3, 4))
    target = rng.normal(size=(5, 3, 5))
    resets = np.zeros((5, 3), dtype=bool)
    resets[2, 1] = True
    h0 = (rng.normal(size=(2, 3, 5)) * 0.5, rng.normal(size=(2, 3, 5)) * 0.5)

    def loss():
        out, _, cache = lstm.forward(xs, h0, resets)
        val, d = quad_loss(out, target)
        lstm.backward(d, cache)
        return val

    assert check_gradients(loss, store, max_entries=40) < TOL

    def f(x_):
        out, _, cache = lstm.forward(x_, h0, resets)
        val, d = quad_loss(out, target)
        store.zero_grad()
        dx, _ = lstm.backward(d, cache)
        return val, dx

    assert check_input_gradient(f, xs.copy()) < TOL


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_allclose(softmax(np.array([0.0, np.log(3.0)])), [0.25, 0.75], rtol=1e-14)
    s = np.random.default_rng(0).normal(size=9)
    np.testing.assert_allclose(softmax(s + 123.4), softmax(s), atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(s)), softmax(s), rtol=1e-12)


def test_adam_zero_gradient_and_clip():
    store = ParamStore(0)
    store.create("w", (3,), fan_in=3)
    before = store.params["w"].copy()
    adam_step(store, ["w"], lr=1e-3)
    np.testing.assert_array_equal(store.params["w"], before)
    store.grads["w"][:] = np.array([0.0, 48.0, 64.0])  # norm 80
    norm = adam_step(store, ["w"], lr=1e-3, clip=40.0)
    assert norm == pytest.approx(80.0)
    # first moment holds (1 - beta1) * the clipped gradient
    m = store.slots["adam/m/w"]
    assert global_norm([m / 0.1]) == pytest.approx(40.0)


def test_adam_monotone_scalar():
    store = ParamStore(0)
    store.create("x", (1,), zero=True)
    traj = []
    for _ in range(1000):
        store.grads["x"][:] = 2.0
        adam_step(store, ["x"], lr=1e-3, clip=None)
        traj.append(store.params["x"][0])
    assert np.all(np.diff(traj) < 0)


def test_container_round_trip_byte_identical(tmp_path):
    store = ParamStore(4)
    MLP(store, "a", [3, 4, 2])
    LSTM(store, "b", 2, 3, 2)
    store.grads["a/0/W"][:] = 1.0
    adam_step(store, store.names())
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    save_container(p1, store.state_arrays(), store.state_meta())
    arrays, meta = load_container(p1)
    other = ParamStore(4)
    MLP(other, "a", [3, 4, 2])
    LSTM(other, "b", 2, 3, 2)
    other.load_state(arrays, meta)
    save_container(p2, other.state_arrays(), other.state_meta())
    assert p1.read_bytes() == p2.read_bytes()
    for n in store.params:
        np.testing.assert_array_equal(store.params[n], other.params[n])


def test_load_state_version_mismatch():
    store = ParamStore(0)
    with pytest.raises(StateMismatchError):
        store.load_state({}, {"netcore_version": 999})


def test_init_is_seeded():
    a, b = ParamStore(5), ParamStore(5)
    MLP(a, "m", [4, 4])
    MLP(b, "m", [4, 4])
    np.testing.assert_array_equal(a.params["m/0/W"], b.params["m/0/W"])
