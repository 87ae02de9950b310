import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echolab import nn_core
from echolab.errors import DataError, ShapeError
from oracles import central_diff, net_param_grad_check, random_small_net, rel_err


def dense_net(w, b):
    w = np.asarray(w, dtype=float)
    return nn_core.Network([nn_core.Dense(*w.shape)], np.concatenate([w.ravel(), b]))


def direct_conv(x, w, b, stride):
    """Loop-nest convolution with 'same' zero padding."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    lo = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (lo, k - 1 - lo), (lo, k - 1 - lo)))
    ho, wo = -(-h // stride), -(-wd // stride)
    y = np.zeros((n, o, ho, wo))
    for a in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[a, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    y[a, oc, i, j] = np.sum(patch * w[oc]) + b[oc]
    return y


# --- forward ---------------------------------------------------------------


def test_zero_dense_gives_zero_output():
    net = dense_net(np.zeros((3, 2)), np.zeros(2))
    x = np.random.default_rng(0).standard_normal((5, 3))
    assert np.array_equal(net(x), np.zeros((5, 2)))


def test_identity_dense_returns_input():
    net = dense_net(np.eye(4), np.zeros(4))
    x = np.random.default_rng(1).standard_normal((6, 4))
    assert np.array_equal(net(x), x)


def test_two_layer_mlp_matches_hand_evaluation():
    # W1 = [[1, 2], [3, 4]], b1 = [0.5, -1]; relu; W2 = [[1], [-1]], b2 = 0.25
    # x = (2, 1):  h = (5.5, 7)   -> out = 5.5 - 7 + 0.25 = -1.25
    # x = (-1, 1): h = (2.5, 1)   -> out = 1.75
    # x = (1, -1): h = (-1.5, -3) -> relu zeroes both -> out = 0.25
    layers = [nn_core.Dense(2, 2), nn_core.Activation("relu"), nn_core.Dense(2, 1)]
    params = np.array([1, 2, 3, 4, 0.5, -1, 1, -1, 0.25], dtype=float)
    net = nn_core.Network(layers, params)
    out = net(np.array([[2.0, 1.0], [-1.0, 1.0], [1.0, -1.0]]))
    np.testing.assert_array_equal(out.ravel(), [-1.25, 1.75, 0.25])


def test_seeded_mlp_matches_matrix_chain():
    net = nn_core.Network.init(nn_core.mlp([3, 5, 2], "tanh"), seed=0)
    x = np.random.default_rng(0).standard_normal((4, 3))
    p = net.params
    w1, b1 = p[:15].reshape(3, 5), p[15:20]
    w2, b2 = p[20:30].reshape(5, 2), p[30:32]
    np.testing.assert_allclose(net(x), np.tanh(x @ w1 + b1) @ w2 + b2, rtol=0, atol=1e-14)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("hw", [4, 5])
def test_conv_matches_direct_loops(stride, hw):
    rng = np.random.default_rng(stride * 10 + hw)
    layer = nn_core.Conv(2, 3, 3, stride)
    p = layer.init(rng) + 0.1
    x = rng.standard_normal((2, 2, hw, hw))
    y, _ = layer.forward(p, x, False, None)
    w, b = layer._split(p)
    np.testing.assert_allclose(y, direct_conv(x, w, b, stride), atol=1e-12)


def test_shape_mismatch_names_layer():
    net = nn_core.Network.init([nn_core.Dense(3, 4), nn_core.Activation("relu"), nn_core.Dense(5, 1)])
    with pytest.raises(ShapeError, match="layer 2"):
        net(np.zeros((2, 3)))


def test_param_vector_length_checked():
    with pytest.raises(ShapeError):
        nn_core.Network([nn_core.Dense(2, 2)], np.zeros(5))


def test_param_layout_covers_vector():
    net = nn_core.Network.init(nn_core.mlp([4, 8, 8, 1], dropout=0.05))
    layout = net.param_layout
    assert layout[0][0] == 0 and layout[-1][1] == net.params.size
    assert all(a[1] == b[0] for a, b in zip(layout, layout[1:]))


def test_dropout_eval_is_identity():
    x = np.random.default_rng(2).standard_normal((10, 7))
    y, _ = nn_core.Dropout(0.5).forward(np.zeros(0), x, False, None)
    assert y is x


def test_dropout_train_mean_preserved():
    rate, trials = 0.3, 20_000
    x = np.linspace(-2, 2, 8)[None, :].repeat(trials, axis=0)
    y, _ = nn_core.Dropout(rate).forward(np.zeros(0), x, True, np.random.default_rng(3))
    se = np.abs(x[0]) * math.sqrt(rate / (1 - rate)) / math.sqrt(trials)
    assert np.all(np.abs(y.mean(axis=0) - x[0]) <= 3 * se + 1e-15)


def test_eval_mode_is_deterministic():
    net = nn_core.Network.init(nn_core.mlp([4, 6, 1], dropout=0.5), seed=4)
    x = np.random.default_rng(4).standard_normal((3, 4))
    a = nn_core.forward(net, x, "eval", np.random.default_rng(1))
    b = nn_core.forward(net, x, "eval", np.random.default_rng(2))
    assert np.array_equal(a, b)


# --- backward --------------------------------------------------------------


def test_zero_upstream_gives_zero_gradient():
    net = nn_core.Network.init(nn_core.mlp([3, 4, 2]), seed=5)
    x = np.ones((2, 3))
    nn_core.forward(net, x)
    g = nn_core.backward(net, x, np.zeros((2, 2)))
    assert g.shape == net.params.shape and not g.any()


def test_scalar_net_gradient_is_input():
    net = nn_core.Network([nn_core.Dense(1, 1)], np.array([2.5, 0.0]))
    x = np.array([[1.7]])
    nn_core.forward(net, x)
    g = nn_core.backward(net, x, np.ones((1, 1)))
    assert g[0] == pytest.approx(1.7)


def test_backward_without_forward_raises():
    net = nn_core.Network.init(nn_core.mlp([2, 1]))
    with pytest.raises(RuntimeError):
        nn_core.backward(net, np.zeros((1, 2)), np.ones((1, 1)))


def test_random_two_layer_net_finite_differences():
    rng = np.random.default_rng(6)
    net = nn_core.Network.init(nn_core.mlp([4, 5, 3], "silu"), seed=6)
    ep, ex = net_param_grad_check(net, rng.standard_normal((3, 4)), rng)
    assert ep < 1e-4 and ex < 1e-4


@pytest.mark.parametrize("seed", range(8))
def test_every_layer_type_gradient(seed):
    rng = np.random.default_rng(seed)
    net, x = random_small_net(rng, seed)
    ep, ex = net_param_grad_check(net, x, rng)
    assert ep < 1e-4 and ex < 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["bce", "mse"]))
def test_loss_gradients_through_small_nets(seed, loss):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, 5)) for _ in range(3)] + [1]
    net = nn_core.Network.init(nn_core.mlp(sizes, "tanh"), seed=seed)
    x = rng.standard_normal((4, sizes[0]))
    y = rng.integers(0, 2, 4).astype(float)

    def value(p):
        out = net.with_params(p)(x).ravel()
        if loss == "bce":
            return nn_core.bce_loss(nn_core.sigmoid(out), y)[0]
        return nn_core.mse_loss(out, y)[0]

    out, caches = nn_core.run_forward(net, x)
    z = out.ravel()
    if loss == "bce":
        prob = nn_core.sigmoid(z)
        _, gprob = nn_core.bce_loss(prob, y)
        up = gprob * prob * (1 - prob)
    else:
        _, up = nn_core.mse_loss(z, y)
    g, _ = nn_core.run_backward(net, caches, up.reshape(out.shape))
    assert rel_err(g, central_diff(value, net.params)) < 1e-4


# --- losses ----------------------------------------------------------------


def test_bce_uniform_prediction_is_ln2():
    loss, _ = nn_core.bce_loss(np.full(6, 0.5), np.array([0, 1, 1, 0, 1, 1]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_bce_perfect_prediction_bounded_by_eps():
    y = np.array([0.0, 1.0, 1.0])
    loss, _ = nn_core.bce_loss(y, y)
    assert 0 <= loss <= -math.log(1 - nn_core.BCE_EPS) + 1e-15


def test_bce_worked_value():
    loss, _ = nn_core.bce_loss(np.array([0.9, 0.2]), np.array([1.0, 0.0]))
    assert loss == pytest.approx(0.16425203348601893, abs=1e-15)  # -(ln 0.9 + ln 0.8) / 2


def test_bce_length_mismatch():
    with pytest.raises(ShapeError):
        nn_core.bce_loss(np.full(3, 0.5), np.zeros(2))


def test_bce_with_logits_matches_probability_form():
    z = np.linspace(-6, 6, 13)
    y = (np.arange(13) % 2).astype(float)
    a, ga = nn_core.bce_with_logits(z, y)
    p = nn_core.sigmoid(z)
    b, gb = nn_core.bce_loss(p, y)
    assert a == pytest.approx(b, rel=1e-12)
    np.testing.assert_allclose(ga, gb * p * (1 - p), rtol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=20), st.data())
def test_bce_non_negative(probs, data):
    labels = data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=len(probs), max_size=len(probs)))
    assert nn_core.bce_loss(np.array(probs), np.array(labels))[0] >= 0


# --- Adam ------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    new, state = nn_core.adam_step(p, np.zeros(3), nn_core.AdamState.fresh(3, 0.1))
    assert np.array_equal(new, p) and state.step_count == 1


def test_adam_moves_against_gradient():
    p, state = np.zeros(2), nn_core.AdamState.fresh(2, 0.01)
    for _ in range(20):
        p, state = nn_core.adam_step(p, np.array([1.0, -1.0]), state)
    assert p[0] < 0 < p[1]


def test_adam_quadratic_matches_reference_recurrence():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    w_ref, m, v = 0.0, 0.0, 0.0
    w, state = np.array([0.0]), nn_core.AdamState.fresh(1, lr)
    prev = abs(w_ref - 3)
    for t in range(1, 11):
        g = 2 * (w_ref - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w_ref -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        w, state = nn_core.adam_step(w, 2 * (w - 3), state)
        assert w[0] == pytest.approx(w_ref, abs=1e-15)
        assert abs(w_ref - 3) < prev
        prev = abs(w_ref - 3)
    assert state.step_count == 10


def test_adam_length_mismatch():
    with pytest.raises(ShapeError):
        nn_core.adam_step(np.zeros(3), np.zeros(2), nn_core.AdamState.fresh(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(1, 5))
def test_adam_state_invariants(n, steps):
    rng = np.random.default_rng(n)
    p, state = rng.standard_normal(n), nn_core.AdamState.fresh(n, 1e-3)
    for k in range(steps):
        p, state = nn_core.adam_step(p, rng.standard_normal(n), state)
        assert state.step_count == k + 1
        assert state.first_moment.shape == state.second_moment.shape == p.shape


# --- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    layers = [nn_core.Conv(1, 4, 3, 2), nn_core.Norm(4), nn_core.Activation("silu"),
              nn_core.Dropout(0.05), nn_core.GlobalPool(), nn_core.Dense(4, 1)]
    net = nn_core.Network.init(layers, seed=9)
    path = tmp_path / "net.dbnn"
    nn_core.save_network(path, net)
    back = nn_core.load_network(path)
    assert back.layers == net.layers and np.array_equal(back.params, net.params)
    assert path.read_bytes()[:4] == b"DBNN"


def test_checkpoint_rejects_bad_files(tmp_path):
    net = nn_core.Network.init(nn_core.mlp([2, 1]))
    path = tmp_path / "net.dbnn"
    nn_core.save_network(path, net)
    buf = path.read_bytes()
    (tmp_path / "trunc").write_bytes(buf[:-3])
    (tmp_path / "magic").write_bytes(b"XXXX" + buf[4:])
    for name in ("trunc", "magic"):
        with pytest.raises(DataError):
            nn_core.load_network(tmp_path / name)
