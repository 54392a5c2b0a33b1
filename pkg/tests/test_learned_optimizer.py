import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from icsc_offload.errors import ConfigError, NumericError, TapeError
from icsc_offload.learned_optimizer import (AdamState, OptimizerNet, OptimizerState, TapeStep,
                                            adam_step, load_theta, optimizer_step,
                                            param_count, preprocess_gradient, save_theta,
                                            unroll, unrolled_backward)


def test_param_count_matches_layout():
    assert param_count(20, 2) == (2 + 20) * 80 + 80 + (40 * 80 + 80) + 21
    net = OptimizerNet.init(4, 3)
    layers, head_w, head_b = net.unpack()
    assert [W.shape for W, _ in layers] == [(6, 16), (8, 16), (8, 16)]
    assert head_w.shape == (4,) and head_b.shape == (1,)


def test_init_sets_forget_bias_and_zero_head():
    net = OptimizerNet.init(5, 2, seed=1)
    layers, head_w, head_b = net.unpack()
    for _, b in layers:
        assert np.all(b[5:10] == 1.0) and np.all(b[:5] == 0) and np.all(b[10:] == 0)
    assert not head_w.any() and head_b[0] == 0


def test_net_rejects_wrong_size_and_nan():
    with pytest.raises(ConfigError):
        OptimizerNet(np.zeros(10), 4, 2)
    theta = np.zeros(param_count(4, 2))
    theta[0] = np.nan
    with pytest.raises(NumericError):
        OptimizerNet(theta, 4, 2)


def test_preprocess_features():
    x = preprocess_gradient([0.0, -1.0, 1e-3])
    assert x.shape == (3, 2)
    assert x[0, 0] == pytest.approx(np.log(1e-12) / 10) and x[0, 1] == 0
    assert x[1].tolist() == [pytest.approx(np.log(1 + 1e-12) / 10), -1.0]


def test_zero_head_gives_zero_update_for_any_input():
    net = OptimizerNet.init(8, 2, seed=3)
    state = OptimizerState.zeros(net, 4)
    for g in ([1e9, -1e-9, 0.0, 3.0], [-5, 5, 1e-30, 1e30]):
        delta, state, _ = optimizer_step(net, state, g)
        assert np.all(delta == 0)


def test_coordinates_are_independent():
    net = OptimizerNet.init(6, 2, seed=4, gain=1.0, zero_head=False)
    g = np.array([0.3, -2.0, 7.0])
    d_all, _, _ = optimizer_step(net, OptimizerState.zeros(net, 3), g)
    for i in range(3):
        d_one, _, _ = optimizer_step(net, OptimizerState.zeros(net, 1), g[i:i + 1])
        assert d_one[0] == pytest.approx(d_all[i], rel=1e-14)


def test_step_rejects_bad_gradients():
    net = OptimizerNet.init(4, 1)
    with pytest.raises(NumericError, match="block x"):
        optimizer_step(net, OptimizerState.zeros(net, 2), [1.0, np.inf], where="in block x")
    with pytest.raises(ConfigError):
        optimizer_step(net, OptimizerState.zeros(net, 2), [1.0])


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("hidden,steps", [(4, 1), (4, 5), (8, 3)])
def test_unrolled_backward_matches_finite_differences(seed, hidden, steps):
    assert oracles.theta_gradient_check(seed, hidden, steps) < 1e-4


@pytest.mark.parametrize("seed", range(2))
def test_unrolled_backward_through_box_projection(seed):
    assert oracles.theta_gradient_check(seed, 4, 4, project=True) < 1e-4


def test_tape_mismatch_raises():
    net = OptimizerNet.init(4, 2, zero_head=False)
    _, tape = unroll(net, np.zeros(3), [np.ones(3)] * 2)
    with pytest.raises(TapeError):
        unrolled_backward(net, tape, [None])
    with pytest.raises(TapeError):
        unrolled_backward(net, tape, [None, np.ones(2)])
    assert not unrolled_backward(net, [], []).any()


def test_backward_without_loss_is_zero():
    net = OptimizerNet.init(4, 2, zero_head=False)
    _, tape = unroll(net, np.zeros(3), [np.ones(3)] * 3)
    assert not unrolled_backward(net, tape, [None] * 3).any()


def test_adam_first_step_moves_by_learning_rate():
    adam = AdamState.fresh(3, lr=0.1)
    theta = adam_step(adam, np.zeros(3), np.array([2.0, -0.5, 0.0]))
    assert theta[:2] == pytest.approx([-0.1, 0.1], rel=1e-6)
    assert theta[2] == 0.0 and adam.t == 1


def test_adam_zero_learning_rate_is_identity():
    adam = AdamState.fresh(4, lr=0.0)
    theta = np.arange(4.0)
    for _ in range(3):
        theta = adam_step(adam, theta, np.ones(4))
    assert theta.tolist() == [0.0, 1.0, 2.0, 3.0]


def test_adam_shape_mismatch():
    with pytest.raises(ConfigError):
        adam_step(AdamState.fresh(3), np.zeros(4), np.zeros(4))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), hidden=st.integers(1, 6), layers=st.integers(1, 3))
def test_theta_roundtrip(tmp_path_factory, seed, hidden, layers):
    net = OptimizerNet.init(hidden, layers, seed=seed, zero_head=False)
    path = tmp_path_factory.mktemp("theta") / "net.theta"
    save_theta(net, path)
    back = load_theta(path, gain=net.gain)
    assert back.hidden_size == hidden and back.layer_count == layers
    assert np.array_equal(back.theta, net.theta)


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.theta"
    p.write_bytes(b"not a network")
    with pytest.raises(ConfigError):
        load_theta(p)


# ------------------------------------------------------- forward oracle

def _scalar_forward(net, grads, steps_state=None):
    """Per-coordinate loop over plain Python floats, gate order i, f, o, g."""
    import math

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    H, L = net.hidden_size, net.layer_count
    layers, head_w, head_b = net.unpack()
    out = []
    for g in grads:
        g = float(g)
        x = [math.log(abs(g) + 1e-12) / 10.0, float((g > 0) - (g < 0))]
        for l in range(L):
            W, b = layers[l]
            inp = x + [0.0] * H
            pre = [b[k] + sum(inp[r] * W[r, k] for r in range(len(inp))) for k in range(4 * H)]
            h = []
            for j in range(H):
                i_, o_, g_ = sig(pre[j]), sig(pre[2 * H + j]), math.tanh(pre[3 * H + j])
                c = i_ * g_
                h.append(o_ * math.tanh(c))
            x = h
        out.append(net.gain * (sum(hw * hj for hw, hj in zip(head_w, x)) + head_b[0]))
    return out


def test_forward_matches_scalar_reimplementation():
    rng = np.random.default_rng(11)
    net = OptimizerNet.init(8, 2, seed=11, gain=0.5, zero_head=False)
    grads = rng.normal(0, 1, 6) * 10 ** rng.uniform(-4, 4, 6)
    grads[0] = 0.0
    delta, _, _ = optimizer_step(net, OptimizerState.zeros(net, 6), grads)
    ref = _scalar_forward(net, grads)
    assert np.max(np.abs(delta - ref)) < 1e-12


def test_single_step_gradient_matches_hand_derivation():
    # one layer, two hidden units, one coordinate, zero initial state
    net = OptimizerNet.init(2, 1, seed=5, gain=0.3, zero_head=False)
    gval, r = 0.7, 1.9
    _, tape = unroll(net, np.zeros(1), [np.array([gval])])
    got = unrolled_backward(net, tape, [np.array([r])])

    [(W, b)], head_w, head_b = net.unpack()
    x = np.array([np.log(gval + 1e-12) / 10, 1.0])
    z = x @ W[:2] + b
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, o, g = sig(z[0:2]), sig(z[4:6]), np.tanh(z[6:8])
    c = i * g
    h = o * np.tanh(c)
    dh = net.gain * r * head_w
    dc = dh * o * (1 - np.tanh(c) ** 2)
    dz = np.concatenate([dc * g * i * (1 - i), np.zeros(2),
                         dh * np.tanh(c) * o * (1 - o), dc * i * (1 - g ** 2)])
    dW = np.zeros_like(W)
    dW[:2] = np.outer(x, dz)  # recurrent rows see a zero previous state
    expect = np.concatenate([dW.ravel(), dz, net.gain * r * h, [net.gain * r]])
    assert got == pytest.approx(expect, rel=1e-12, abs=1e-15)


def test_equal_inputs_give_equal_outputs_and_permute():
    net = OptimizerNet.init(5, 2, seed=2, gain=1.0, zero_head=False)
    rng = np.random.default_rng(2)
    g = rng.normal(size=5)
    g[3] = g[1]
    state = OptimizerState(rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 5, 5)))
    state.h[:, 3], state.c[:, 3] = state.h[:, 1], state.c[:, 1]
    d, new, _ = optimizer_step(net, state, g)
    assert d[3] == d[1]
    perm = rng.permutation(5)
    d_p, new_p, _ = optimizer_step(net, OptimizerState(state.h[:, perm], state.c[:, perm]), g[perm])
    assert np.array_equal(d_p, d[perm]) or np.allclose(d_p, d[perm], rtol=1e-15, atol=0)
    assert np.allclose(new_p.h, new.h[:, perm], rtol=1e-15, atol=0)
    d2, _, _ = optimizer_step(net, state, g)
    assert np.array_equal(d, d2)


def test_adam_constant_gradient_steps_approach_learning_rate():
    adam = AdamState.fresh(2, lr=0.01)
    theta = np.zeros(2)
    for _ in range(200):
        new = adam_step(adam, theta, np.array([3.0, -1e-3]))
        step, theta = new - theta, new
    assert np.abs(step) == pytest.approx([0.01, 0.01], rel=1e-3)


def test_adam_minimises_quadratic():
    a = np.array([1.0, 2.0, 0.5])
    adam = AdamState.fresh(3, lr=0.02)
    theta = np.array([1.0, -0.5, 0.8])
    losses = []
    for _ in range(100):
        losses.append(float(a @ theta ** 2))
        theta = adam_step(adam, theta, 2 * a * theta)
    losses.append(float(a @ theta ** 2))
    assert np.all(np.diff(losses[5:]) <= 0)
    assert losses[-1] < 1e-3 * losses[0]
