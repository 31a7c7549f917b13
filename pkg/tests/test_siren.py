import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clorf import _trig
from clorf.siren import (AdamState, NonFiniteGradient, SirenConfig, SirenNet, adam_step, backward, forward,
                         forward_with_cache, positional_encoding, siren_init)


def scalar_forward(net, x):
    """Unbatched recomputation with python loops."""
    h = list(x)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = [sum(w[r, c] * h[c] for c in range(len(h))) + b[r] for r in range(w.shape[0])]
        if i == last:
            return np.array(z)
        if net.config.activation == "sine":
            h = [math.sin(net.config.omega0 * v) for v in z]
        else:
            h = [max(v, 0.0) for v in z]


def with_random_biases(net, rng, scale=0.1):
    return SirenNet(net.config, [w.copy() for w in net.weights], [rng.normal(0, scale, b.shape) for b in net.biases])


def fd_grads(net, x, g, step=1e-6):
    params = net.params()
    out = []
    for t, p in enumerate(params):
        d = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            vals = []
            for s in (step, -step):
                moved = [q.copy() for q in params]
                moved[t][idx] += s
                vals.append(np.sum(g * forward(net.with_params(moved), x)))
            d[idx] = (vals[0] - vals[1]) / (2 * step)
        out.append(d)
    return out


def test_init_deterministic():
    cfg = SirenConfig(2, 3, (16, 16), seed=5)
    a, b = siren_init(cfg), siren_init(cfg)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


def test_first_layer_bound():
    net = siren_init(SirenConfig(3, 2, (64,), seed=1))
    assert np.all(np.abs(net.weights[0]) <= 1 / 3)


def test_deep_layer_std():
    net = siren_init(SirenConfig(2, 4, (512, 512), seed=2))
    expected = math.sqrt(6 / 512) / (30 * math.sqrt(3))
    assert abs(net.weights[1].std() / expected - 1) < 0.1


def test_relu_uses_he_bound():
    net = siren_init(SirenConfig(2, 4, (100, 100), activation="relu", seed=0))
    assert np.abs(net.weights[1]).max() <= math.sqrt(6 / 100)
    assert np.abs(net.weights[1]).max() > 0.9 * math.sqrt(6 / 100)


def test_zero_bias_zero_input_gives_last_bias(rng):
    net = siren_init(SirenConfig(2, 3, (8, 8), seed=0))
    net = SirenNet(net.config, net.weights, [*net.biases[:-1], np.array([0.1, -0.2, 0.3])])
    assert forward(net, np.zeros((1, 2)))[0].tolist() == [0.1, -0.2, 0.3]


def test_single_linear_layer(rng):
    net = siren_init(SirenConfig(3, 2, (), seed=0))
    net = with_random_biases(net, rng)
    x = rng.normal(size=(5, 3))
    assert np.array_equal(forward(net, x), x @ net.weights[0].T + net.biases[0])


@pytest.mark.parametrize("activation", ["sine", "relu"])
def test_forward_matches_scalar_oracle(rng, activation):
    net = with_random_biases(siren_init(SirenConfig(2, 3, (7,), activation=activation, seed=3)), rng)
    x = rng.uniform(-1, 1, size=(10, 2))
    got = forward(net, x)
    for i in range(10):
        assert np.allclose(got[i], scalar_forward(net, x[i]), atol=1e-12)


def test_relu_pe_features():
    x = np.array([[0.25, -0.5]])
    f = positional_encoding(x)
    assert f.shape == (1, 26)
    assert f[0, 0] == pytest.approx(math.sin(math.pi * 0.25))
    assert f[0, 3] == pytest.approx(math.cos(math.pi * -0.5))
    assert f[0, -2:].tolist() == [0.25, -0.5]
    net = siren_init(SirenConfig(2, 1, (4,), activation="relu_pe"))
    assert net.weights[0].shape == (4, 26)


@given(st.integers(0, 10**6))
def test_batch_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    net = with_random_biases(siren_init(SirenConfig(2, 3, (16, 16), seed=seed % 100)), rng)
    x = rng.uniform(-1, 1, size=(20, 2))
    perm = rng.permutation(20)
    assert np.array_equal(forward(net, x)[perm], forward(net, x[perm]))


def test_forward_with_cache_agrees(rng):
    net = siren_init(SirenConfig(1, 2, (9, 9), seed=4))
    x = rng.uniform(-1, 1, size=(6, 1))
    out, _ = forward_with_cache(net, x)
    assert np.array_equal(out, forward(net, x))


def test_linear_backward_closed_form(rng):
    net = siren_init(SirenConfig(3, 2, (), seed=0))
    x, g = rng.normal(size=(7, 3)), rng.normal(size=(7, 2))
    gw, gb = backward(net, x, g)
    assert np.array_equal(gw, g.T @ x)
    assert np.array_equal(gb, g.sum(axis=0))


def test_zero_upstream_zero_grads(rng):
    net = siren_init(SirenConfig(2, 3, (5, 5), seed=1))
    grads = backward(net, rng.normal(size=(4, 2)), np.zeros((4, 3)))
    assert all(not np.any(gr) for gr in grads)


@pytest.mark.parametrize("activation", ["sine", "relu", "relu_pe"])
def test_backward_matches_finite_differences(rng, activation):
    net = with_random_biases(siren_init(SirenConfig(2, 4, (8,), activation=activation, seed=7)), rng)
    x = rng.uniform(-1, 1, size=(5, 2))
    g = rng.normal(size=(5, 4))
    for an, fd in zip(backward(net, x, g), fd_grads(net, x, g)):
        denom = np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-8)
        assert np.max(np.abs(an - fd) / denom) < 1e-5


def test_backward_cache_reuse_identical(rng):
    net = with_random_biases(siren_init(SirenConfig(2, 3, (6, 6), seed=2)), rng)
    x, g = rng.uniform(-1, 1, size=(5, 2)), rng.normal(size=(5, 3))
    _, cache = forward_with_cache(net, x)
    assert all(np.array_equal(a, b) for a, b in zip(backward(net, x, g), backward(net, x, g, cache)))


def test_config_validation():
    with pytest.raises(ValueError):
        SirenConfig(2, 1, activation="tanh")
    with pytest.raises(ValueError):
        SirenConfig(0, 1)
    with pytest.raises(ValueError):
        SirenConfig(2, 1, omega0=0.0)


def test_net_shape_validation():
    net = siren_init(SirenConfig(2, 3, (4,)))
    with pytest.raises(ValueError):
        SirenNet(net.config, [net.weights[0].T, net.weights[1]], net.biases)


def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    state = AdamState.for_params(p, 1e-3)
    new, state = adam_step(state, p, [np.zeros(2)])
    assert np.array_equal(new[0], p[0])
    assert state.t == 1


def test_adam_scalar_hand_computation():
    lr, g, x = 0.01, 0.3, 2.0
    state = AdamState.for_params([np.array([x])], lr)
    (new,), state = adam_step(state, [np.array([x])], [np.array([g])])
    m = 0.1 * g
    v = 0.001 * g * g
    m_hat, v_hat = m / (1 - 0.9), v / (1 - 0.999)
    assert new[0] == pytest.approx(x - lr * m_hat / (math.sqrt(v_hat) + 1e-8), rel=1e-15)
    assert new[0] == pytest.approx(x - lr, rel=1e-6)
    # second step with a different gradient
    g2 = -0.1
    (new2,), _ = adam_step(state, [new], [np.array([g2])])
    m2 = 0.9 * m + 0.1 * g2
    v2 = 0.999 * v + 0.001 * g2 * g2
    want = new[0] - lr * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    assert new2[0] == pytest.approx(want, rel=1e-15)


def scalar_adam(x, grads, lr):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    return x


def test_adam_is_elementwise(rng):
    params = [rng.normal(size=(2, 3)), rng.normal(size=4)]
    grads_seq = [[rng.normal(size=(2, 3)), rng.normal(size=4)] for _ in range(3)]
    state = AdamState.for_params(params, 0.05)
    cur = params
    for grads in grads_seq:
        cur, state = adam_step(state, cur, grads)
    for t in range(2):
        for idx in np.ndindex(params[t].shape):
            want = scalar_adam(params[t][idx], [gs[t][idx] for gs in grads_seq], 0.05)
            assert cur[t][idx] == pytest.approx(want, rel=1e-13, abs=1e-15)


def test_adam_does_not_mutate_inputs():
    p = [np.ones(3)]
    state = AdamState.for_params(p, 0.1)
    adam_step(state, p, [np.ones(3)])
    assert np.array_equal(p[0], np.ones(3)) and state.t == 0 and not np.any(state.m[0])


def test_adam_reports_nonfinite_location():
    p = [np.zeros(2), np.zeros((2, 2))]
    g = [np.zeros(2), np.array([[0.0, 0.0], [np.nan, 0.0]])]
    with pytest.raises(NonFiniteGradient, match=r"tensor 1 .*index \(1, 0\)"):
        adam_step(AdamState.for_params(p, 0.1), p, g)


@given(st.lists(st.floats(-2e5, 2e5), min_size=1, max_size=50), st.floats(0.5, 60.0))
def test_fast_trig_matches_numpy(vals, w):
    z = np.array(vals)
    s, c = _trig.scaled_sincos(z, w)
    assert np.allclose(s, np.sin(w * z), rtol=0, atol=2e-15 * max(1.0, np.abs(w * z).max() / 1e4))
    assert np.allclose(c, w * np.cos(w * z), rtol=0, atol=2e-15 * w * max(1.0, np.abs(w * z).max() / 1e4))
    assert np.array_equal(_trig.scaled_sin(z, w), s)


def test_fast_trig_ulp_accuracy(rng):
    z = rng.uniform(-3.5, 3.5, 200_000)
    s, c = _trig.scaled_sincos(z, 30.0)
    assert np.max(np.abs(s - np.sin(30 * z))) <= 2 * np.finfo(float).eps
    assert np.max(np.abs(c / 30 - np.cos(30 * z))) <= 2 * np.finfo(float).eps
