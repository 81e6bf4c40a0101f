"""Gradient and behavior checks for the layer stack."""

import numpy as np
import pytest

from snapleak.nn import (Adam, Conv2d, Dense, Dropout, Flatten, LeakyRelu, Relu, Reshape,
                         Sequential, Sigmoid, Tanh, Upsample2x)

from helpers import fd_grad, pick_entries, relative_error


def _scalar_loss(net, x, probe):
    """Deterministic scalar readout of a forward pass."""
    return float(np.sum(net.forward(x, train=False) * probe))


def _check_net_grads(net, x, rng, n_entries=6, tol=1e-6):
    out = net.forward(x, train=False)
    probe = rng.normal(size=out.shape)
    net.zero_grads()
    grad_in = net.backward(probe)

    # parameter gradients
    for name, layer, key in net.param_items():
        arr = layer.params[key]
        entries = pick_entries(rng, arr, n_entries)
        numeric = fd_grad(lambda: _scalar_loss(net, x, probe), arr, entries, step=1e-5)
        analytic = layer.grads[key].reshape(-1)[entries]
        assert relative_error(analytic, numeric).max() < tol, f"param grad mismatch in {name}"

    # input gradient
    entries = pick_entries(rng, x, n_entries)
    numeric = fd_grad(lambda: _scalar_loss(net, x, probe), x, entries, step=1e-5)
    analytic = grad_in.reshape(-1)[entries]
    assert relative_error(analytic, numeric).max() < tol


def test_dense_gradients():
    rng = np.random.default_rng(0)
    net = Sequential([Dense(7, 5, rng), Tanh(), Dense(5, 3, rng)])
    x = rng.normal(size=(4, 7))
    _check_net_grads(net, x, rng)


def test_conv_gradients_stride1():
    rng = np.random.default_rng(1)
    net = Sequential([Conv2d(2, 3, k=3, rng=rng), LeakyRelu(0.2), Conv2d(3, 2, k=3, rng=rng)])
    x = rng.normal(size=(2, 8, 8, 2))
    _check_net_grads(net, x, rng)


def test_conv_gradients_stride2():
    rng = np.random.default_rng(2)
    net = Sequential([Conv2d(1, 4, k=4, rng=rng, stride=2, pad=1), Sigmoid(),
                      Conv2d(4, 2, k=4, rng=rng, stride=2, pad=1)])
    x = rng.normal(size=(2, 16, 16, 1))
    _check_net_grads(net, x, rng)


def test_upsample_reshape_pipeline_gradients():
    rng = np.random.default_rng(3)
    net = Sequential([Dense(6, 4 * 4 * 2, rng), Reshape((4, 4, 2)), Upsample2x(),
                      Conv2d(2, 1, k=3, rng=rng), Flatten(), Dense(64, 2, rng)])
    x = rng.normal(size=(3, 6))
    _check_net_grads(net, x, rng)


def test_conv_rejects_bad_geometry():
    rng = np.random.default_rng(4)
    conv = Conv2d(1, 2, k=4, rng=rng, stride=2, pad=0)
    with pytest.raises(ValueError, match="geometry"):
        conv.forward(np.zeros((1, 9, 9, 1)))


def test_relu_and_leaky_behavior():
    x = np.array([[-2.0, 0.5]])
    assert np.allclose(Relu().forward(x), [[0.0, 0.5]])
    assert np.allclose(LeakyRelu(0.2).forward(x), [[-0.4, 0.5]])


def test_dropout_train_vs_inference():
    rng = np.random.default_rng(5)
    drop = Dropout(0.5)
    x = np.ones((4, 100))
    out_inf = drop.forward(x, train=False)
    assert np.array_equal(out_inf, x)
    out_a = drop.forward(x, train=True, rng=np.random.default_rng(1))
    out_b = drop.forward(x, train=True, rng=np.random.default_rng(2))
    assert not np.array_equal(out_a, out_b)
    # inverted scaling keeps the expectation near 1
    assert abs(out_a.mean() - 1.0) < 0.15
    with pytest.raises(ValueError, match="rng"):
        drop.forward(x, train=True)


def test_sigmoid_stable_in_tails():
    s = Sigmoid()
    out = s.forward(np.array([[-1000.0, 1000.0]]))
    assert np.all(np.isfinite(out))
    assert out[0, 0] == 0.0 and out[0, 1] == 1.0


def test_state_dict_roundtrip_bit_exact():
    rng = np.random.default_rng(6)
    net = Sequential([Conv2d(1, 3, k=3, rng=rng), Relu(), Flatten(), Dense(8 * 8 * 3, 4, rng)])
    state = net.state_dict()
    net2 = Sequential([Conv2d(1, 3, k=3, rng=np.random.default_rng(99)), Relu(), Flatten(),
                       Dense(8 * 8 * 3, 4, np.random.default_rng(99))])
    net2.load_state_dict(state)
    x = rng.normal(size=(2, 8, 8, 1))
    assert np.array_equal(net.forward(x), net2.forward(x))


def test_adam_decreases_quadratic():
    rng = np.random.default_rng(7)
    net = Sequential([Dense(3, 1, rng)])
    opt = Adam([net], lr=0.05)
    x = rng.normal(size=(16, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]])
    first = None
    for _ in range(200):
        opt.zero_grads()
        pred = net.forward(x)
        loss = float(np.mean((pred - y) ** 2))
        if first is None:
            first = loss
        net.backward(2.0 * (pred - y) / y.size)
        opt.step()
    assert loss < first * 1e-3
