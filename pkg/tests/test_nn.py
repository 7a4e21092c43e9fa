import numpy as np
import pytest

from miccd.errors import ShapeMismatch
from miccd.nn import Adam, Mlp, leaky_relu, mlp_forward, mlp_gradients, param_count


def fd_check(net, x, adj, h=1e-5):
    g, gx = mlp_gradients(net, x, adj)
    num = np.empty_like(net.params)
    for k in range(net.params.size):
        old = net.params[k]
        net.params[k] = old + h
        fp = np.sum(adj * net.forward(x))
        net.params[k] = old - h
        fm = np.sum(adj * net.forward(x))
        net.params[k] = old
        num[k] = (fp - fm) / (2 * h)
    return np.max(np.abs(g - num) / np.maximum(1.0, np.abs(num)))


def test_zero_net_and_affine():
    assert np.all(Mlp([3, 4, 2]).forward(np.ones(3)) == 0)
    net = Mlp([1, 1])
    net.weights[0][...] = 2.0
    net.biases[0][...] = 1.0
    assert mlp_forward(net, np.array([3.0])).tolist() == [7.0]
    assert leaky_relu(np.array(-1.0)) == pytest.approx(-0.01)


def test_shape_errors():
    net = Mlp([2, 3, 1], rng=np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        net.forward(np.ones(3))
    with pytest.raises(ShapeMismatch):
        mlp_gradients(net, np.ones((4, 2)), np.ones((4, 2)))


@pytest.mark.parametrize("sizes", [[3, 5, 2], [8, 50, 50, 2], [24, 30, 30, 1]])
def test_gradients_match_finite_differences(sizes):
    r = np.random.default_rng(1)
    net = Mlp(sizes, rng=r)
    x = r.normal(size=(6, sizes[0]))
    adj = r.normal(size=(6, sizes[-1]))
    assert fd_check(net, x, adj) < 1e-4


def test_linear_least_squares_gradient():
    r = np.random.default_rng(2)
    X, y = r.normal(size=(10, 3)), r.normal(size=(10, 1))
    net = Mlp([3, 1], rng=r)
    W, b = net.weights[0].copy(), net.biases[0].copy()
    resid = X @ W + b - y
    g, _ = mlp_gradients(net, X, resid)  # adjoint of 0.5 * ||resid||^2
    assert np.allclose(g[:3], (X.T @ resid).ravel())
    assert np.allclose(g[3:], resid.sum())


def test_input_gradient():
    r = np.random.default_rng(3)
    net = Mlp([4, 6, 1], rng=r)
    x = r.normal(size=(1, 4))
    _, gx = mlp_gradients(net, x, np.ones((1, 1)))
    h = 1e-6
    num = [(net.forward(x + h * e) - net.forward(x - h * e))[0, 0] / (2 * h) for e in np.eye(4)]
    assert np.allclose(gx[0], num, atol=1e-7)


def test_zero_adjoint():
    net = Mlp([2, 4, 3], rng=np.random.default_rng(0))
    g, gx = mlp_gradients(net, np.ones((5, 2)), np.zeros((5, 3)))
    assert not g.any() and not gx.any()


def test_forward_is_pure():
    net = Mlp([2, 4, 1], rng=np.random.default_rng(0))
    before = net.params.copy()
    net.forward(np.ones((3, 2)))
    assert np.array_equal(before, net.params)


def test_adam_steps():
    p = np.ones(4)
    opt = Adam(4)
    opt.update(p, np.zeros(4))
    assert np.array_equal(p, np.ones(4)) and opt.step == 1
    p, opt = np.zeros(3), Adam(3)
    opt.update(p, np.array([0.5, -2.0, 7.0]))
    assert np.allclose(np.abs(p), 1e-3, rtol=1e-6)
    q, o2 = np.zeros(3), Adam(3)
    o2.update(q, np.array([0.5, -2.0, 7.0]))
    assert np.array_equal(p, q)


def test_param_layout_and_round_trip():
    net = Mlp([3, 5, 2], rng=np.random.default_rng(4))
    assert net.params.size == param_count([3, 5, 2]) == 3 * 5 + 5 + 5 * 2 + 2
    other = Mlp.from_dict(net.to_dict())
    assert np.array_equal(other.params, net.params)


def test_glorot_bounds():
    net = Mlp([20, 30, 1], rng=np.random.default_rng(5))
    a = np.sqrt(6 / 50)
    assert np.abs(net.weights[0]).max() <= a and not net.biases[0].any()
