"""Finite-difference verification of every differentiable primitive.

Checks run in float64 so the central-difference oracle itself is trustworthy
at the 1e-4 relative tolerance; training uses float32 with the same kernels.
"""

import numpy as np
import pytest

from stationlab import numerics as nm
from stationlab.errors import ContractViolation

from helpers import assert_grads_close, finite_difference_grads


@pytest.fixture(autouse=True)
def _float64_mode():
    with nm.precision(np.float64):
        yield


def _tensors(rng, *shapes):
    return [nm.Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]


def _check(f, params, h=1e-3):
    graph = nm.Graph()
    loss = f(graph)
    nm.backward(loss, graph)
    analytic = [p.grad.copy() for p in params]
    fd = finite_difference_grads(lambda: float(f(None).data), params, h=h)
    for a, r in zip(analytic, fd):
        assert_grads_close(a, r)


def test_sum_gradient_is_ones():
    x = nm.Tensor(np.arange(6.0).reshape(1, 1, 2, 3), requires_grad=True)
    g = nm.Graph()
    loss = nm.reduce_sum(x, graph=g)
    nm.backward(loss, g)
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_dot_gradient_is_constant_factor():
    rng = np.random.default_rng(0)
    c = rng.standard_normal(7)
    x = nm.Tensor(rng.standard_normal(7), requires_grad=True)
    g = nm.Graph()
    loss = nm.reduce_sum(nm.mul(x, nm.Tensor(c), graph=g), graph=g)
    nm.backward(loss, g)
    np.testing.assert_allclose(x.grad, c, rtol=1e-12)


def test_nonscalar_loss_rejected():
    x = nm.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractViolation):
        nm.backward(x, nm.Graph())


def test_nonparticipating_parameter_gets_zero_grad():
    x = nm.Tensor(np.ones(4), requires_grad=True)
    unused = nm.Tensor(np.ones(2), requires_grad=True)
    g = nm.Graph()
    g.watch(unused)
    loss = nm.reduce_sum(x, graph=g)
    nm.backward(loss, g)
    np.testing.assert_array_equal(unused.grad, np.zeros(2))


def test_conv3d_gradients():
    rng = np.random.default_rng(42)
    x, w, b = _tensors(rng, (2, 4, 4, 4), (3, 2, 3, 3, 3), (3,))

    def f(graph):
        out = nm.conv3d(x, w, b, stride=1, padding=1, graph=graph)
        return nm.reduce_sum(nm.mul(out, out, graph=graph), graph=graph)

    _check(f, [x, w, b])


def test_conv3d_strided_gradients():
    rng = np.random.default_rng(43)
    x, w, b = _tensors(rng, (2, 5, 5, 5), (2, 2, 3, 3, 3), (2,))

    def f(graph):
        out = nm.conv3d(x, w, b, stride=2, padding=1, graph=graph)
        return nm.reduce_sum(nm.mul(out, out, graph=graph), graph=graph)

    _check(f, [x, w, b])


def test_conv3d_1x1_gradients():
    rng = np.random.default_rng(44)
    x, w, b = _tensors(rng, (3, 3, 3, 3), (2, 3, 1, 1, 1), (2,))

    def f(graph):
        out = nm.conv3d(x, w, b, stride=1, padding=0, graph=graph)
        return nm.reduce_sum(nm.mul(out, out, graph=graph), graph=graph)

    _check(f, [x, w, b])


def test_leaky_relu_gradient():
    rng = np.random.default_rng(45)
    x = nm.Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
    # keep inputs away from the kink so central differences are valid
    x.data[np.abs(x.data) < 0.05] += 0.1

    def f(graph):
        out = nm.leaky_relu(x, graph=graph)
        return nm.reduce_sum(nm.mul(out, out, graph=graph), graph=graph)

    _check(f, [x])


def test_spatial_norm_gradient():
    rng = np.random.default_rng(46)
    x = nm.Tensor(rng.standard_normal((2, 3, 3, 3)) * 2 + 1, requires_grad=True)
    c = nm.Tensor(rng.standard_normal((2, 3, 3, 3)))

    def f(graph):
        out = nm.spatial_norm(x, graph=graph)
        return nm.reduce_sum(nm.mul(out, c, graph=graph), graph=graph)

    _check(f, [x])


def test_softmax_gradient():
    rng = np.random.default_rng(47)
    x = nm.Tensor(rng.standard_normal((4, 2, 2, 2)), requires_grad=True)
    c = nm.Tensor(rng.standard_normal((4, 2, 2, 2)))

    def f(graph):
        out = nm.softmax(x, axis=0, graph=graph)
        return nm.reduce_sum(nm.mul(out, c, graph=graph), graph=graph)

    _check(f, [x])


def test_upsample_gradient():
    rng = np.random.default_rng(48)
    x = nm.Tensor(rng.standard_normal((2, 2, 2, 2)), requires_grad=True)
    c = nm.Tensor(rng.standard_normal((2, 4, 4, 4)))

    def f(graph):
        out = nm.upsample_nearest(x, graph=graph)
        return nm.reduce_sum(nm.mul(out, c, graph=graph), graph=graph)

    _check(f, [x])


def test_concat_gradient():
    rng = np.random.default_rng(49)
    a = nm.Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True)
    b = nm.Tensor(rng.standard_normal((2, 2, 2, 2)), requires_grad=True)
    c = nm.Tensor(rng.standard_normal((3, 2, 2, 2)))

    def f(graph):
        out = nm.concat_channels([a, b], graph=graph)
        return nm.reduce_sum(nm.mul(out, c, graph=graph), graph=graph)

    _check(f, [a, b])


def test_scale_channel_gradient():
    rng = np.random.default_rng(50)
    x = nm.Tensor(rng.standard_normal((3, 2, 2, 2)), requires_grad=True)
    s = nm.Tensor(np.array(0.7), requires_grad=True)
    c = nm.Tensor(rng.standard_normal((3, 2, 2, 2)))

    def f(graph):
        out = nm.scale_channel(x, 1, s, graph=graph)
        return nm.reduce_sum(nm.mul(out, c, graph=graph), graph=graph)

    _check(f, [x, s])


def test_take_scalar_gradient():
    rng = np.random.default_rng(51)
    x = nm.Tensor(rng.standard_normal(5), requires_grad=True)

    def f(graph):
        picked = nm.take_scalar(x, 2, graph=graph)
        return nm.mul(picked, picked, graph=graph)

    _check(f, [x])


def test_dice_ce_gradient():
    rng = np.random.default_rng(52)
    probs = nm.Tensor(rng.uniform(0.05, 0.95, size=(3, 3, 3, 3)), requires_grad=True)
    target = rng.integers(0, 3, size=(3, 3, 3))

    def f(graph):
        return nm.dice_ce_loss(probs, target, 3, graph=graph)

    _check(f, [probs])


def test_full_chain_finite_difference():
    # conv3d -> leaky relu -> softmax -> dice+ce on a 1x1x6x6x6 input.
    # Channel biases push activations well away from the relu kink (one
    # channel onto each slope branch) so the central-difference oracle never
    # straddles the non-differentiable point.
    rng = np.random.default_rng(53)
    x = nm.Tensor(rng.standard_normal((1, 6, 6, 6)), requires_grad=True)
    w = nm.Tensor(rng.standard_normal((3, 1, 3, 3, 3)) * 0.15, requires_grad=True)
    b = nm.Tensor(np.array([-4.0, 4.0, 4.0]), requires_grad=True)
    target = rng.integers(0, 3, size=(6, 6, 6))

    pre = nm.conv3d(x, w, b, stride=1, padding=1)
    assert np.abs(pre.data).min() > 0.2, "seed must keep activations off the kink"

    def f(graph):
        h = nm.conv3d(x, w, b, stride=1, padding=1, graph=graph)
        h = nm.leaky_relu(h, graph=graph)
        p = nm.softmax(h, axis=0, graph=graph)
        return nm.dice_ce_loss(p, target, 3, graph=graph)

    graph = nm.Graph()
    loss = f(graph)
    nm.backward(loss, graph)
    analytic = [x.grad.copy(), w.grad.copy(), b.grad.copy()]
    fd = finite_difference_grads(lambda: float(f(None).data), [x, w, b], h=1e-3)
    for a, r in zip(analytic, fd):
        assert_grads_close(a, r, rel=1e-4, abs_floor=1e-6)


def test_forward_backward_bitwise_deterministic():
    with nm.precision(np.float32):
        def run():
            rng = np.random.default_rng(99)
            x = nm.Tensor(rng.standard_normal((1, 6, 6, 6)).astype(np.float32),
                          requires_grad=True)
            w = nm.Tensor((rng.standard_normal((2, 1, 3, 3, 3)) * 0.4).astype(np.float32),
                          requires_grad=True)
            b = nm.Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
            target = rng.integers(0, 2, size=(6, 6, 6))
            g = nm.Graph()
            h = nm.conv3d(x, w, b, 1, 1, graph=g)
            p = nm.softmax(nm.leaky_relu(h, graph=g), axis=0, graph=g)
            loss = nm.dice_ce_loss(p, target, 2, graph=g)
            nm.backward(loss, g)
            return loss.data.tobytes() + w.grad.tobytes() + x.grad.tobytes()

        assert run() == run()
