import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepfosls.errors import ConfigurationError, NonFiniteSampleError
from deepfosls.fields import product_lifting
from deepfosls.geometry import Box
from deepfosls.network import (
    Network,
    ReQU,
    SampleCotangent,
    ScaledTanh,
    backprop_parameter_gradient,
    build_network,
    forward_with_jacobian,
    init_1d,
    init_identity_tail,
    init_tensor,
    make_activation,
    spanning_sample,
)

FIELDS = ("phi", "grad_phi", "tau_values", "div_tau")


def random_net(d, layers, activation, seed, width=5):
    rng = np.random.default_rng(seed)
    ws = [rng.normal(size=(width, d))] + [rng.normal(size=(width, width)) / np.sqrt(width) for _ in range(layers - 1)]
    bs = [rng.uniform(-0.5, 0.5, width) for _ in range(layers)]
    return Network(tuple(ws), tuple(bs), activation)


def activation(name):
    return ReQU() if name == "requ" else ScaledTanh(1.7)


def test_requ_derivatives():
    r = ReQU()
    z = np.array([-1.0, 0.0, 0.5])
    assert list(r.value(z)) == [0.0, 0.0, 0.25]
    assert list(r.d1(z)) == [0.0, 0.0, 1.0]
    assert list(r.d2(z)) == [0.0, 0.0, 2.0]


def test_scaled_tanh_derivatives_match_finite_differences():
    t = ScaledTanh(3.0)
    z = np.linspace(-1, 1, 11)
    h = 1e-6
    assert np.allclose((t.value(z + h) - t.value(z - h)) / (2 * h), t.d1(z), rtol=1e-6, atol=1e-8)
    assert np.allclose((t.d1(z + h) - t.d1(z - h)) / (2 * h), t.d2(z), rtol=1e-6, atol=1e-6)
    tp, tm = ScaledTanh(3.0 + h), ScaledTanh(3.0 - h)
    assert np.allclose((tp.value(z) - tm.value(z)) / (2 * h), t.dm_value(z), rtol=1e-6, atol=1e-8)
    assert np.allclose((tp.d1(z) - tm.d1(z)) / (2 * h), t.dm_d1(z), rtol=1e-6, atol=1e-6)


def test_relu_and_unknown_activations_rejected():
    with pytest.raises(ConfigurationError):
        make_activation("relu")
    with pytest.raises(ConfigurationError):
        make_activation("sigmoid")
    assert make_activation("tanh", 50.0).m == 50.0


def test_forward_single_unit_examples():
    net = Network(([[1.0]],), ([-0.5],), ReQU())
    v, j = forward_with_jacobian(net, np.array([[0.75], [0.25]]))
    assert v[:, 0] == pytest.approx([0.0625, 0.0])
    assert j[:, 0, 0] == pytest.approx([0.5, 0.0])


def test_forward_rejects_non_finite_parameters():
    net = Network(([[np.nan]],), ([0.0],), ReQU())
    with pytest.raises(NonFiniteSampleError):
        forward_with_jacobian(net, np.array([[0.5]]))


def test_identity_tail_composes_requ():
    one = init_1d(6)
    two = init_identity_tail(one, 2)
    assert np.array_equal(two.weights[1], np.eye(6)) and np.array_equal(two.biases[1], np.zeros(6))
    x = np.random.default_rng(0).random((5, 1))
    v1, j1 = forward_with_jacobian(one, x)
    v2, j2 = forward_with_jacobian(two, x)
    assert np.allclose(v2, v1**2, rtol=1e-15)
    assert np.allclose(j2, 2 * v1[:, :, None] * j1, rtol=1e-15)
    with pytest.raises(ConfigurationError):
        init_identity_tail(Network(([[1.0], [2.0]], [[1.0, 1.0]]), ([0.0, 0.0], [0.0]), ReQU()))


@pytest.mark.parametrize("n1", [10, 16])
def test_init_1d_breaking_points(n1):
    net = init_1d(n1)
    i = np.arange(1, n1 + 1)
    assert np.max(np.abs(net.breaking_points_1d() - i / (n1 + 1))) <= 1e-14
    assert net.weights[0][1, 0] == -1.0 and net.biases[0][1] == pytest.approx(2 / (n1 + 1))
    # sign change of each pre-activation at its breaking point
    bp = i / (n1 + 1)
    z = lambda x: net.weights[0][:, 0] * x + net.biases[0]
    assert np.all(z(bp - 1e-9) * z(bp + 1e-9) < 0)


def test_init_tensor_lines():
    net = init_tensor(2, 2)
    w, b = net.weights[0], net.biases[0]
    assert w.shape == (4, 2)
    axes = np.argmax(np.abs(w), axis=1)
    pos = -b / w[np.arange(4), axes]
    assert list(axes) == [0, 0, 1, 1]
    assert pos == pytest.approx([1 / 3, 2 / 3, 1 / 3, 2 / 3])
    # each unit is constant along its line
    x = np.column_stack([np.full(5, 0.8), np.linspace(0, 1, 5)])
    v, _ = forward_with_jacobian(net, x)
    assert np.ptp(v[:, 0]) == 0.0


def test_init_tensor_width_32():
    net = build_network(2, 32, layers=2)
    assert net.widths == [32, 32]
    axes = np.argmax(np.abs(net.weights[0]), axis=1)
    assert np.sum(axes == 0) == 16 and np.sum(axes == 1) == 16
    with pytest.raises(ConfigurationError):
        init_tensor(4, 2, width=6)
    with pytest.raises(ConfigurationError):
        build_network(2, 31)


def test_spanning_sample_hand_value_and_boundary():
    lift = product_lifting(Box.unit(1))
    net = Network(([[1.0]],), ([-1.0 / 3.0],), ReQU())
    s = spanning_sample(net, lift, np.array([[2.0 / 3.0], [0.0], [1.0]]))
    assert s.phi[0, 0] == pytest.approx(2.0 / 81.0, rel=1e-14)
    assert np.all(s.phi[1:] == 0.0)
    assert s.n_u == 1 and s.n_q == 1


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 2), layers=st.integers(1, 2))
def test_phi_vanishes_on_boundary(seed, d, layers):
    net = random_net(d, layers, ReQU(), seed)
    lift = product_lifting(Box.unit(d))
    rng = np.random.default_rng(seed)
    x = rng.random((500, d))
    x[:, 0] = np.where(rng.random(500) < 0.5, 0.0, 1.0)
    assert np.max(np.abs(spanning_sample(net, lift, x).phi)) <= 1e-14


def finite_difference_jacobian(f, x, h=1e-6):
    cols = []
    for k in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


@settings(max_examples=12, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 2), layers=st.integers(1, 2), act=st.sampled_from(["requ", "tanh"]))
def test_spatial_jacobians_match_finite_differences(seed, d, layers, act):
    net = random_net(d, layers, activation(act), seed)
    lift = product_lifting(Box.unit(d))
    x = np.random.default_rng(seed + 1).uniform(0.05, 0.95, (100, d))
    v, j = forward_with_jacobian(net, x)
    fd = finite_difference_jacobian(lambda y: forward_with_jacobian(net, y)[0], x)
    assert np.allclose(fd, j, rtol=1e-6, atol=1e-6 * max(1.0, np.max(np.abs(j))))
    s = spanning_sample(net, lift, x)
    fd = finite_difference_jacobian(lambda y: spanning_sample(net, lift, y).phi, x)
    assert np.allclose(fd, s.grad_phi, rtol=1e-6, atol=1e-6 * max(1.0, np.max(np.abs(s.grad_phi))))
    # product rule
    assert np.allclose(s.grad_phi, s.g[:, None, None] * j + v[:, :, None] * s.grad_g[:, None, :], rtol=1e-14)


def test_zero_cotangent_gives_zero_gradient():
    net = build_network(1, 8, layers=2)
    g = backprop_parameter_gradient(net, product_lifting(Box.unit(1)), np.random.default_rng(0).random((10, 1)), SampleCotangent())
    assert np.all(g.vector() == 0.0)


def test_single_point_phi_cotangent_by_hand():
    net = Network(([[2.0]],), ([-0.5],), ReQU())
    lift = product_lifting(Box.unit(1))
    x = np.array([[0.6]])
    g = backprop_parameter_gradient(net, lift, x, SampleCotangent(phi=np.ones((1, 1)))).vector()
    z = 2.0 * 0.6 - 0.5
    gd = 0.6 * 0.4
    assert g == pytest.approx([gd * 2 * z * 0.6, gd * 2 * z], rel=1e-14)


def random_cotangent(sample, rng):
    return SampleCotangent(**{f: rng.normal(size=getattr(sample, f).shape) for f in FIELDS})


def pairing(net, lift, x, cot):
    s = spanning_sample(net, lift, x)
    return sum(float(np.sum(getattr(cot, f) * getattr(s, f))) for f in FIELDS)


@settings(max_examples=12, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 2), layers=st.integers(1, 2), act=st.sampled_from(["requ", "tanh"]))
def test_parameter_gradient_matches_finite_differences(seed, d, layers, act):
    net = random_net(d, layers, activation(act), seed, width=4)
    lift = product_lifting(Box.unit(d))
    rng = np.random.default_rng(seed + 7)
    x = rng.uniform(0.05, 0.95, (20, d))
    cot = random_cotangent(spanning_sample(net, lift, x), rng)
    g = backprop_parameter_gradient(net, lift, x, cot).vector()
    theta = net.parameters()
    h = 1e-5
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (pairing(net.with_parameters(theta + e), lift, x, cot) - pairing(net.with_parameters(theta - e), lift, x, cot)) / (2 * h)
    assert np.allclose(g, fd, rtol=1e-4, atol=1e-4 * np.max(np.abs(g)))
    # the per-point variant sums to the aggregate
    pp = backprop_parameter_gradient(net, lift, x, cot, per_point=True).vector()
    assert pp.shape == (20, theta.size)
    assert np.allclose(pp.sum(axis=0), g, rtol=1e-12, atol=1e-12 * np.max(np.abs(g)))


def test_non_finite_cotangent_rejected():
    net = init_1d(3)
    x = np.array([[0.3], [0.6]])
    with pytest.raises(NonFiniteSampleError):
        backprop_parameter_gradient(net, product_lifting(Box.unit(1)), x, SampleCotangent(phi=np.full((2, 3), np.inf)))


@pytest.mark.parametrize("act", ["requ", "tanh"])
def test_json_round_trip(act):
    net = build_network(2, 6, layers=2, activation=make_activation(act, 50.0), jitter=0.1, jitter_seed=3)
    back = Network.from_json(net.to_json())
    assert np.array_equal(back.parameters(), net.parameters())
    assert back.activation.name == net.activation.name


def test_jitter_is_seeded_and_keeps_m():
    a = build_network(1, 8, activation=ScaledTanh(50.0), jitter=0.3, jitter_seed=1)
    b = build_network(1, 8, activation=ScaledTanh(50.0), jitter=0.3, jitter_seed=1)
    assert np.array_equal(a.parameters(), b.parameters())
    assert a.activation.m == 50.0
    assert not np.array_equal(a.parameters(), build_network(1, 8, activation=ScaledTanh(50.0)).parameters())
