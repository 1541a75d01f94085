import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cldssm import numcore as nc
from cldssm.errors import IncompatibleCheckpoint, LengthMismatch
from cldssm.nets import (DSSM, Checkpoint, ModelConfig, NoiseParams, ParamRegistry, RecognitionNet,
                         TransitionNet, checkpoint_bytes, checkpoint_from_bytes, gated_scan,
                         load_checkpoint, recognition_forward, registry_assign, registry_flatten,
                         save_checkpoint, scale_noise, transition_forward)

from test_numcore import grad_of, rel_err


def test_zero_transition_gives_zero():
    net = TransitionNet(3, 2, (5,), np.random.default_rng(0))
    for p in net.params:
        p.value = np.zeros_like(p.value)
    out = transition_forward(net, np.array([1.0, -2.0, 3.0]), np.array([0.5, 0.5]))
    assert np.array_equal(out.value, np.zeros(3))


def test_identity_linear_layer():
    net = TransitionNet(2, 1, (), np.random.default_rng(0))
    net.weights[0].value = np.vstack([np.eye(2), np.zeros((1, 2))])
    net.biases[0].value = np.zeros(2)
    out = net(np.array([1.0, 2.0]), np.array([7.0]))
    assert np.array_equal(out.value, np.array([1.0, 2.0]))


def test_transition_gradient_wrt_state():
    net = TransitionNet(3, 1, (6,), np.random.default_rng(1))
    z0, u = np.random.default_rng(2).standard_normal(3), np.array([0.3])
    ((auto, fd),) = grad_of(lambda z: nc.sum(nc.square(net(z, u))), z0)
    assert rel_err(auto, fd) < 1e-4


def test_transition_parameter_gradients():
    rng = np.random.default_rng(3)
    net = TransitionNet(2, 1, (4, 3), rng)
    z, u = rng.standard_normal((5, 2)), np.array([0.7])
    reg = ParamRegistry(net.params)
    nc.backward(nc.sum(nc.square(net(z, u))))
    auto = reg.flat_grad()
    theta = reg.flatten()

    def f(v):
        reg.assign(v)
        with nc.no_grad():
            return float(nc.sum(nc.square(net(z, u))).value)

    fd = nc.finite_diff_grad(f, theta)
    reg.assign(theta)
    assert rel_err(auto, fd) < 1e-4


def test_transition_deterministic():
    net = TransitionNet(2, 0, (4,), np.random.default_rng(4))
    z = np.array([[0.1, 0.2], [0.3, -0.4]])
    assert np.array_equal(net(z).value, net(z).value)


def test_process_noise_scaling():
    noise = NoiseParams(2)
    noise.beta.value = np.zeros(2)
    assert np.array_equal(scale_noise(noise, np.array([1.0, -1.0])).value, [1.0, -1.0])
    noise.beta.value = np.array([np.log(4.0), 0.0])
    assert np.allclose(scale_noise(noise, np.ones(2)).value, [2.0, 1.0], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=6))
def test_noise_covariance_positive_definite(beta):
    noise = NoiseParams(len(beta))
    noise.beta.value = np.array(beta)
    assert np.all(np.linalg.eigvalsh(noise.covariance()) > 0)


def test_zero_recognition_is_standard_normal():
    net = RecognitionNet(3, 4, 5, np.random.default_rng(0))
    for p in net.params:
        p.value = np.zeros_like(p.value)
    q = recognition_forward(net, np.random.default_rng(1).standard_normal((7, 3)))
    assert np.array_equal(q.mean.value, np.zeros(4))
    assert np.array_equal(q.logvar.value, np.zeros(4))


@pytest.mark.parametrize("T", [1, 50])
def test_recognition_shape(T):
    net = RecognitionNet(2, 3, 8, np.random.default_rng(0))
    q = net(np.random.default_rng(T).standard_normal((T, 2)))
    assert q.dim == 3 and q.mean.shape == (3,) and q.logvar.shape == (3,)
    assert np.all(np.isfinite(q.logvar.value))


def test_recognition_logvar_finite_for_bounded_inputs():
    net = RecognitionNet(2, 3, 8, np.random.default_rng(0))
    q = net(np.full((50, 2), 5.0))
    assert np.all(np.isfinite(q.logvar.value))


def test_gated_scan_gradient():
    rng = np.random.default_rng(5)
    proj, w = rng.standard_normal((6, 8)), 0.5 * rng.standard_normal((4, 8))
    weight = rng.standard_normal(4)
    for auto, fd in grad_of(lambda p, r: nc.sum(gated_scan(p, r) * weight), proj, w):
        assert rel_err(auto, fd) < 1e-4


def test_recognition_parameter_gradients():
    rng = np.random.default_rng(6)
    net = RecognitionNet(2, 3, 4, rng)
    x = rng.standard_normal((5, 2))
    reg = ParamRegistry(net.params)

    def loss():
        q = net(x)
        return nc.sum(nc.square(q.mean)) + nc.sum(nc.exp(q.logvar))

    nc.backward(loss())
    auto = reg.flat_grad()
    phi = reg.flatten()

    def f(v):
        reg.assign(v)
        return float(loss().value)

    fd = nc.finite_diff_grad(f, phi)
    reg.assign(phi)
    assert rel_err(auto, fd) < 1e-4


def test_theta_and_phi_disjoint():
    model = DSSM.build(2, 1, ModelConfig(d_z=3, hidden=(4,)), np.random.default_rng(0))
    assert not {id(p) for p in model.theta} & {id(p) for p in model.phi}


def test_registry_round_trip_bit_identical():
    model = DSSM.build(2, 1, ModelConfig(d_z=3, hidden=(4,)), np.random.default_rng(0))
    before = [p.value.copy() for p in model.theta]
    registry_assign(model.theta, registry_flatten(model.theta))
    assert all(np.array_equal(a, p.value) for a, p in zip(before, model.theta))
    v = np.random.default_rng(1).standard_normal(model.theta.size)
    model.theta.assign(v)
    assert np.array_equal(model.theta.flatten(), v)


def test_registry_wrong_length():
    model = DSSM.build(2, 0, ModelConfig(d_z=3, hidden=(4,)), np.random.default_rng(0))
    with pytest.raises(LengthMismatch):
        model.theta.assign(np.zeros(model.theta.size + 1))


def test_parameter_count_for_widths_3_8_2():
    # d_z = 2 and d_u = 1 give widths (3, 8, 2): (3*8 + 8) + (8*2 + 2) weights, plus 2 log-variances
    model = DSSM.build(1, 1, ModelConfig(d_z=2, hidden=(8,)), np.random.default_rng(0))
    assert model.transition.widths == (3, 8, 2)
    assert model.theta.size == (3 * 8 + 8) + (8 * 2 + 2) + 2
    assert model.theta.names[0] == "transition.W0" and model.theta.names[-1] == "noise.beta"


def test_registry_as_node_gradients_flow_to_leaves():
    model = DSSM.build(1, 0, ModelConfig(d_z=2, hidden=(3,)), np.random.default_rng(0))
    flat = model.theta.as_node()
    w = np.arange(model.theta.size, dtype=float)
    nc.backward(nc.sum(flat * w))
    assert np.array_equal(model.theta.flat_grad(), w)


def test_reset_recognition_keeps_leaves_and_count():
    model = DSSM.build(2, 0, ModelConfig(d_z=3, hidden=(4,)), np.random.default_rng(0))
    leaves = [id(p) for p in model.phi]
    size, before = model.phi.size, model.phi.flatten()
    model.reset_recognition(np.random.default_rng(9))
    assert [id(p) for p in model.phi] == leaves and model.phi.size == size
    assert not np.array_equal(before, model.phi.flatten())


def _checkpoint(with_std=True):
    cfg = ModelConfig(d_z=3, hidden=(5, 4), recog_hidden=6, r_var=0.02)
    model = DSSM.build(2, 1, cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    phis = [rng.standard_normal(model.phi.size) for _ in range(3)]
    std = (rng.standard_normal(3), rng.uniform(1, 2, 3)) if with_std else (None, None)
    return Checkpoint(cfg, 2, 1, 17, model.theta.flatten(), phis, *std)


@pytest.mark.parametrize("with_std", [True, False])
def test_checkpoint_round_trip(tmp_path, with_std):
    ck = _checkpoint(with_std)
    save_checkpoint(tmp_path / "m.ckpt", ck)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.model_config == ck.model_config and (back.d_x, back.d_u, back.ensemble) == (2, 1, 17)
    assert np.array_equal(back.theta, ck.theta)
    assert all(np.array_equal(a, b) for a, b in zip(back.phis, ck.phis))
    if with_std:
        assert np.array_equal(back.std_mean, ck.std_mean) and np.array_equal(back.std_scale, ck.std_scale)
    else:
        assert back.std_mean is None
    model = back.build_model()
    assert np.array_equal(model.theta.flatten(), ck.theta)
    assert np.array_equal(model.phi.flatten(), ck.phis[-1])


def test_truncated_checkpoint_rejected():
    raw = checkpoint_bytes(_checkpoint())
    for cut in (0, 10, len(raw) // 2, len(raw) - 1):
        with pytest.raises(IncompatibleCheckpoint):
            checkpoint_from_bytes(raw[:cut])
    with pytest.raises(IncompatibleCheckpoint):
        checkpoint_from_bytes(raw + b"\x00" * 8)
    with pytest.raises(IncompatibleCheckpoint):
        checkpoint_from_bytes(b"NOTACKPT" + raw[8:])
