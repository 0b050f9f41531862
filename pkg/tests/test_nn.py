import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridslice.nn import (
    DenseLayer,
    DenseNet,
    GradientTape,
    NonFiniteGradientError,
    OptimizerState,
    ShapeError,
    TapeError,
    analytic_gradients,
    backward,
    dumps_checkpoint,
    finite_difference_check,
    forward,
    load_checkpoint,
    loads_checkpoint,
    max_relative_error,
    numeric_gradients,
    optimize_step,
    save_checkpoint,
)


def sum_loss(out):
    return float(np.sum(out)), np.ones_like(out)


def square_loss(out):
    return float(0.5 * np.sum(out**2)), out.copy()


def test_identity_linear_layer():
    net = DenseNet([DenseLayer(np.eye(2), np.zeros(2), "linear")])
    np.testing.assert_array_equal(forward(net, [3.0, -2.0]), [3.0, -2.0])


def test_relu_clamps_negative_preactivation():
    net = DenseNet([DenseLayer([[1.0]], [-5.0], "relu")])
    assert forward(net, [3.0])[0] == 0.0


def test_zero_input_matches_stepwise_oracle():
    rng = np.random.default_rng(3)
    net = DenseNet.build([4, 5, 3], rng, hidden_activation="tanh")
    for layer in net.layers:
        layer.bias[:] = rng.normal(size=layer.bias.shape)
    w0, b0 = net.layers[0].weight, net.layers[0].bias
    w1, b1 = net.layers[1].weight, net.layers[1].bias
    h = np.tanh(w0 @ np.zeros(4) + b0)
    expected = w1 @ h + b1
    np.testing.assert_allclose(forward(net, np.zeros(4)), expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(expected, w1 @ np.tanh(b0) + b1, atol=1e-15)


def test_shape_mismatch_rejected():
    net = DenseNet.build([3, 2], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(net, np.zeros(4))
    with pytest.raises(ShapeError):
        DenseNet([DenseLayer(np.zeros((2, 3)), np.zeros(2)), DenseLayer(np.zeros((1, 3)), np.zeros(1))])


def test_linear_weight_gradient_is_input():
    net = DenseNet([DenseLayer([[0.3, -0.7]], [0.1], "linear")])
    tape = GradientTape()
    x = np.array([2.0, 5.0])
    forward(net, x, tape)
    backward(net, tape, np.array([1.0]))
    np.testing.assert_array_equal(tape.grads[0], [[2.0, 5.0]])
    np.testing.assert_array_equal(tape.grads[1], [1.0])


def test_dead_relu_has_zero_gradient():
    net = DenseNet([DenseLayer([[1.0], [1.0]], [-10.0, 0.0], "relu")])
    tape = GradientTape()
    forward(net, [1.0], tape)
    backward(net, tape, np.ones(2))
    assert tape.grads[0][0, 0] == 0.0 and tape.grads[1][0] == 0.0
    assert tape.grads[0][1, 0] == 1.0


def test_backward_without_forward_is_usage_error():
    net = DenseNet.build([2, 2], np.random.default_rng(0))
    with pytest.raises(TapeError):
        backward(net, GradientTape(), np.ones(2))
    other = DenseNet.build([2, 2], np.random.default_rng(1))
    tape = GradientTape()
    forward(other, np.ones(2), tape)
    with pytest.raises(TapeError):
        backward(net, tape, np.ones(2))


def test_gradient_buffers_mirror_parameters():
    net = DenseNet.build([3, 4, 2], np.random.default_rng(0))
    grads = analytic_gradients(net, np.ones((5, 3)), sum_loss)
    assert [g.shape for g in grads] == [p.shape for p in net.parameters()]


@pytest.mark.parametrize("seed", range(5))
def test_two_layer_finite_difference(seed):
    rng = np.random.default_rng(seed)
    net = DenseNet.build([4, 6, 3], rng, hidden_activation="tanh")
    x = rng.normal(size=4)
    assert finite_difference_check(net, x, square_loss, eps=1e-5) < 1e-4


def test_linear_scalar_net_is_exact():
    net = DenseNet.build([3, 1], np.random.default_rng(1))
    assert finite_difference_check(net, np.array([0.5, -1.0, 2.0]), sum_loss) < 1e-8


def test_corrupted_gradient_detected():
    rng = np.random.default_rng(2)
    net = DenseNet.build([3, 4, 2], rng, hidden_activation="tanh")
    x = rng.normal(size=3)
    analytic = analytic_gradients(net, x, square_loss)
    analytic[0][1, 2] += 1.0
    assert max_relative_error(analytic, numeric_gradients(net, x, square_loss)) > 0.1


def test_eps_bounds():
    net = DenseNet.build([2, 1], np.random.default_rng(0))
    with pytest.raises(ValueError):
        finite_difference_check(net, np.ones(2), sum_loss, eps=0.1)
    with pytest.raises(ValueError):
        finite_difference_check(net, np.ones(2), sum_loss, eps=0.0)


def test_sgd_arithmetic():
    net = DenseNet([DenseLayer([[1.0]], [0.0])])
    optimize_step(net, [np.array([[2.0]]), np.array([0.0])], OptimizerState("sgd", 0.1))
    assert net.layers[0].weight[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_gradient_fixed_point():
    net = DenseNet.build([3, 4, 2], np.random.default_rng(0))
    before = [p.copy() for p in net.parameters()]
    opt = OptimizerState("sgd", 0.5)
    optimize_step(net, [np.zeros_like(p) for p in net.parameters()], opt)
    for a, b in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, b)
    assert opt.step_count == 1


def test_adam_first_step_matches_hand_rolled_oracle():
    g, p0, lr, b1, b2, eps = 0.37, 1.5, 1e-3, 0.9, 0.999, 1e-8
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    expected = p0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    net = DenseNet([DenseLayer([[p0]], [0.0])])
    opt = OptimizerState("adam", lr, b1, b2, eps)
    optimize_step(net, [np.array([[g]]), np.array([0.0])], opt)
    assert net.layers[0].weight[0, 0] == pytest.approx(expected, abs=1e-15)
    assert net.layers[0].weight[0, 0] == pytest.approx(p0 - lr * g / (abs(g) + eps), rel=1e-9)
    assert opt.step_count == 1
    assert opt.first_moment[0].shape == (1, 1)


def test_nonfinite_gradient_rejected():
    net = DenseNet.build([2, 1], np.random.default_rng(0))
    before = net.flat.copy()
    grads = [np.zeros_like(p) for p in net.parameters()]
    grads[0][0, 0] = np.nan
    opt = OptimizerState("adam")
    with pytest.raises(NonFiniteGradientError):
        optimize_step(net, grads, opt)
    np.testing.assert_array_equal(before, net.flat)
    assert opt.step_count == 0


def test_parameters_stay_finite_after_updates():
    rng = np.random.default_rng(5)
    net = DenseNet.build([3, 8, 2], rng)
    opt = OptimizerState("adam", 1e-2)
    for _ in range(50):
        x = rng.normal(size=(16, 3))
        tape = GradientTape()
        out = forward(net, x, tape)
        optimize_step(net, backward(net, tape, out / len(x)), opt)
        assert net.all_finite()


def test_forward_is_deterministic():
    a = DenseNet.build([5, 7, 3], np.random.default_rng(11))
    b = DenseNet.build([5, 7, 3], np.random.default_rng(11))
    x = np.random.default_rng(0).normal(size=(4, 5))
    assert forward(a, x).tobytes() == forward(b, x).tobytes()


def test_checkpoint_round_trip(tmp_path):
    net = DenseNet.build([4, 6, 2], np.random.default_rng(9), hidden_activation="tanh")
    back = loads_checkpoint(dumps_checkpoint(net))
    assert [l.activation for l in back.layers] == ["tanh", "linear"]
    assert back.flat.tobytes() == net.flat.tobytes()
    path = tmp_path / "q.gsnn"
    save_checkpoint(net, path)
    assert load_checkpoint(path).flat.tobytes() == net.flat.tobytes()
    with pytest.raises(ValueError):
        loads_checkpoint(b"XXXX" + dumps_checkpoint(net)[4:])


def test_copy_and_load_from_are_independent():
    net = DenseNet.build([3, 3], np.random.default_rng(0))
    twin = net.copy()
    net.layers[0].weight[0, 0] += 1.0
    assert twin.layers[0].weight[0, 0] != net.layers[0].weight[0, 0]
    twin.load_from(net)
    assert twin.flat.tobytes() == net.flat.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["tanh", "linear"]))
def test_gradient_property_smooth(seed, act):
    rng = np.random.default_rng(seed)
    net = DenseNet.build([3, 5, 2], rng, hidden_activation=act)
    assert finite_difference_check(net, rng.normal(size=(2, 3)), square_loss) < 1e-4
