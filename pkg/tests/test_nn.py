import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_network, smooth_gradient_errors
from martingale_cv.nn import (
    AdamState,
    CheckpointError,
    LearningRateSchedule,
    Network,
    TrainingAborted,
    adam_step,
    backward,
    forward,
    init_network,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)


def test_parameter_count():
    assert parameter_count([2, 22, 22, 2]) == (2 * 22 + 22) + (22 * 22 + 22) + (22 * 2 + 2)
    assert parameter_count([3, 4, 1], batchnorm=True) == (12 + 4) + (4 + 1) + 2 * (3 + 4 + 1)
    net = init_network([3, 4, 1], True)
    assert net.n_parameters() == sum(p[0].size for p in net.parameters())


def test_he_initialisation_scale():
    net = init_network([200, 300, 1], False, 0)
    w = net.weights[0]
    assert w.std() == pytest.approx(np.sqrt(2.0 / 200), rel=0.02)
    assert np.all(net.biases[0] == 0.0)


def test_invalid_architectures():
    with pytest.raises(ValueError):
        Network([3])
    with pytest.raises(ValueError):
        Network([3, 0, 1])
    net = init_network([3, 4, 1])
    with pytest.raises(ValueError):
        net(np.ones((5, 2)))
    stacked = init_network([3, 4, 1], n_nets=2)
    with pytest.raises(ValueError):
        stacked(np.ones((5, 3)))


def test_forward_matches_manual_relu_network():
    net = init_network([2, 3, 1], False, 1)
    x = np.array([[0.5, -1.0], [2.0, 0.3]])
    w1, b1, w2, b2 = (a[0] for a in net.parameters())
    expected = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
    np.testing.assert_allclose(net(x), expected, rtol=1e-14)


def test_batchnorm_train_output_is_standardised():
    net = init_network([3, 8, 2], True, 0)
    x = np.random.default_rng(0).normal(2.0, 3.0, size=(500, 3))
    out, _ = net.forward(x, train=True)
    # final batch-norm site with unit scale and zero shift
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=0), 1.0, rtol=1e-4)


def test_running_statistics_update():
    net = init_network([2, 1], True, 0)
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(100, 2))
    net.forward(x, train=True)
    np.testing.assert_allclose(net.running_mean[0][0, 0], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(net.running_var[0][0, 0], 0.9 + 0.1 * x.var(axis=0, ddof=1))
    before = [a.copy() for a in net.state_arrays()]
    net.forward(x, train=True, update_stats=False)
    net.forward(x, train=False)
    for a, b in zip(before, net.state_arrays()):
        np.testing.assert_array_equal(a, b)


def test_stacked_networks_are_independent():
    stacked = init_network([2, 5, 1], True, 3, n_nets=4)
    x = np.random.default_rng(2).normal(size=(4, 50, 2))
    out = stacked(x)
    for k in range(4):
        np.testing.assert_allclose(stacked.select([k])(x[k]), out[k], rtol=1e-13)
    rebuilt = Network.stack([stacked.select([k]) for k in range(4)])
    np.testing.assert_array_equal(rebuilt(x), out)


def test_set_member_invalidates_caches():
    stacked = init_network([2, 3, 1], False, 0, n_nets=2)
    _, cache = stacked.forward(np.ones((2, 4, 2)), train=True)
    stacked.set_member(1, init_network([2, 3, 1], False, 5))
    with pytest.raises(RuntimeError):
        stacked.backward(cache, np.ones((2, 4, 1)))


@pytest.mark.parametrize("batchnorm", [False, True])
@pytest.mark.parametrize("train", [False, True])
def test_gradients_match_finite_differences(batchnorm, train):
    rng = np.random.default_rng(10 + 2 * batchnorm + train)
    for _ in range(5):
        net = random_network(rng, batchnorm, n_nets=2)
        errors, input_error = smooth_gradient_errors(net, rng, train, batch=6)
        assert max(errors.values()) <= 1e-5, errors
        assert input_error <= 1e-5


def test_module_level_forward_backward():
    net = init_network([2, 4, 1], True, 0)
    x = np.random.default_rng(0).normal(size=(10, 2))
    out, cache = forward(net, x, mode="train")
    grads, dx = backward(net, cache, np.ones_like(out))
    assert len(grads) == len(net.parameters())
    assert dx.shape == x.shape
    with pytest.raises(ValueError):
        forward(net, x, mode="test")


def test_input_gradient_of_linear_network():
    net = init_network([3, 1], False, 4)
    dx = net.input_gradient(np.ones((7, 3)))
    np.testing.assert_allclose(dx, np.broadcast_to(net.weights[0][0, :, 0], (7, 3)))


def test_learning_rate_schedule():
    s = LearningRateSchedule()
    assert s(0) == 1e-3 and s(9999) == 1e-3 and s(10_000) == 1e-4


def test_adam_first_step_moves_by_learning_rate():
    p = [np.array([1.0, -2.0, 3.0])]
    g = [np.array([0.5, -4.0, 1e-3])]
    state = AdamState.for_params(p)
    adam_step(p, g, state)
    # bias-corrected first step is lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0, 3.0]) - 1e-3 * g[0] / (np.abs(g[0]) + 1e-8)
    np.testing.assert_allclose(p[0], expected, rtol=1e-12)
    assert state.t == 1


def test_adam_minimises_quadratic():
    p = [np.array([3.0, -1.0])]
    state = AdamState.for_params(p)
    for _ in range(3000):
        adam_step(p, [2.0 * p[0]], state, lr=1e-2)
    np.testing.assert_allclose(p[0], 0.0, atol=1e-2)


def test_adam_aborts_on_nan():
    p = [np.zeros(2)]
    with pytest.raises(TrainingAborted):
        adam_step(p, [np.array([np.nan, 0.0])], AdamState.for_params(p))
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], AdamState.for_params(p))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans(), st.integers(1, 3))
def test_checkpoint_round_trip(tmp_path_factory, seed, batchnorm, n_nets):
    rng = np.random.default_rng(seed)
    net = random_network(rng, batchnorm, n_nets)
    if batchnorm:
        net.forward(rng.normal(size=(n_nets, 20, net.input_width)), train=True)
    net.metadata = {"time_index": 3}
    path = tmp_path_factory.mktemp("ckpt") / "net.ckpt"
    save_checkpoint(net, path, {"note": "x"})
    back = load_checkpoint(path)
    assert back.layer_sizes == net.layer_sizes and back.n_nets == n_nets
    assert back.metadata == {"time_index": 3, "note": "x"}
    for a, b in zip(net.parameters() + net.state_arrays(), back.parameters() + back.state_arrays()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_is_byte_deterministic(tmp_path):
    net = init_network([2, 3, 1], True, 7)
    save_checkpoint(net, tmp_path / "a.ckpt")
    save_checkpoint(init_network([2, 3, 1], True, 7), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_corrupted_checkpoints_are_rejected(tmp_path):
    net = init_network([2, 3, 1], True, 7)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    raw = path.read_bytes()

    flipped = bytearray(raw)
    flipped[raw.index(b"\n") + 5] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    (tmp_path / "short.ckpt").write_bytes(raw[:-20])
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    (tmp_path / "head.ckpt").write_bytes(b"{broken\n" + raw[raw.index(b"\n") + 1:])
    for name in ("flip", "short", "junk", "head"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / f"{name}.ckpt")
