import numpy as np
import pytest

from martingale_cv.cvmodel import (
    ControlVariateModel,
    MargrabeGradient,
    StepNetworks,
    TimeNetwork,
    ValueGradient,
    load_model,
    save_model,
    time_inputs,
)
from martingale_cv.market import (
    ConfigurationError,
    InitialSampler,
    MarketModel,
    TimeGrid,
    exchange_sigma_bar,
    margrabe_delta,
    simulate_paths,
)
from martingale_cv.mathcore import RandomStream
from martingale_cv.nn import init_network


@pytest.fixture
def setup():
    model = MarketModel([0.3, 0.2], 0.05, correlation=[[1.0, 0.3], [0.3, 1.0]])
    grid = TimeGrid.uniform(0.5, 4)
    paths = simulate_paths(model, grid, 300, InitialSampler.lognormal(), RandomStream(1))
    return model, grid, paths


def _step_model(grid, seed=0, lam=1.0):
    grad = StepNetworks(init_network([2, 5, 2], True, seed, n_nets=grid.n_steps))
    value = StepNetworks(init_network([2, 5, 1], True, seed + 1, n_nets=grid.n_steps + 1))
    return ControlVariateModel(grid, grad, 2, value, lam)


def test_martingale_sum_matches_explicit_loop(setup):
    model, grid, paths = setup
    cv = _step_model(grid)
    expected = np.zeros(paths.n_paths)
    for k in range(grid.n_steps):
        x = paths.assets[:, k]
        theta = cv.gradient.net.select([k])(x)
        dw = paths.wiener_increments[:, k] @ model.chol.entries.T
        sig_dw = x * model.sigma * dw
        expected += np.exp(-0.05 * grid.times[k]) * np.sum(theta * sig_dw, axis=1)
    np.testing.assert_allclose(cv.martingale_sum(paths), expected, rtol=1e-12, atol=1e-14)


def test_margrabe_integrand_uses_remaining_maturity(setup):
    model, grid, paths = setup
    sb = exchange_sigma_bar(model)
    cv = ControlVariateModel(grid, MargrabeGradient(sb, grid.maturity), 2)
    theta = cv.integrands(paths)
    k = 2
    x = paths.assets[:, k]
    np.testing.assert_allclose(theta[:, k], margrabe_delta(x[:, 0], x[:, 1], 0.5 - grid.times[k], sb))


def test_martingale_has_zero_mean_for_any_integrand():
    model = MarketModel(0.3, 0.05, d=2)
    grid = TimeGrid.uniform(0.5, 4)
    paths = simulate_paths(model, grid, 100_000, InitialSampler.fixed(1.0), RandomStream(2))
    m = _step_model(grid, seed=3).martingale_sum(paths)
    assert abs(m.mean()) < 4 * m.std() / np.sqrt(m.size)


def test_value_gradient_matches_finite_differences(setup):
    _, grid, paths = setup
    value = StepNetworks(init_network([2, 6, 1], False, 4, n_nets=grid.n_steps + 1))
    provider = ValueGradient(value, 2)
    x = paths.assets[:, :-1].transpose(1, 0, 2)[:, :5]
    g = provider.evaluate(x, grid.times[:-1], indices=np.arange(grid.n_steps))
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        sub = value.net.select(np.arange(grid.n_steps))
        fd = (sub(x + e) - sub(x - e))[..., 0] / (2 * h)
        np.testing.assert_allclose(g[..., j], fd, rtol=1e-6, atol=1e-8)


def test_time_network_inputs_and_evaluation(setup):
    _, grid, paths = setup
    x = paths.assets[:, :-1].transpose(1, 0, 2)
    rows = time_inputs(x, grid.times[:-1], None)
    assert rows.shape == (1, 4 * 300, 3)
    np.testing.assert_allclose(rows[0, 300:600, 0], grid.times[1])
    provider = TimeNetwork(init_network([3, 4, 2], False, 0))
    assert provider.evaluate(x, grid.times[:-1]).shape == (4, 300, 2)


def test_path_checks(setup):
    model, grid, paths = setup
    cv = _step_model(TimeGrid.uniform(0.5, 5))
    with pytest.raises(ConfigurationError):
        cv.martingale_sum(paths)
    with pytest.raises(ConfigurationError):
        ControlVariateModel(grid, None, 3).check_paths(paths)
    with pytest.raises(ConfigurationError):
        ControlVariateModel(grid, None, 2).value_readout(np.ones((1, 2)))
    with pytest.raises(ValueError):
        ControlVariateModel(grid, None, 2, lam=np.nan)


@pytest.mark.parametrize("kind", ["steps", "time", "value_gradient", "margrabe"])
def test_save_load_round_trip(setup, tmp_path, kind):
    model, grid, paths = setup
    if kind == "steps":
        cv = _step_model(grid, lam=0.8)
    elif kind == "time":
        cv = ControlVariateModel(grid, TimeNetwork(init_network([3, 4, 2], True, 2)), 2,
                                 TimeNetwork(init_network([3, 4, 1], True, 3)))
    elif kind == "value_gradient":
        value = StepNetworks(init_network([2, 4, 1], False, 1, n_nets=grid.n_steps + 1))
        cv = ControlVariateModel(grid, ValueGradient(value, 2), 2, value)
    else:
        cv = ControlVariateModel(grid, MargrabeGradient(exchange_sigma_bar(model), 0.5), 2)
    cv.metadata = {"algorithm": 4}
    save_model(cv, tmp_path, {"note": "kept"})
    back = load_model(tmp_path)
    assert back.lam == cv.lam and back.metadata == {"algorithm": 4}
    np.testing.assert_array_equal(back.martingale_sum(paths), cv.martingale_sum(paths))
    if cv.value is not None:
        x0 = paths.assets[:, 0]
        np.testing.assert_array_equal(back.value_readout(x0), cv.value_readout(x0))


def test_step_model_writes_one_checkpoint_per_network(tmp_path):
    grid = TimeGrid.uniform(0.5, 3)
    save_model(_step_model(grid), tmp_path)
    assert len(list(tmp_path.glob("grad_*.ckpt"))) == 3
    assert len(list(tmp_path.glob("value_*.ckpt"))) == 4


def test_load_rejects_foreign_manifest(tmp_path):
    (tmp_path / "model.json").write_text('{"format": "other"}')
    with pytest.raises(ConfigurationError):
        load_model(tmp_path / "model.json")
