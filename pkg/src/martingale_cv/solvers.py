"""Training algorithms that produce :class:`ControlVariateModel` artifacts.

Seven learners are provided:

1. projection onto per-timestep value networks, gradient by input differentiation
2. the same, trained one timestep at a time backwards with warm starts
3. direct regression of the gradient on Bismut-Elworthy-Li weights
4. one-step BSDE residuals, per timestep backwards with warm starts
5. the BSDE residual loss on two networks that take time as an input
6. minimisation of the batch variance of the controlled estimator
7. maximisation of the squared batch correlation between payoff and martingale

Every optimiser step draws a fresh batch of paths. Loss gradients with respect
to network outputs are written out by hand and pushed through
:meth:`Network.backward`.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cvmodel import ControlVariateModel, StepNetworks, TimeNetwork, ValueGradient
from .evaluation import optimal_lambda
from .market import (
    ConfigurationError,
    DomainError,
    InitialSampler,
    MarketModel,
    ParametricSampler,
    PathBatch,
    Payoff,
    TimeGrid,
    simulate_paths,
    variational_from_paths,
)
from .mathcore import RandomStream
from .nn import AdamState, LearningRateSchedule, Network, TrainingAborted, adam_step, init_network

__all__ = [
    "TrainConfig",
    "PricingProblem",
    "LossHistory",
    "stopping_criterion",
    "projection_targets",
    "bel_targets",
    "bsde_residual",
    "joint_parity_layers",
    "train_projection",
    "train_projection_iterative",
    "train_bel",
    "train_mrs_iterative",
    "train_mrs_joint",
    "train_var_min",
    "train_corr_max",
    "train",
    "ALGORITHMS",
    "ProjectionSolver",
    "IterativeProjectionSolver",
    "BELSolver",
    "IterativeMRSSolver",
    "MRSSolver",
    "VarianceMinSolver",
    "CorrelationMaxSolver",
]

logger = logging.getLogger(__name__)

# substream ids below the training seed
INIT_STREAM, DATA_STREAM, LAMBDA_STREAM = 0, 1, 2


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    """Optimisation and architecture settings shared by all learners.

    ``hidden_width`` defaults to ``d + 20``. ``joint_hidden_layers`` and
    ``joint_width`` size the time-input networks of the joint BSDE learner;
    they default to one hidden layer per timestep of width ``d + 20``.
    """

    batch_size: int = 5000
    epsilon: float = 5e-6
    window: int = 100
    max_iterations: int = 100_000
    seed: int = 0
    schedule: LearningRateSchedule = field(default_factory=LearningRateSchedule)
    hidden_layers: int = 2
    hidden_width: Optional[int] = None
    batchnorm: bool = True
    joint_hidden_layers: Optional[int] = None
    joint_width: Optional[int] = None
    warm_start: bool = True
    post_lambda: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if self.window < 1:
            raise ConfigurationError("window must be at least 1")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be positive")
        if self.hidden_layers < 0:
            raise ConfigurationError("hidden_layers must be non-negative")

    def width(self, d: int) -> int:
        return self.hidden_width if self.hidden_width is not None else d + 20

    def layer_sizes(self, n_in: int, n_out: int, d: int) -> list:
        return [n_in] + [self.width(d)] * self.hidden_layers + [n_out]


@dataclass
class PricingProblem:
    """Market, grid, payoff and the law of the initial state (and parameters)."""

    model: MarketModel
    grid: TimeGrid
    payoff: Payoff
    init: InitialSampler = field(default_factory=lambda: InitialSampler.fixed(1.0))
    parametric: Optional[ParametricSampler] = None

    def __post_init__(self):
        self.payoff.check_dimension(self.model.d)

    @property
    def d(self) -> int:
        return self.model.d

    @property
    def extra_names(self) -> tuple:
        return () if self.parametric is None else self.parametric.names

    @property
    def n_extra(self) -> int:
        return 0 if self.parametric is None else self.parametric.n_features(self.d)

    def simulate(self, n: int, stream, grid: Optional[TimeGrid] = None) -> PathBatch:
        return simulate_paths(
            self.model, grid or self.grid, n, self.init, stream, self.parametric
        )

    def discounted_payoff(self, paths: PathBatch) -> np.ndarray:
        """``D(t_0, T) g(X_T)`` per path."""
        return paths.discounts()[:, -1] * self.payoff(paths.terminal)


@dataclass
class LossHistory:
    """Loss per optimiser step plus the training-cost counters.

    ``segments`` lists ``(label, first, last, converged)`` for each
    sub-problem (one per timestep for the iterative learners).
    """

    batch_size: int
    losses: list = field(default_factory=list)
    learning_rates: list = field(default_factory=list)
    segments: list = field(default_factory=list)

    def __len__(self):
        return len(self.losses)

    @property
    def steps(self) -> int:
        return len(self.losses)

    @property
    def paths(self) -> int:
        return self.steps * self.batch_size

    @property
    def converged(self) -> bool:
        return all(seg[3] for seg in self.segments)

    def record(self, loss: float, lr: float) -> None:
        self.losses.append(float(loss))
        self.learning_rates.append(float(lr))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss", "learning_rate"])
            for i, (loss, lr) in enumerate(zip(self.losses, self.learning_rates)):
                writer.writerow([i, repr(loss), repr(lr)])


def stopping_criterion(history, window: int, epsilon: float) -> bool:
    """True once the means of the last two loss windows differ by less than ``epsilon``."""
    if window < 1:
        raise ValueError("window must be at least 1")
    losses = history.losses if isinstance(history, LossHistory) else history
    if len(losses) < 2 * window:
        return False
    last = np.mean(losses[-window:])
    prev = np.mean(losses[-2 * window : -window])
    return bool(abs(last - prev) < epsilon)


class _Loop:
    """Runs optimiser steps until the windowed criterion fires."""

    def __init__(self, config: TrainConfig, history: LossHistory):
        self.config = config
        self.history = history

    def run(self, step: Callable[[float], float], label) -> bool:
        cfg = self.config
        start = len(self.history)
        for _ in range(cfg.max_iterations):
            lr = cfg.schedule(len(self.history))
            loss = step(lr)
            if not np.isfinite(loss):
                raise TrainingAborted(
                    f"non-finite loss at step {len(self.history)} (segment {label})"
                )
            self.history.record(loss, lr)
            if stopping_criterion(self.history.losses[start:], cfg.window, cfg.epsilon):
                self.history.segments.append((label, start, len(self.history), True))
                return True
        self.history.segments.append((label, start, len(self.history), False))
        warnings.warn(
            f"segment {label} stopped at max_iterations={cfg.max_iterations} "
            "before the loss stabilised",
            ConvergenceWarning,
            stacklevel=3,
        )
        return False


def _new_net(sizes, batchnorm, rng, n_nets=1, extra=()) -> Network:
    return init_network(sizes, batchnorm, rng, n_nets=n_nets, extra_inputs=extra)


def _adam_update(nets: Sequence[Network], grads: list, state: AdamState, lr: float) -> None:
    params = [p for n in nets for p in n.parameters()]
    adam_step(params, grads, state, lr)
    for n in nets:
        n.mark_updated()


def _states(paths: PathBatch, first: int, stop: int) -> np.ndarray:
    """Asset states at grid nodes ``first..stop-1`` as a ``(K, n, d)`` stack."""
    return paths.assets[:, first:stop, :].transpose(1, 0, 2)


def _finish(cv: ControlVariateModel, problem: PricingProblem, config: TrainConfig,
            history: LossHistory, algorithm: int, post_lambda=None) -> ControlVariateModel:
    if config.post_lambda if post_lambda is None else post_lambda:
        paths = problem.simulate(config.batch_size, RandomStream(config.seed, LAMBDA_STREAM))
        lam, degenerate = optimal_lambda(problem.discounted_payoff(paths), cv.martingale_sum(paths))
        if not degenerate:
            cv.lam = lam
    cv.metadata.update(
        algorithm=algorithm,
        seed=config.seed,
        epsilon=config.epsilon,
        batch_size=config.batch_size,
        training_steps=history.steps,
        training_paths=history.paths,
        converged=history.converged,
    )
    return cv


# --------------------------------------------------------------------------- #
# Regression targets
# --------------------------------------------------------------------------- #


def projection_targets(paths: PathBatch, payoff: Payoff, model=None) -> np.ndarray:
    """``D(t_k, T) g(X_T)`` for k = 0..N-1, shape (n, N)."""
    g = payoff(paths.terminal)
    return paths.discounts_to_maturity()[:, :-1] * g[:, None]


def bel_targets(paths: PathBatch, payoff: Payoff, model=None) -> np.ndarray:
    """Bismut-Elworthy-Li gradient samples for k = 0..N-1, shape (n, N, d).

    With the weight ``a(s) = 1/(T - t_k)`` and the first variation restarted
    at ``t_k``::

        (D(t_k,T) g(X_T) - g(X_k)) / (T - t_k)
            * sum_{n >= k} (sigma^{-1}(x_n) Y_n Y_k^{-1})^T dW_{n+1}

    ``Y`` is the Euler first variation from ``t_0``; the flow from ``t_k`` is
    ``Y_n Y_k^{-1}``.
    """
    x = paths.assets[:, :-1, :]
    sig = np.asarray(paths.sigma)
    sig_b = sig[:, None, :] if sig.ndim == 2 else sig
    scale = x * sig_b
    bad = np.argwhere(~(scale > 0))
    if bad.size:
        i, k = bad[0][:2]
        raise DomainError(f"diffusion is singular on path {i} at time index {k}")
    # sigma^{-T} dW = diag(1/(x sigma)) C^{-T} dW
    n, N, d = paths.wiener_increments.shape
    ct_inv_dw = solve_triangular(
        paths.chol.T, paths.wiener_increments.reshape(-1, d).T, lower=False
    ).T.reshape(n, N, d)
    u = ct_inv_dw / scale
    y = variational_from_paths(paths)[:, :-1]  # Y_n, n = 0..N-1
    z = np.einsum("pnij,pni->pnj", y, u)  # Y_n^T sigma^{-T} dW_{n+1}
    tail = np.cumsum(z[:, ::-1], axis=1)[:, ::-1]
    flow = np.linalg.solve(y.transpose(0, 1, 3, 2), tail[..., None])[..., 0]
    g_T = payoff(paths.terminal)
    g_k = payoff(x)
    remaining = paths.grid.maturity - paths.grid.times[:-1]
    coef = (paths.discounts_to_maturity()[:, :-1] * g_T[:, None] - g_k) / remaining
    return coef[..., None] * flow


def bsde_residual(v_next, v_now, theta, vol_inc, disc_now) -> np.ndarray:
    """One-step residual ``V_{m+1} - V_m - D_m theta . sigma dW`` (discounting in ``v``)."""
    return v_next - v_now - disc_now * np.sum(theta * vol_inc, axis=-1)


# --------------------------------------------------------------------------- #
# Algorithms 1 and 2: projection
# --------------------------------------------------------------------------- #


def train_projection(config: TrainConfig, problem: PricingProblem):
    """Regress every ``D(t_k,T) g(X_T)`` on ``x_k`` with one value network per node."""
    d, N = problem.d, problem.grid.n_steps
    init_rng = RandomStream(config.seed, INIT_STREAM).generator()
    data_rng = RandomStream(config.seed, DATA_STREAM).generator()
    sizes = config.layer_sizes(d + problem.n_extra, 1, d)
    net = _new_net(sizes, config.batchnorm, init_rng, N, problem.extra_names)
    adam = AdamState.for_params(net.parameters(), config.schedule)
    history = LossHistory(config.batch_size)

    def step(lr):
        paths = problem.simulate(config.batch_size, data_rng)
        target = projection_targets(paths, problem.payoff).T[..., None]
        out, cache = net.forward(step_inputs_of(paths, 0, N), train=True)
        err = out - target
        n = config.batch_size
        grads, _ = net.backward(cache, 2.0 * err / n)
        _adam_update([net], grads, adam, lr)
        return float(np.sum(err**2) / n)

    _Loop(config, history).run(step, "all")
    value = StepNetworks(net)
    cv = ControlVariateModel(
        problem.grid, ValueGradient(value, d), d, value, 1.0, problem.extra_names
    )
    return _finish(cv, problem, config, history, 1), history


def step_inputs_of(paths: PathBatch, first: int, stop: int) -> np.ndarray:
    x = _states(paths, first, stop)
    if paths.extra is None:
        return x
    e = np.broadcast_to(paths.extra[None], (x.shape[0],) + paths.extra.shape)
    return np.concatenate([x, e], axis=-1)


def _sub_grid(grid: TimeGrid, *indices) -> tuple:
    """Grid through node 0 and ``indices``, and the positions of ``indices`` in it."""
    sub = grid.sub_grid((0,) + indices)
    pos = tuple(int(np.searchsorted(sub.times, grid.times[i])) for i in indices)
    return sub, pos


def train_projection_iterative(config: TrainConfig, problem: PricingProblem):
    """Projection learner run one node at a time from ``t_{N-1}`` back to ``t_0``."""
    d, N = problem.d, problem.grid.n_steps
    init_rng = RandomStream(config.seed, INIT_STREAM).generator()
    data_rng = RandomStream(config.seed, DATA_STREAM).generator()
    sizes = config.layer_sizes(d + problem.n_extra, 1, d)
    fresh = _new_net(sizes, config.batchnorm, init_rng, 1, problem.extra_names)
    history = LossHistory(config.batch_size)
    loop = _Loop(config, history)
    trained = [None] * N
    for m in range(N - 1, -1, -1):
        if m < N - 1 and config.warm_start:
            net = trained[m + 1].copy()
        else:
            net = fresh.copy()
        adam = AdamState.for_params(net.parameters(), config.schedule)
        sub, (pos_m, _) = _sub_grid(problem.grid, m, N)
        n = config.batch_size

        def step(lr, net=net, adam=adam, sub=sub, pos_m=pos_m):
            paths = problem.simulate(n, data_rng, sub)
            target = (paths.discounts_to_maturity()[:, pos_m] * problem.payoff(paths.terminal))
            out, cache = net.forward(step_inputs_of(paths, pos_m, pos_m + 1), train=True)
            err = out - target[None, :, None]
            grads, _ = net.backward(cache, 2.0 * err / n)
            _adam_update([net], grads, adam, lr)
            return float(np.sum(err**2) / n)

        loop.run(step, m)
        trained[m] = net
    value = StepNetworks(Network.stack(trained))
    cv = ControlVariateModel(
        problem.grid, ValueGradient(value, d), d, value, 1.0, problem.extra_names
    )
    return _finish(cv, problem, config, history, 2), history


# --------------------------------------------------------------------------- #
# Algorithm 3: Bismut-Elworthy-Li regression
# --------------------------------------------------------------------------- #


def train_bel(config: TrainConfig, problem: PricingProblem):
    d, N = problem.d, problem.grid.n_steps
    init_rng = RandomStream(config.seed, INIT_STREAM).generator()
    data_rng = RandomStream(config.seed, DATA_STREAM).generator()
    sizes = config.layer_sizes(d + problem.n_extra, d, d)
    net = _new_net(sizes, config.batchnorm, init_rng, N, problem.extra_names)
    adam = AdamState.for_params(net.parameters(), config.schedule)
    history = LossHistory(config.batch_size)
    n = config.batch_size

    def step(lr):
        paths = problem.simulate(n, data_rng)
        target = bel_targets(paths, problem.payoff).transpose(1, 0, 2)
        out, cache = net.forward(step_inputs_of(paths, 0, N), train=True)
        err = out - target
        grads, _ = net.backward(cache, 2.0 * err / n)
        _adam_update([net], grads, adam, lr)
        return float(np.sum(err**2) / n)

    _Loop(config, history).run(step, "all")
    cv = ControlVariateModel(problem.grid, StepNetworks(net), d, None, 1.0, problem.extra_names)
    return _finish(cv, problem, config, history, 3), history


# --------------------------------------------------------------------------- #
# Algorithms 4 and 5: martingale representation (BSDE residuals)
# --------------------------------------------------------------------------- #


def train_mrs_iterative(config: TrainConfig, problem: PricingProblem, on_segment=None):
    """Fit the terminal value network, then (eta_m, theta_m) backwards in time.

    ``eta_m`` approximates the value at ``t_m`` (so ``eta_N`` fits ``g``);
    the residual carries the ``D(t_0, t_m)`` factors.
    """
    d, N = problem.d, problem.grid.n_steps
    init_rng = RandomStream(config.seed, INIT_STREAM).generator()
    data_rng = RandomStream(config.seed, DATA_STREAM).generator()
    n_in = d + problem.n_extra
    extra = problem.extra_names
    eta_fresh = _new_net(config.layer_sizes(n_in, 1, d), config.batchnorm, init_rng, 1, extra)
    theta_fresh = _new_net(config.layer_sizes(n_in, d, d), config.batchnorm, init_rng, 1, extra)
    history = LossHistory(config.batch_size)
    loop = _Loop(config, history)
    n = config.batch_size
    etas = [None] * (N + 1)
    thetas = [None] * N

    # terminal condition
    eta_T = eta_fresh.copy()
    adam = AdamState.for_params(eta_T.parameters(), config.schedule)
    sub_T, (pos_T,) = _sub_grid(problem.grid, N)

    def terminal_step(lr):
        paths = problem.simulate(n, data_rng, sub_T)
        target = paths.discounts_to_maturity()[:, pos_T] * problem.payoff(paths.terminal)
        out, cache = eta_T.forward(step_inputs_of(paths, pos_T, pos_T + 1), train=True)
        err = out - target[None, :, None]
        grads, _ = eta_T.backward(cache, 2.0 * err / n)
        _adam_update([eta_T], grads, adam, lr)
        return float(np.sum(err**2) / n)

    loop.run(terminal_step, N)
    etas[N] = eta_T
    if on_segment:
        on_segment(N)

    for m in range(N - 1, -1, -1):
        warm = config.warm_start
        eta = etas[m + 1].copy() if warm else eta_fresh.copy()
        theta = thetas[m + 1].copy() if (warm and m < N - 1) else theta_fresh.copy()
        eta_next = etas[m + 1]
        adam = AdamState.for_params(eta.parameters() + theta.parameters(), config.schedule)
        sub, (p0, p1) = _sub_grid(problem.grid, m, m + 1)

        def step(lr, eta=eta, theta=theta, eta_next=eta_next, adam=adam, sub=sub, p0=p0, p1=p1):
            paths = problem.simulate(n, data_rng, sub)
            disc = np.broadcast_to(paths.discounts(), (n, sub.times.size))
            d0, d1 = disc[:, p0], disc[:, p1]
            x0 = step_inputs_of(paths, p0, p0 + 1)
            x1 = step_inputs_of(paths, p1, p1 + 1)
            v_next = d1 * eta_next(x1)[0, :, 0]
            v_out, v_cache = eta.forward(x0, train=True)
            z_out, z_cache = theta.forward(x0, train=True)
            vol_inc = paths.vol_increments()[:, p0, :]
            resid = bsde_residual(v_next, d0 * v_out[0, :, 0], z_out[0], vol_inc, d0)
            g_v, _ = eta.backward(v_cache, (-2.0 * d0 * resid / n)[None, :, None])
            g_z, _ = theta.backward(z_cache, (-2.0 * (resid * d0)[:, None] * vol_inc / n)[None])
            _adam_update([eta, theta], g_v + g_z, adam, lr)
            return float(np.mean(resid**2))

        loop.run(step, m)
        etas[m], thetas[m] = eta, theta
        if on_segment:
            on_segment(m)

    value = StepNetworks(Network.stack(etas))
    cv = ControlVariateModel(
        problem.grid, StepNetworks(Network.stack(thetas)), d, value, 1.0, extra
    )
    return _finish(cv, problem, config, history, 4), history


def joint_parity_layers(d: int, n_steps: int, config: TrainConfig, n_extra: int = 0) -> int:
    """Hidden-layer count of a width-``d+20`` time-input gradient network whose
    parameter count is closest to the sum over ``n_steps`` per-node gradient
    networks built from ``config``."""
    from .nn import parameter_count

    w = config.width(d)
    n_in = d + n_extra
    target = n_steps * parameter_count(config.layer_sizes(n_in, d, d), config.batchnorm)
    best, best_gap = 1, None
    for layers in range(1, 10 * n_steps + 10):
        count = parameter_count([n_in + 1] + [w] * layers + [d])
        gap = abs(count - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = layers, gap
        if count > target:
            break
    return best


def train_mrs_joint(config: TrainConfig, problem: PricingProblem):
    """Time-input value and gradient networks trained on the summed BSDE loss."""
    d, N = problem.d, problem.grid.n_steps
    init_rng = RandomStream(config.seed, INIT_STREAM).generator()
    data_rng = RandomStream(config.seed, DATA_STREAM).generator()
    layers = config.joint_hidden_layers if config.joint_hidden_layers is not None else N
    width = config.joint_width if config.joint_width is not None else d + 20
    n_in = 1 + d + problem.n_extra
    extra = problem.extra_names
    eta = _new_net([n_in] + [width] * layers + [1], False, init_rng, 1, extra)
    theta = _new_net([n_in] + [width] * layers + [d], False, init_rng, 1, extra)
    adam = AdamState.for_params(eta.parameters() + theta.parameters(), config.schedule)
    history = LossHistory(config.batch_size)
    n = config.batch_size
    times = problem.grid.times
    eta_p, theta_p = TimeNetwork(eta), TimeNetwork(theta)

    def step(lr):
        paths = problem.simulate(n, data_rng)
        disc = np.broadcast_to(paths.discounts(), (n, N + 1))
        x_all = _states(paths, 0, N + 1)
        v_out, v_cache = eta.forward(eta_p.inputs(x_all, times, paths.extra), train=True)
        v = v_out[0, :, 0].reshape(N + 1, n).T  # (n, N+1)
        z_out, z_cache = theta.forward(theta_p.inputs(x_all[:N], times[:N], paths.extra), train=True)
        z = z_out[0].reshape(N, n, d).transpose(1, 0, 2)  # (n, N, d)
        vol_inc = paths.vol_increments()
        dv = disc * v
        resid = bsde_residual(dv[:, 1:], dv[:, :-1], z, vol_inc, disc[:, :-1])
        g_T = paths.discounts_to_maturity()[:, -1] * problem.payoff(paths.terminal)
        term = g_T - v[:, -1]
        loss = np.mean(term**2) + np.mean(np.sum(resid**2, axis=1)) / N
        # d loss / d v
        up_v = np.zeros((n, N + 1))
        up_v[:, -1] = -2.0 * term / n
        c = 2.0 / (N * n)
        up_v[:, 1:] += c * resid * disc[:, 1:]
        up_v[:, :-1] -= c * resid * disc[:, :-1]
        up_z = -c * (resid * disc[:, :-1])[..., None] * vol_inc
        g_v, _ = eta.backward(v_cache, up_v.T.reshape(1, -1, 1))
        g_z, _ = theta.backward(z_cache, up_z.transpose(1, 0, 2).reshape(1, -1, d))
        _adam_update([eta, theta], g_v + g_z, adam, lr)
        return float(loss)

    _Loop(config, history).run(step, "all")
    cv = ControlVariateModel(problem.grid, theta_p, d, eta_p, 1.0, extra)
    cv.metadata["joint_hidden_layers"] = layers
    return _finish(cv, problem, config, history, 5), history


# --------------------------------------------------------------------------- #
# Algorithms 6 and 7: direct control-variate objectives
# --------------------------------------------------------------------------- #


def _martingale_forward(net: Network, paths: PathBatch, N: int):
    out, cache = net.forward(step_inputs_of(paths, 0, N), train=True)
    disc = paths.discounts()[:, :-1]
    vol_inc = paths.vol_increments()
    weighted = (disc[..., None] * vol_inc).transpose(1, 0, 2)  # (N, n, d)
    m = np.sum(out * weighted, axis=(0, 2))
    return m, cache, weighted


def train_var_min(config: TrainConfig, problem: PricingProblem):
    """Minimise the batch variance of ``D(t_0,T) g(X_T) - M`` (lambda = 1)."""
    d, N = problem.d, problem.grid.n_steps
    init_rng = RandomStream(config.seed, INIT_STREAM).generator()
    data_rng = RandomStream(config.seed, DATA_STREAM).generator()
    net = _new_net(
        config.layer_sizes(d + problem.n_extra, d, d), config.batchnorm, init_rng, N,
        problem.extra_names,
    )
    adam = AdamState.for_params(net.parameters(), config.schedule)
    history = LossHistory(config.batch_size)
    n = config.batch_size

    def step(lr):
        paths = problem.simulate(n, data_rng)
        xi = problem.discounted_payoff(paths)
        m, cache, weighted = _martingale_forward(net, paths, N)
        v = xi - m
        centred = v - v.mean()
        loss = np.mean(centred**2)
        dm = -2.0 * centred / n
        grads, _ = net.backward(cache, dm[None, :, None] * weighted)
        _adam_update([net], grads, adam, lr)
        return float(loss)

    _Loop(config, history).run(step, "all")
    cv = ControlVariateModel(problem.grid, StepNetworks(net), d, None, 1.0, problem.extra_names)
    return _finish(cv, problem, config, history, 6, post_lambda=False), history


def correlation_loss(xi: np.ndarray, m: np.ndarray):
    """``1 - rho^2`` and its gradient with respect to ``m``.

    Returns ``(loss, grad, degenerate)``; a batch where either sample is
    constant has loss 1 and zero gradient.
    """
    xc = xi - xi.mean()
    mc = m - m.mean()
    a = float(xc @ xc)
    b = float(mc @ mc)
    if a <= 0.0 or b <= 0.0:
        return 1.0, np.zeros_like(m), True
    c = float(mc @ xc)
    rho2 = c * c / (a * b)
    drho2 = 2.0 * c / (a * b) * xc - 2.0 * c * c / (a * b * b) * mc
    return 1.0 - rho2, -drho2, False


def train_corr_max(config: TrainConfig, problem: PricingProblem):
    """Maximise the squared batch correlation; lambda* is then estimated on a fresh batch."""
    d, N = problem.d, problem.grid.n_steps
    init_rng = RandomStream(config.seed, INIT_STREAM).generator()
    data_rng = RandomStream(config.seed, DATA_STREAM).generator()
    net = _new_net(
        config.layer_sizes(d + problem.n_extra, d, d), config.batchnorm, init_rng, N,
        problem.extra_names,
    )
    adam = AdamState.for_params(net.parameters(), config.schedule)
    history = LossHistory(config.batch_size)
    n = config.batch_size
    skipped = [0]

    def step(lr):
        paths = problem.simulate(n, data_rng)
        xi = problem.discounted_payoff(paths)
        m, cache, weighted = _martingale_forward(net, paths, N)
        loss, dm, degenerate = correlation_loss(xi, m)
        if degenerate:
            if not skipped[0]:
                warnings.warn("degenerate batch: zero sample variance, update skipped")
            skipped[0] += 1
            return loss
        grads, _ = net.backward(cache, dm[None, :, None] * weighted)
        _adam_update([net], grads, adam, lr)
        return loss

    _Loop(config, history).run(step, "all")
    cv = ControlVariateModel(problem.grid, StepNetworks(net), d, None, 1.0, problem.extra_names)
    paths = problem.simulate(n, RandomStream(config.seed, LAMBDA_STREAM))
    lam, degenerate = optimal_lambda(problem.discounted_payoff(paths), cv.martingale_sum(paths))
    cv.lam = 0.0 if degenerate else lam
    cv.metadata["skipped_updates"] = skipped[0]
    return _finish(cv, problem, config, history, 7, post_lambda=False), history


ALGORITHMS = {
    1: train_projection,
    2: train_projection_iterative,
    3: train_bel,
    4: train_mrs_iterative,
    5: train_mrs_joint,
    6: train_var_min,
    7: train_corr_max,
}


def train(algorithm: int, config: TrainConfig, problem: PricingProblem):
    if algorithm not in ALGORITHMS:
        raise ConfigurationError(
            f"unknown algorithm {algorithm}; choose one of {sorted(ALGORITHMS)}"
        )
    return ALGORITHMS[algorithm](config, problem)


# --------------------------------------------------------------------------- #
# Estimator interface
# --------------------------------------------------------------------------- #


class _SolverBase(BaseEstimator):
    """Shared estimator plumbing: ``fit(problem)``, ``transform(paths)`` gives the
    martingale sum and ``predict(paths)`` the controlled per-path samples."""

    _algorithm = 0

    def __init__(
        self,
        batch_size=5000,
        epsilon=5e-6,
        window=100,
        max_iterations=100_000,
        seed=0,
        hidden_layers=2,
        hidden_width=None,
        batchnorm=True,
        warm_start=True,
        post_lambda=False,
        learning_rate=1e-3,
        decayed_learning_rate=1e-4,
        decay_step=10_000,
    ):
        self.batch_size = batch_size
        self.epsilon = epsilon
        self.window = window
        self.max_iterations = max_iterations
        self.seed = seed
        self.hidden_layers = hidden_layers
        self.hidden_width = hidden_width
        self.batchnorm = batchnorm
        self.warm_start = warm_start
        self.post_lambda = post_lambda
        self.learning_rate = learning_rate
        self.decayed_learning_rate = decayed_learning_rate
        self.decay_step = decay_step

    def _config(self, **extra) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epsilon=self.epsilon,
            window=self.window,
            max_iterations=self.max_iterations,
            seed=self.seed,
            schedule=LearningRateSchedule(
                self.learning_rate, self.decayed_learning_rate, self.decay_step
            ),
            hidden_layers=self.hidden_layers,
            hidden_width=self.hidden_width,
            batchnorm=self.batchnorm,
            warm_start=self.warm_start,
            post_lambda=self.post_lambda,
            **extra,
        )

    def fit(self, problem: PricingProblem, y=None):
        if not isinstance(problem, PricingProblem):
            raise TypeError("fit expects a PricingProblem")
        self.model_, self.history_ = ALGORITHMS[self._algorithm](self._config(), problem)
        self.problem_ = problem
        self.n_iter_ = self.history_.steps
        self.converged_ = self.history_.converged
        return self

    def transform(self, paths: PathBatch) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.martingale_sum(paths)

    def predict(self, paths: PathBatch) -> np.ndarray:
        check_is_fitted(self, "model_")
        xi = self.problem_.discounted_payoff(paths)
        return xi - self.model_.lam * self.model_.martingale_sum(paths)


class ProjectionSolver(_SolverBase):
    _algorithm = 1


class IterativeProjectionSolver(_SolverBase):
    _algorithm = 2


class BELSolver(_SolverBase):
    _algorithm = 3


class IterativeMRSSolver(_SolverBase):
    _algorithm = 4


class MRSSolver(_SolverBase):
    _algorithm = 5

    def __init__(self, batch_size=5000, epsilon=5e-6, window=100, max_iterations=100_000,
                 seed=0, joint_hidden_layers=None, joint_width=None, post_lambda=False,
                 learning_rate=1e-3, decayed_learning_rate=1e-4, decay_step=10_000):
        super().__init__(batch_size, epsilon, window, max_iterations, seed,
                         post_lambda=post_lambda, learning_rate=learning_rate,
                         decayed_learning_rate=decayed_learning_rate, decay_step=decay_step)
        self.joint_hidden_layers = joint_hidden_layers
        self.joint_width = joint_width

    def _config(self, **extra):
        return super()._config(
            joint_hidden_layers=self.joint_hidden_layers, joint_width=self.joint_width
        )


class VarianceMinSolver(_SolverBase):
    _algorithm = 6


class CorrelationMaxSolver(_SolverBase):
    _algorithm = 7
