"""Multi-asset Black-Scholes dynamics, payoffs and the Margrabe benchmark.

Asset dynamics under the risk-neutral measure::

    dS^i = r S^i dt + sigma^i S^i sum_j C^{ij} dW^j

with ``C`` the lower Cholesky factor of the correlation matrix. Paths are
simulated with the exact log-normal step, and the Wiener increments that
produced them are kept so that stochastic integrals along the same paths can
be formed afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .mathcore import LowerTriangularFactor, as_generator, cholesky, normal_cdf

__all__ = [
    "DomainError",
    "ConfigurationError",
    "TimeGrid",
    "MarketModel",
    "PathBatch",
    "InitialSampler",
    "ParametricSampler",
    "Payoff",
    "Exchange",
    "Basket",
    "ExchangeVsAverage",
    "Constant",
    "AssetPrice",
    "make_payoff",
    "payoff_eval",
    "simulate_paths",
    "discount_factor",
    "diffusion",
    "diffusion_inverse",
    "simulate_variational",
    "variational_from_paths",
    "margrabe_price",
    "margrabe_delta",
    "exchange_sigma_bar",
]


class DomainError(ValueError):
    """Raised when a state lies outside the positive orthant."""


class ConfigurationError(ValueError):
    """Raised for inconsistent model / payoff / grid combinations."""


# --------------------------------------------------------------------------- #
# Time grid
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a time grid needs at least two points")
        if np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, maturity: float, n_steps: int, start: float = 0.0) -> "TimeGrid":
        if n_steps < 1:
            raise ValueError("n_steps must be positive")
        if maturity <= start:
            raise ValueError("maturity must exceed the start time")
        return cls(np.linspace(start, maturity, n_steps + 1))

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def maturity(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def matches(self, other: "TimeGrid") -> bool:
        return self.times.shape == other.times.shape and np.array_equal(
            self.times, other.times
        )

    def sub_grid(self, indices: Sequence[int]) -> "TimeGrid":
        """Coarser grid through the given node indices (duplicates dropped)."""
        idx = sorted(set(int(i) for i in indices))
        return TimeGrid(self.times[idx])

    def __repr__(self):
        return f"TimeGrid(n_steps={self.n_steps}, start={self.start}, maturity={self.maturity})"


# --------------------------------------------------------------------------- #
# Market model
# --------------------------------------------------------------------------- #


class MarketModel:
    """Black-Scholes market on ``d`` assets with a constant short rate.

    Parameters
    ----------
    sigma : float or array of shape (d,)
        Per-asset volatilities.
    rate : float
        Risk-free rate.
    correlation : array (d, d), optional
        Correlation matrix; identity when omitted.
    d : int, optional
        Asset count, only needed when ``sigma`` is a scalar.
    """

    def __init__(self, sigma, rate: float, correlation=None, d: Optional[int] = None):
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.ndim == 0:
            if d is None:
                d = 1 if correlation is None else np.asarray(correlation).shape[0]
            sigma = np.full(d, float(sigma))
        if sigma.ndim != 1 or sigma.size < 1:
            raise ConfigurationError("sigma must be a scalar or a vector")
        if np.any(sigma < 0):
            raise ConfigurationError("volatilities must be non-negative")
        d = sigma.size
        if correlation is None:
            correlation = np.eye(d)
        correlation = np.asarray(correlation, dtype=np.float64)
        if correlation.shape != (d, d):
            raise ConfigurationError(
                f"correlation must be {d}x{d}, got {correlation.shape}"
            )
        self.sigma = sigma
        self.rate = float(rate)
        self.correlation = correlation
        self.chol: LowerTriangularFactor = cholesky(correlation)

    @property
    def d(self) -> int:
        return self.sigma.size

    @property
    def vol_matrix(self) -> np.ndarray:
        """Effective volatility matrix ``sigma^{ij} = sigma^i C^{ij}``."""
        return self.sigma[:, None] * self.chol.entries

    def with_sigma(self, sigma) -> "MarketModel":
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.ndim == 0:
            sigma = np.full(self.d, float(sigma))
        return MarketModel(sigma, self.rate, self.correlation)

    def __repr__(self):
        return f"MarketModel(d={self.d}, rate={self.rate}, sigma={self.sigma.tolist()})"


def discount_factor(model: MarketModel, t_from: float, t_to: float) -> float:
    if t_from > t_to:
        raise ValueError("t_from must not exceed t_to")
    return float(np.exp(-model.rate * (t_to - t_from)))


# --------------------------------------------------------------------------- #
# Paths
# --------------------------------------------------------------------------- #


@dataclass(eq=False)
class PathBatch:
    """Simulated asset paths together with the increments that drove them.

    ``sigma`` and ``rate`` are either shared (shape ``(d,)`` / scalar) or per
    path (``(n, d)`` / ``(n,)``) when the model parameters were randomised.
    ``extra`` holds the per-path features appended to network inputs.
    """

    grid: TimeGrid
    assets: np.ndarray
    wiener_increments: np.ndarray
    sigma: np.ndarray
    rate: np.ndarray
    chol: np.ndarray
    extra: Optional[np.ndarray] = None
    extra_names: tuple = field(default_factory=tuple)

    @property
    def n_paths(self) -> int:
        return self.assets.shape[0]

    @property
    def d(self) -> int:
        return self.assets.shape[2]

    @property
    def terminal(self) -> np.ndarray:
        return self.assets[:, -1, :]

    def _sigma_b(self) -> np.ndarray:
        # broadcastable against (n, N, d)
        s = np.asarray(self.sigma)
        return s[:, None, :] if s.ndim == 2 else s

    def _rate_col(self) -> np.ndarray:
        r = np.asarray(self.rate, dtype=np.float64)
        return r[:, None] if r.ndim == 1 else r

    def vol_increments(self) -> np.ndarray:
        """``sigma(t_k, x_k) dW_{k+1}`` for every path and step, shape (n, N, d)."""
        corr_dw = self.wiener_increments @ self.chol.T
        return self.assets[:, :-1, :] * self._sigma_b() * corr_dw

    def discounts(self) -> np.ndarray:
        """``D(t_0, t_k)`` for k = 0..N; shape (1, N+1) or (n, N+1)."""
        elapsed = (self.grid.times - self.grid.start)[None, :]
        return np.exp(-self._rate_col() * elapsed)

    def discounts_to_maturity(self) -> np.ndarray:
        """``D(t_k, T)`` for k = 0..N."""
        remaining = (self.grid.maturity - self.grid.times)[None, :]
        return np.exp(-self._rate_col() * remaining)

    def features(self, x: np.ndarray) -> np.ndarray:
        """Append the per-path extra inputs to states of shape (..., n, d)."""
        if self.extra is None:
            return x
        extra = np.broadcast_to(self.extra, x.shape[:-1] + (self.extra.shape[-1],))
        return np.concatenate([x, extra], axis=-1)

    def select(self, rows) -> "PathBatch":
        sigma = self.sigma[rows] if np.ndim(self.sigma) == 2 else self.sigma
        rate = self.rate[rows] if np.ndim(self.rate) == 1 else self.rate
        return PathBatch(
            self.grid,
            self.assets[rows],
            self.wiener_increments[rows],
            sigma,
            rate,
            self.chol,
            None if self.extra is None else self.extra[rows],
            self.extra_names,
        )


@dataclass(frozen=True)
class InitialSampler:
    """Initial asset values: fixed, or log-normally scattered around ``s0``.

    In log-normal mode each component is
    ``s0^i * exp((mu - vol^2/2) tau + vol sqrt(tau) xi)`` with ``xi ~ N(0,1)``;
    ``vol`` defaults to the asset volatility of the model being simulated.
    """

    mode: str = "fixed"
    s0: object = 1.0
    mu: float = 0.08
    tau: float = 0.1
    vol: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("fixed", "lognormal"):
            raise ConfigurationError(f"unknown initial sampler mode {self.mode!r}")
        if np.any(np.asarray(self.s0) <= 0):
            raise ConfigurationError("initial values must be positive")
        if self.tau < 0:
            raise ConfigurationError("tau must be non-negative")

    @classmethod
    def fixed(cls, s0) -> "InitialSampler":
        return cls("fixed", s0)

    @classmethod
    def lognormal(cls, s0=1.0, mu=0.08, tau=0.1, vol=None) -> "InitialSampler":
        return cls("lognormal", s0, mu, tau, vol)

    def sample(self, n: int, d: int, rng: np.random.Generator, sigma) -> np.ndarray:
        base = np.broadcast_to(np.asarray(self.s0, dtype=np.float64), (d,))
        if self.mode == "fixed":
            return np.tile(base, (n, 1))
        vol = np.asarray(sigma if self.vol is None else self.vol, dtype=np.float64)
        xi = rng.standard_normal((n, d))
        return base * np.exp((self.mu - 0.5 * vol**2) * self.tau + vol * np.sqrt(self.tau) * xi)


@dataclass(frozen=True)
class ParametricSampler:
    """Uniform laws for randomised model parameters fed to the networks.

    ``sigma_range`` draws every asset volatility independently per path;
    ``rate_range`` draws one short rate per path. A ``None`` range keeps the
    model's value and contributes no network input.
    """

    sigma_range: Optional[tuple] = None
    rate_range: Optional[tuple] = None

    @property
    def names(self) -> tuple:
        out = []
        if self.sigma_range is not None:
            out.append("sigma")
        if self.rate_range is not None:
            out.append("rate")
        return tuple(out)

    def n_features(self, d: int) -> int:
        return (d if self.sigma_range is not None else 0) + (
            1 if self.rate_range is not None else 0
        )

    def sample(self, n: int, model: MarketModel, rng: np.random.Generator):
        sigma = model.sigma
        rate = np.asarray(model.rate)
        feats = []
        if self.sigma_range is not None:
            lo, hi = self.sigma_range
            sigma = rng.uniform(lo, hi, size=(n, model.d))
            feats.append(sigma)
        if self.rate_range is not None:
            lo, hi = self.rate_range
            rate = rng.uniform(lo, hi, size=n)
            feats.append(rate[:, None])
        extra = np.concatenate(feats, axis=1) if feats else None
        return sigma, rate, extra


def simulate_paths(
    model: MarketModel,
    grid: TimeGrid,
    n_paths: int,
    init: Optional[InitialSampler] = None,
    stream=0,
    parametric: Optional[ParametricSampler] = None,
) -> PathBatch:
    """Exact log-normal simulation on ``grid``.

    Draw order from the stream: initial values (log-normal mode only),
    parametric draws, then the Wiener increments.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    rng = as_generator(stream)
    init = init or InitialSampler.fixed(1.0)
    d, N = model.d, grid.n_steps
    x0 = init.sample(n_paths, d, rng, model.sigma)
    if parametric is not None:
        sigma, rate, extra = parametric.sample(n_paths, model, rng)
        names = parametric.names
    else:
        sigma, rate, extra, names = model.sigma, np.asarray(model.rate), None, ()
    dt = grid.dt
    dw = rng.standard_normal((n_paths, N, d)) * np.sqrt(dt)[None, :, None]

    chol = model.chol.entries
    row_sq = np.sum(chol**2, axis=1)  # sum_j C_ij^2
    sig = np.asarray(sigma)
    sig_b = sig[:, None, :] if sig.ndim == 2 else sig
    r = np.asarray(rate, dtype=np.float64)
    r_b = r[:, None, None] if r.ndim == 1 else r
    drift = (r_b - 0.5 * sig_b**2 * row_sq) * dt[None, :, None]
    log_inc = drift + sig_b * (dw @ chol.T)
    log_paths = np.concatenate(
        [np.zeros((n_paths, 1, d)), np.cumsum(log_inc, axis=1)], axis=1
    )
    assets = x0[:, None, :] * np.exp(log_paths)
    return PathBatch(grid, assets, dw, sigma, rate, chol, extra, names)


# --------------------------------------------------------------------------- #
# Payoffs
# --------------------------------------------------------------------------- #


class Payoff:
    kind = "payoff"

    def check_dimension(self, d: int) -> None:
        pass

    def __call__(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind}


class Exchange(Payoff):
    """``max(0, S^1 - S^2)`` on exactly two assets."""

    kind = "exchange"

    def check_dimension(self, d):
        if d != 2:
            raise ConfigurationError(f"exchange payoff needs d=2 assets, got d={d}")

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.maximum(s[..., 0] - s[..., 1], 0.0)


@dataclass
class Basket(Payoff):
    strike: float
    kind = "basket"

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.maximum(s.sum(axis=-1) - self.strike, 0.0)

    def to_dict(self):
        return {"kind": self.kind, "strike": self.strike}


class ExchangeVsAverage(Payoff):
    """``max(0, S^1 - mean(S^2..S^d))``."""

    kind = "exchange_vs_average"

    def check_dimension(self, d):
        if d < 2:
            raise ConfigurationError("exchange-vs-average payoff needs d >= 2")

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.maximum(s[..., 0] - s[..., 1:].mean(axis=-1), 0.0)


@dataclass
class Constant(Payoff):
    value: float = 1.0
    kind = "constant"

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.full(s.shape[:-1], float(self.value))

    def to_dict(self):
        return {"kind": self.kind, "value": self.value}


class AssetPrice(Payoff):
    """The first asset itself, ``g(S) = S^1``."""

    kind = "asset"

    def __call__(self, s):
        return np.asarray(s, dtype=np.float64)[..., 0].copy()


def make_payoff(spec: dict) -> Payoff:
    kind = spec.get("kind")
    if kind == "exchange":
        return Exchange()
    if kind == "basket":
        if "strike" not in spec:
            raise ConfigurationError("basket payoff needs a strike")
        return Basket(float(spec["strike"]))
    if kind == "exchange_vs_average":
        return ExchangeVsAverage()
    if kind == "constant":
        return Constant(float(spec.get("value", 1.0)))
    if kind == "asset":
        return AssetPrice()
    raise ConfigurationError(f"unknown payoff kind {kind!r}")


def payoff_eval(payoff: Payoff, terminal_assets) -> np.ndarray:
    s = np.asarray(terminal_assets, dtype=np.float64)
    payoff.check_dimension(s.shape[-1])
    out = payoff(s)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------- #
# Diffusion coefficient and first variation
# --------------------------------------------------------------------------- #


def _check_state(state):
    x = np.asarray(state, dtype=np.float64)
    if np.any(~(x > 0)):
        raise DomainError("state components must be strictly positive")
    return x


def diffusion(model: MarketModel, state) -> np.ndarray:
    """``sigma(x)^{ij} = x^i sigma^{ij}``; ``state`` may carry leading batch axes."""
    x = _check_state(state)
    return x[..., :, None] * model.vol_matrix


def diffusion_inverse(model: MarketModel, state) -> np.ndarray:
    """``C^{-1} diag(1 / (x^i sigma^i))``."""
    x = _check_state(state)
    if np.any(model.sigma <= 0):
        raise DomainError("diffusion is singular: a volatility is zero")
    c_inv = model.chol.inverse()
    return c_inv * (1.0 / (x * model.sigma))[..., None, :]


def simulate_variational(model: MarketModel, paths: PathBatch) -> np.ndarray:
    """Euler scheme for the first-variation process ``Y = dX/dx``.

    For Black-Scholes the drift Jacobian is ``r I`` and the Jacobian of the
    j-th diffusion column is ``diag(sigma^{.j})``, so one step reads::

        Y_{n+1} = Y_n + r dt Y_n + diag(sigma dW_{n+1}) Y_n

    The increments are those stored in ``paths``. Returns shape
    ``(n, N+1, d, d)`` with ``Y_{t_0} = I``.
    """
    if paths.d != model.d:
        raise ConfigurationError(f"paths have d={paths.d}, model has d={model.d}")
    return variational_from_paths(paths)


def variational_from_paths(paths: PathBatch) -> np.ndarray:
    """First variation driven by the volatilities and rates stored on ``paths``."""
    n, N, d = paths.wiener_increments.shape
    if N != paths.grid.n_steps or paths.assets.shape[1] != N + 1:
        raise ConfigurationError("path arrays do not match their time grid")
    sig = np.asarray(paths.sigma)
    sig_b = sig[:, None, :] if sig.ndim == 2 else sig
    r = np.asarray(paths.rate, dtype=np.float64)
    r_b = r[:, None] if r.ndim == 1 else r
    # diagonal multiplier of each Euler step, shape (n, N, d)
    mult = 1.0 + r_b[..., None] * paths.grid.dt[None, :, None] + sig_b * (
        paths.wiener_increments @ paths.chol.T
    )
    y = np.empty((n, N + 1, d, d))
    y[:, 0] = np.eye(d)
    for k in range(N):
        y[:, k + 1] = mult[:, k, :, None] * y[:, k]
    return y


# --------------------------------------------------------------------------- #
# Margrabe benchmark
# --------------------------------------------------------------------------- #


def exchange_sigma_bar(model: MarketModel) -> float:
    """Volatility of the ratio ``S^1/S^2``: ``sqrt((s11-s21)^2 + (s22-s12)^2)``."""
    if model.d != 2:
        raise ConfigurationError("the Margrabe benchmark needs d=2")
    v = model.vol_matrix
    return float(np.sqrt((v[0, 0] - v[1, 0]) ** 2 + (v[1, 1] - v[0, 1]) ** 2))


def _margrabe_d(s1, s2, maturity, sigma_bar):
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    vol = np.asarray(sigma_bar, dtype=np.float64) * np.sqrt(maturity)
    d1 = (np.log(s1 / s2) + 0.5 * vol**2) / vol
    return d1, d1 - vol


def margrabe_price(s1, s2, maturity, sigma_bar):
    """Value of the option to exchange asset 2 for asset 1 (rate-free form)."""
    d1, d2 = _margrabe_d(s1, s2, maturity, sigma_bar)
    out = np.asarray(s1) * normal_cdf(d1) - np.asarray(s2) * normal_cdf(d2)
    return float(out) if np.ndim(out) == 0 else out


def margrabe_delta(s1, s2, maturity, sigma_bar) -> np.ndarray:
    """Spatial gradient ``(Phi(d1), -Phi(d2))``; trailing axis of length 2."""
    d1, d2 = _margrabe_d(s1, s2, maturity, sigma_bar)
    return np.stack([np.asarray(normal_cdf(d1)), -np.asarray(normal_cdf(d2))], axis=-1)
