"""Experiment configuration: a strict JSON schema and the named presets."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .market import (
    ConfigurationError,
    InitialSampler,
    MarketModel,
    ParametricSampler,
    TimeGrid,
    make_payoff,
)
from .mathcore import CholeskyError
from .nn import LearningRateSchedule
from .solvers import PricingProblem, TrainConfig

__all__ = [
    "ExperimentConfig",
    "DiagnosticsGridSpec",
    "PRESETS",
    "preset",
    "load_config",
    "ValidationError",
]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSpec(_Strict):
    d: int = Field(ge=1)
    rate: float
    sigma: Union[float, List[float]]
    correlation: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _shapes(self):
        if isinstance(self.sigma, list) and len(self.sigma) != self.d:
            raise ValueError(f"sigma has {len(self.sigma)} entries, expected d={self.d}")
        if np.any(np.asarray(self.sigma) <= 0):
            raise ValueError("volatilities must be positive")
        if self.correlation is not None:
            c = np.asarray(self.correlation)
            if c.shape != (self.d, self.d):
                raise ValueError(f"correlation must be {self.d}x{self.d}")
        return self


class PayoffSpec(_Strict):
    kind: Literal["exchange", "basket", "exchange_vs_average", "constant", "asset"]
    strike: Optional[float] = None
    value: Optional[float] = None

    @model_validator(mode="after")
    def _strike(self):
        if self.kind == "basket" and self.strike is None:
            raise ValueError("basket payoff needs a strike")
        return self


class GridSpec(_Strict):
    maturity: float = Field(gt=0)
    n_steps: int = Field(ge=1)


class InitSpec(_Strict):
    mode: Literal["fixed", "lognormal"] = "fixed"
    s0: Union[float, List[float]] = 1.0
    mu: float = 0.08
    tau: float = Field(0.1, ge=0)
    vol: Optional[float] = None

    def sampler(self) -> InitialSampler:
        return InitialSampler(self.mode, np.asarray(self.s0, dtype=float), self.mu, self.tau, self.vol)


class ParametricSpec(_Strict):
    sigma_range: Optional[Tuple[float, float]] = None
    rate_range: Optional[Tuple[float, float]] = None


class TrainSpec(_Strict):
    batch_size: int = Field(5000, ge=2)
    epsilon: float = Field(5e-6, gt=0)
    window: int = Field(100, ge=1)
    max_iterations: int = Field(100_000, ge=1)
    hidden_layers: int = Field(2, ge=0)
    hidden_width: Optional[int] = Field(None, ge=1)
    batchnorm: bool = True
    joint_hidden_layers: Optional[int] = Field(None, ge=1)
    joint_width: Optional[int] = Field(None, ge=1)
    warm_start: bool = True
    post_lambda: bool = False
    learning_rate: float = Field(1e-3, gt=0)
    decayed_learning_rate: float = Field(1e-4, gt=0)
    decay_step: int = Field(10_000, ge=0)


class EvaluationSpec(_Strict):
    n_mc: int = Field(10, ge=2)
    n_in: int = Field(100_000, ge=2)
    init: Optional[InitSpec] = None
    sigma_sweep: List[float] = Field(default_factory=list)
    price_sample_sizes: List[int] = Field(default_factory=lambda: [10, 20, 50, 100, 200])
    price_repetitions: int = Field(50, ge=1)


class DiagnosticsGridSpec(_Strict):
    hidden_layers: List[int] = Field(default_factory=lambda: [1, 2, 3])
    widths: List[int] = Field(default_factory=lambda: list(range(2, 21, 2)))
    repetitions: int = Field(4, ge=1)
    epsilon: float = Field(5e-6, gt=0)
    maturity: float = Field(1.0 / 365.0, gt=0)
    n_test: int = Field(10_000, ge=2)

    @model_validator(mode="after")
    def _nonempty(self):
        if not self.hidden_layers or not self.widths:
            raise ValueError("diagnostics grid must be nonempty")
        if min(self.hidden_layers) < 1 or min(self.widths) < 1:
            raise ValueError("layer counts and widths must be positive")
        return self


class ExperimentConfig(_Strict):
    name: str
    model: ModelSpec
    payoff: PayoffSpec
    grid: GridSpec
    algorithm: int = Field(4, ge=1, le=7)
    train: TrainSpec = Field(default_factory=TrainSpec)
    init: InitSpec = Field(default_factory=InitSpec)
    parametric: Optional[ParametricSpec] = None
    evaluation: EvaluationSpec = Field(default_factory=EvaluationSpec)
    diagnostics: Optional[DiagnosticsGridSpec] = None
    output_dir: Optional[str] = None
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _consistent(self):
        try:
            self.market_model()
            make_payoff(self.payoff.model_dump()).check_dimension(self.model.d)
        except CholeskyError as exc:
            raise ValueError(f"correlation is not positive definite (pivot {exc.pivot})")
        except ConfigurationError as exc:
            raise ValueError(str(exc))
        for spec in (self.init, self.evaluation.init):
            if spec is not None and isinstance(spec.s0, list) and len(spec.s0) != self.model.d:
                raise ValueError(f"s0 has {len(spec.s0)} entries, expected d={self.model.d}")
        return self

    # ------------------------------------------------------------------ #
    def market_model(self) -> MarketModel:
        m = self.model
        return MarketModel(m.sigma, m.rate, m.correlation, d=m.d)

    def time_grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.grid.maturity, self.grid.n_steps)

    def payoff_fn(self):
        return make_payoff(self.payoff.model_dump(exclude_none=True))

    def parametric_sampler(self) -> Optional[ParametricSampler]:
        if self.parametric is None:
            return None
        return ParametricSampler(self.parametric.sigma_range, self.parametric.rate_range)

    def problem(self) -> PricingProblem:
        return PricingProblem(
            self.market_model(),
            self.time_grid(),
            self.payoff_fn(),
            self.init.sampler(),
            self.parametric_sampler(),
        )

    def eval_init(self) -> InitialSampler:
        if self.evaluation.init is not None:
            return self.evaluation.init.sampler()
        return InitialSampler.fixed(np.asarray(self.init.s0, dtype=float))

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            batch_size=t.batch_size,
            epsilon=t.epsilon,
            window=t.window,
            max_iterations=t.max_iterations,
            seed=self.seed,
            schedule=LearningRateSchedule(t.learning_rate, t.decayed_learning_rate, t.decay_step),
            hidden_layers=t.hidden_layers,
            hidden_width=t.hidden_width,
            batchnorm=t.batchnorm,
            joint_hidden_layers=t.joint_hidden_layers,
            joint_width=t.joint_width,
            warm_start=t.warm_start,
            post_lambda=t.post_lambda,
        )

    def config_hash(self) -> str:
        text = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    return ExperimentConfig.model_validate_json(text)


# --------------------------------------------------------------------------- #
# Presets
# --------------------------------------------------------------------------- #

_LOGNORMAL = {"mode": "lognormal", "s0": 1.0, "mu": 0.08, "tau": 0.1}

PRESETS = {
    "exchange2d": {
        "name": "exchange2d",
        "model": {"d": 2, "rate": 0.05, "sigma": 0.3},
        "payoff": {"kind": "exchange"},
        "grid": {"maturity": 0.5, "n_steps": 50},
        "algorithm": 4,
        "init": _LOGNORMAL,
        "evaluation": {
            "n_mc": 10,
            "n_in": 1_000_000,
            "init": {"mode": "fixed", "s0": 1.0},
            "sigma_sweep": [0.2, 0.25, 0.3, 0.35, 0.4],
        },
    },
    "exchange100d": {
        "name": "exchange100d",
        "model": {"d": 100, "rate": 0.05, "sigma": 0.3},
        "payoff": {"kind": "exchange_vs_average"},
        "grid": {"maturity": 0.5, "n_steps": 50},
        "algorithm": 4,
        "init": _LOGNORMAL,
        "evaluation": {"n_mc": 10, "n_in": 1_000_000, "init": {"mode": "fixed", "s0": 1.0}},
    },
    "basket2d": {
        "name": "basket2d",
        "model": {"d": 2, "rate": 0.5, "sigma": 1.0},
        "payoff": {"kind": "basket", "strike": 1.4},
        "grid": {"maturity": 1.0, "n_steps": 50},
        "algorithm": 6,
        "init": {"mode": "fixed", "s0": 0.7},
        "evaluation": {"n_mc": 10, "n_in": 1_000_000},
    },
    "basket100d": {
        "name": "basket100d",
        "model": {"d": 100, "rate": 0.5, "sigma": 1.0},
        "payoff": {"kind": "basket", "strike": 70.0},
        "grid": {"maturity": 1.0, "n_steps": 50},
        "algorithm": 6,
        "init": {"mode": "fixed", "s0": 0.7},
        "evaluation": {"n_mc": 10, "n_in": 1_000_000},
    },
    "diagnostics": {
        "name": "diagnostics",
        "model": {"d": 2, "rate": 0.05, "sigma": 0.3},
        "payoff": {"kind": "exchange"},
        "grid": {"maturity": 1.0 / 365.0, "n_steps": 10},
        "algorithm": 5,
        "init": _LOGNORMAL,
        "diagnostics": {},
    },
}


def _desk(name: str) -> dict:
    cfg = copy.deepcopy(PRESETS[name])
    cfg["name"] = f"{name}-desk"
    cfg["train"] = {**cfg.get("train", {}), "batch_size": 500, "epsilon": 1e-4}
    ev = cfg.setdefault("evaluation", {})
    ev["n_in"] = ev.get("n_in", 100_000) // 10
    return cfg


for _name in ("exchange2d", "exchange100d", "basket2d", "basket100d"):
    PRESETS[f"{_name}-desk"] = _desk(_name)
PRESETS["diagnostics-desk"] = copy.deepcopy(PRESETS["diagnostics"])
PRESETS["diagnostics-desk"].update(
    name="diagnostics-desk",
    train={"batch_size": 500, "epsilon": 1e-4},
    diagnostics={"hidden_layers": [1, 2], "widths": [4, 8, 16], "repetitions": 2,
                 "epsilon": 1e-4, "n_test": 10_000},
)


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return ExperimentConfig.model_validate(copy.deepcopy(PRESETS[name]))
