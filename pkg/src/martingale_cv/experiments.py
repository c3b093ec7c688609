"""Experiment runners behind the command line: train, evaluate, price, diagnose.

Each runner takes a validated :class:`ExperimentConfig`, writes its products
into an output directory and returns the in-memory results. Every JSON
product carries a reproducibility block (seed, config hash, package version).
"""

from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import t as student_t

from . import __version__
from .config import DiagnosticsGridSpec, ExperimentConfig
from .cvmodel import ControlVariateModel, MargrabeGradient, load_model, save_model
from .evaluation import evaluate, price_comparison, robustness_sweep, write_sweep_csv
from .market import (
    ConfigurationError,
    Exchange,
    exchange_sigma_bar,
    margrabe_delta,
    margrabe_price,
)
from .mathcore import RandomStream
from .solvers import PricingProblem, train

__all__ = [
    "reproducibility",
    "run_train",
    "run_evaluate",
    "run_price",
    "run_diagnostics",
    "exact_margrabe_model",
]

EVAL_STREAM = 7


def reproducibility(config: ExperimentConfig, seed: Optional[int] = None) -> dict:
    return {
        "seed": config.seed if seed is None else seed,
        "config_hash": config.config_hash(),
        "version": __version__,
    }


def _out_dir(config: ExperimentConfig, out) -> Path:
    path = Path(out or config.output_dir or f"runs/{config.name}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")


def run_train(config: ExperimentConfig, out=None):
    """Train the configured algorithm; write checkpoints, ``model.json``, ``loss.csv``."""
    out = _out_dir(config, out)
    cv, history = train(config.algorithm, config.train_config(), config.problem())
    save_model(cv, out, {"reproducibility": reproducibility(config), "config": config.model_dump(mode="json")})
    history.to_csv(out / "loss.csv")
    summary = {
        "algorithm": config.algorithm,
        "training_steps": history.steps,
        "training_paths": history.paths,
        "converged": history.converged,
        "final_loss": history.losses[-1] if history.losses else None,
        "lambda": cv.lam,
        "reproducibility": reproducibility(config),
    }
    _write_json(out / "training.json", summary)
    return cv, history


def exact_margrabe_model(config: ExperimentConfig) -> ControlVariateModel:
    """Control variate built from the closed-form exchange-option delta."""
    if not isinstance(config.payoff_fn(), Exchange):
        raise ConfigurationError("the exact Margrabe control variate needs the exchange payoff")
    model = config.market_model()
    grid = config.time_grid()
    return ControlVariateModel(
        grid, MargrabeGradient(exchange_sigma_bar(model), grid.maturity), model.d
    )


def _load_checked(config: ExperimentConfig, model_path) -> ControlVariateModel:
    cv = load_model(model_path)
    if cv.d != config.model.d:
        raise ConfigurationError(f"model has d={cv.d} but the config expects d={config.model.d}")
    return cv


def run_evaluate(config: ExperimentConfig, model_path=None, out=None, exact_margrabe=False,
                 lambda_override=None, threads=1):
    if exact_margrabe:
        cv = exact_margrabe_model(config)
    elif model_path is None:
        raise ConfigurationError("evaluate needs --model or --exact-margrabe")
    else:
        cv = _load_checked(config, model_path)
    out = _out_dir(config, out)
    ev = config.evaluation
    stream = RandomStream(config.seed, EVAL_STREAM)
    report = evaluate(
        cv, config.market_model(), config.payoff_fn(), config.eval_init(), ev.n_mc, ev.n_in,
        stream, lambda_override, config.parametric_sampler(), threads,
    )
    repro = reproducibility(config)
    report.to_json(out / "report.json", reproducibility=repro)
    report.to_csv(out / "report.csv")
    sweep = None
    if ev.sigma_sweep:
        if config.parametric is not None:
            raise ConfigurationError("volatility sweeps apply to fixed-parameter models only")
        sweep = robustness_sweep(
            cv, config.market_model(), config.payoff_fn(), ev.sigma_sweep, config.eval_init(),
            ev.n_mc, ev.n_in, stream, threads,
        )
        write_sweep_csv(sweep, out / "sweep.csv")
    return report, sweep


def run_price(config: ExperimentConfig, model_path=None, out=None, exact_margrabe=False):
    """Plain MC versus CV versus direct value readout against the analytic price."""
    payoff = config.payoff_fn()
    if not isinstance(payoff, Exchange):
        raise ConfigurationError("price comparison needs the exchange payoff (analytic benchmark)")
    if not exact_margrabe and model_path is None:
        raise ConfigurationError("price needs --model or --exact-margrabe")
    cv = exact_margrabe_model(config) if exact_margrabe else _load_checked(config, model_path)
    out = _out_dir(config, out)
    model = config.market_model()
    init = config.eval_init()
    s0 = np.broadcast_to(np.asarray(init.s0, dtype=float), (model.d,))
    analytic = margrabe_price(s0[0], s0[1], config.grid.maturity, exchange_sigma_bar(model))
    ev = config.evaluation
    rows = price_comparison(
        cv, model, payoff, init, ev.price_sample_sizes, analytic, ev.price_repetitions,
        RandomStream(config.seed, EVAL_STREAM + 1),
    )
    with open(out / "price.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    result = {
        "analytic_price": analytic,
        "rows": rows,
        "reproducibility": reproducibility(config),
    }
    _write_json(out / "price.json", result)
    return result


def _mean_ci(values, confidence=0.95):
    v = np.asarray(values, dtype=float)
    mean = float(v.mean())
    if v.size < 2:
        return mean, mean, mean
    half = float(student_t.ppf(0.5 + confidence / 2, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size))
    return mean, mean - half, mean + half


def run_diagnostics(config: ExperimentConfig, spec: Optional[DiagnosticsGridSpec] = None,
                    out=None):
    """Train the joint time-input learner for each grid cell and measure value
    and gradient errors at ``t_0`` against the exchange-option formulas."""
    spec = spec or config.diagnostics or DiagnosticsGridSpec()
    payoff = config.payoff_fn()
    if not isinstance(payoff, Exchange):
        raise ConfigurationError("diagnostics need the exchange payoff (analytic benchmark)")
    out = _out_dir(config, out)
    model = config.market_model()
    grid_cfg = config.grid.model_copy(update={"maturity": spec.maturity})
    cfg = config.model_copy(update={"grid": grid_cfg, "algorithm": 5})
    problem = cfg.problem()
    sigma_bar = exchange_sigma_bar(model)
    test_rng = RandomStream(config.seed, EVAL_STREAM + 2).generator()
    x = problem.init.sample(spec.n_test, model.d, test_rng, model.sigma)
    v_true = margrabe_price(x[:, 0], x[:, 1], spec.maturity, sigma_bar)
    z_true = margrabe_delta(x[:, 0], x[:, 1], spec.maturity, sigma_bar)

    rows = []
    cell = 0
    for layers in spec.hidden_layers:
        for width in spec.widths:
            for rep in range(spec.repetitions):
                tc = replace(
                    cfg.train_config(),
                    epsilon=spec.epsilon,
                    joint_hidden_layers=layers,
                    joint_width=width,
                    seed=config.seed + 1000 * cell + rep,
                )
                cv, history = train(5, tc, problem)
                v_hat = cv.value_readout(x)
                z_hat = cv.gradient.evaluate(x[None], problem.grid.times[:1])[0]
                rows.append({
                    "layers": layers,
                    "width": width,
                    "repetition": rep,
                    "l2_error_value": float(np.sqrt(np.mean((v_hat - v_true) ** 2))),
                    "l2_error_gradient": float(np.sqrt(np.mean(np.sum((z_hat - z_true) ** 2, axis=1)))),
                    "training_steps": history.steps,
                })
            cell += 1

    with open(out / "diagnostics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    summary = []
    for layers in spec.hidden_layers:
        for width in spec.widths:
            sel = [r for r in rows if r["layers"] == layers and r["width"] == width]
            mv = _mean_ci([r["l2_error_value"] for r in sel])
            mg = _mean_ci([r["l2_error_gradient"] for r in sel])
            summary.append({
                "layers": layers, "width": width,
                "value_mean": mv[0], "value_ci_low": mv[1], "value_ci_high": mv[2],
                "gradient_mean": mg[0], "gradient_ci_low": mg[1], "gradient_ci_high": mg[2],
            })
    with open(out / "diagnostics_summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(summary[0]))
        writer.writeheader()
        writer.writerows(summary)
    _write_json(out / "diagnostics.json", {"cells": summary, "reproducibility": reproducibility(config)})
    return rows, summary
