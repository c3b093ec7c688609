import numpy as np
import pytest

from martingale_cv.market import Exchange, InitialSampler, MarketModel, TimeGrid
from martingale_cv.solvers import PricingProblem


@pytest.fixture
def exchange_model():
    return MarketModel(0.3, 0.05, d=2)


@pytest.fixture
def small_problem(exchange_model):
    """Two-asset exchange option on a coarse grid, cheap enough for smoke training."""
    return PricingProblem(
        exchange_model,
        TimeGrid.uniform(0.5, 5),
        Exchange(),
        InitialSampler.lognormal(1.0, 0.08, 0.1),
    )


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + d * np.eye(d)
