import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from martingale_cv.cvmodel import ControlVariateModel, MargrabeGradient
from martingale_cv.evaluation import (
    EvaluationReport,
    SampleMoments,
    cv_estimate,
    evaluate,
    optimal_lambda,
    price_comparison,
    robustness_sweep,
    variance_chi2_ci,
    write_sweep_csv,
)
from martingale_cv.market import (
    Exchange,
    InitialSampler,
    MarketModel,
    TimeGrid,
    exchange_sigma_bar,
    margrabe_price,
    simulate_paths,
)
from martingale_cv.mathcore import RandomStream


def _margrabe_cv(model, n_steps=10):
    grid = TimeGrid.uniform(0.5, n_steps)
    return ControlVariateModel(grid, MargrabeGradient(exchange_sigma_bar(model), 0.5), 2)


@settings(max_examples=50)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50),
    st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50),
)
def test_moment_merge_matches_pooled(a, b):
    merged = SampleMoments.of(a).merge(SampleMoments.of(b))
    pooled = np.array(a + b)
    assert merged.count == pooled.size
    assert merged.mean == pytest.approx(pooled.mean(), rel=1e-9, abs=1e-9)
    assert merged.m2 == pytest.approx(np.sum((pooled - pooled.mean()) ** 2), rel=1e-7, abs=1e-6)


def test_moments_stable_with_large_offset():
    x = 1e9 + np.random.default_rng(0).normal(size=10_000)
    acc = SampleMoments()
    for chunk in np.array_split(x, 7):
        acc.update(chunk)
    assert acc.variance == pytest.approx(np.var(x - 1e9, ddof=1), rel=1e-6)
    assert np.isnan(SampleMoments.of([1.0]).variance)


def test_optimal_lambda_recovers_coefficient():
    rng = np.random.default_rng(0)
    m = rng.normal(size=100_000)
    xi = 2.5 * m + rng.normal(scale=0.1, size=m.size)
    lam, degenerate = optimal_lambda(xi, m)
    assert lam == pytest.approx(2.5, abs=0.01) and not degenerate
    assert optimal_lambda(xi[:10], np.zeros(10)) == (0.0, True)
    with pytest.raises(ValueError):
        optimal_lambda([1.0], [1.0])


def test_chi2_interval_formula():
    x = np.random.default_rng(3).normal(size=20)
    s2 = x.var(ddof=1)
    lo, hi = variance_chi2_ci(x, 0.1)
    assert lo == pytest.approx(19 * s2 / chi2.ppf(0.95, 19))
    assert hi == pytest.approx(19 * s2 / chi2.ppf(0.05, 19))
    with pytest.raises(ValueError):
        variance_chi2_ci([1.0])
    with pytest.raises(ValueError):
        variance_chi2_ci(x, 1.5)


def test_cv_estimate_with_and_without_lambda():
    model = MarketModel(0.3, 0.05, d=2)
    cv = _margrabe_cv(model)
    paths = simulate_paths(model, cv.grid, 2000, InitialSampler.fixed(1.0), RandomStream(0))
    plain, _ = cv_estimate(cv, paths, Exchange(), lambda_override=0.0)
    controlled, moments = cv_estimate(cv, paths, Exchange())
    np.testing.assert_allclose(plain, np.exp(-0.025) * Exchange()(paths.terminal))
    np.testing.assert_allclose(plain - controlled, cv.martingale_sum(paths))
    assert moments.count == 2000


def test_evaluate_report_fields_and_unbiasedness(tmp_path):
    model = MarketModel(0.3, 0.05, d=2)
    cv = _margrabe_cv(model)
    rep = evaluate(cv, model, Exchange(), InitialSampler.fixed(1.0), 4, 5000, RandomStream(1, 7))
    price = margrabe_price(1.0, 1.0, 0.5, exchange_sigma_bar(model))
    lo, hi = rep.estimator_ci
    assert lo - 2 * (hi - lo) < price < hi + 2 * (hi - lo)
    assert rep.reduction_factor > 10
    assert rep.reduction_factor == pytest.approx(rep.plain_variance / rep.cv_variance)
    assert len(rep.replicates_cv) == 4 and rep.seed == 1
    rep.to_json(tmp_path / "r.json", reproducibility={"seed": 1})
    data = json.loads((tmp_path / "r.json").read_text())
    for key in EvaluationReport.FIELDS:
        assert key in data
    assert list(data)[:13] == list(EvaluationReport.FIELDS)
    rep.to_csv(tmp_path / "r.csv")
    header, row = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert header.split(",")[0] == "plain_variance" and "lambda" in header
    assert len(header.split(",")) == len(row.split(","))


def test_evaluate_is_deterministic_and_thread_invariant():
    model = MarketModel(0.3, 0.05, d=2)
    cv = _margrabe_cv(model, 5)
    args = (cv, model, Exchange(), InitialSampler.fixed(1.0), 3, 2500)
    a = evaluate(*args, stream=RandomStream(4, 7))
    b = evaluate(*args, stream=RandomStream(4, 7))
    c = evaluate(*args, stream=RandomStream(4, 7), threads=3)
    assert a.to_dict() == b.to_dict()
    assert a.cv_variance == pytest.approx(c.cv_variance, rel=1e-9)
    assert a.estimator_mean == pytest.approx(c.estimator_mean, rel=1e-9)


def test_lambda_zero_disables_control_variate():
    model = MarketModel(0.3, 0.05, d=2)
    rep = evaluate(_margrabe_cv(model, 5), model, Exchange(), None, 2, 1000, RandomStream(0), lambda_override=0.0)
    assert rep.reduction_factor == pytest.approx(1.0)
    assert rep.lam == 0.0
    with pytest.raises(ValueError):
        evaluate(_margrabe_cv(model, 5), model, Exchange(), None, 1, 1000)


def test_sweep_csv(tmp_path):
    model = MarketModel(0.3, 0.05, d=2)
    reps = robustness_sweep(_margrabe_cv(model, 5), model, Exchange(), [0.2, 0.4], None, 2, 2000, RandomStream(0))
    write_sweep_csv(reps, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().strip().splitlines()
    assert lines[0] == "sigma,factor,mean,ci_low,ci_high"
    assert [float(line.split(",")[0]) for line in lines[1:]] == [0.2, 0.4]


def test_price_comparison_errors_shrink_with_n():
    model = MarketModel(0.3, 0.05, d=2)
    cv = _margrabe_cv(model)
    price = margrabe_price(1.0, 1.0, 0.5, exchange_sigma_bar(model))
    rows = price_comparison(cv, model, Exchange(), InitialSampler.fixed(1.0), [10, 1000], price, 30, RandomStream(8))
    assert [r["n"] for r in rows] == [10, 1000]
    assert rows[1]["cv_l2_error"] < rows[0]["cv_l2_error"]
    assert all(r["cv_l2_error"] < r["mc_l2_error"] for r in rows)
    assert "readout" not in rows[0]
    single = price_comparison(cv, model, Exchange(), InitialSampler.fixed(1.0), [1], price, 5, RandomStream(8))
    assert np.isfinite(single[0]["cv_mean"])
