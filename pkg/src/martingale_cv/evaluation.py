"""Control-variate Monte-Carlo estimation and the replicated evaluation protocol.

The protocol draws ``n_mc`` independent replications of ``n_in`` paths. Each
replication yields one plain and one controlled price estimate; their spread
gives chi-square intervals for the estimator variance, while the pooled
``n_mc * n_in`` per-path samples give the per-sample variances whose ratio
is the variance-reduction factor.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2, norm

from .market import InitialSampler, MarketModel, ParametricSampler, Payoff, simulate_paths
from .mathcore import RandomStream

__all__ = [
    "SampleMoments",
    "EvaluationReport",
    "martingale_sum",
    "cv_estimate",
    "optimal_lambda",
    "variance_chi2_ci",
    "evaluate",
    "robustness_sweep",
    "write_sweep_csv",
    "price_comparison",
]


@dataclass
class SampleMoments:
    """Count, mean and sum of squared deviations, mergeable (Chan et al. update)."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, values) -> "SampleMoments":
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            return cls()
        mu = float(v.mean())
        return cls(v.size, mu, float(np.sum((v - mu) ** 2)))

    def merge(self, other: "SampleMoments") -> "SampleMoments":
        if other.count == 0:
            return SampleMoments(self.count, self.mean, self.m2)
        if self.count == 0:
            return SampleMoments(other.count, other.mean, other.m2)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return SampleMoments(n, mean, m2)

    def update(self, values) -> "SampleMoments":
        merged = self.merge(SampleMoments.of(values))
        self.count, self.mean, self.m2 = merged.count, merged.mean, merged.m2
        return self

    @property
    def variance(self) -> float:
        """Unbiased sample variance."""
        return self.m2 / (self.count - 1) if self.count > 1 else float("nan")

    @property
    def standard_error(self) -> float:
        return float(np.sqrt(self.variance / self.count))


def martingale_sum(cv, paths, model: Optional[MarketModel] = None) -> np.ndarray:
    """Per-path discrete martingale ``M`` of ``cv`` along ``paths``."""
    return cv.martingale_sum(paths)


def cv_estimate(cv, paths, payoff: Payoff, model=None, lambda_override: Optional[float] = None):
    """Per-path controlled samples ``D(t_0,T) g(X_T) - lambda M`` and their moments."""
    lam = cv.lam if lambda_override is None else float(lambda_override)
    xi = paths.discounts()[:, -1] * payoff(paths.terminal)
    values = xi if lam == 0.0 else xi - lam * cv.martingale_sum(paths)
    return values, SampleMoments.of(values)


def optimal_lambda(xi, m):
    """``Cov[xi, m] / Var[m]`` from unbiased sample moments.

    Returns ``(lambda, degenerate)``; when ``m`` has zero sample variance the
    coefficient is 0 and ``degenerate`` is True.
    """
    xi = np.asarray(xi, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if xi.shape != m.shape or xi.size < 2:
        raise ValueError("xi and m must be equal-length samples of size >= 2")
    mc = m - m.mean()
    var_m = float(mc @ mc) / (m.size - 1)
    if var_m <= 0.0:
        return 0.0, True
    cov = float(mc @ (xi - xi.mean())) / (m.size - 1)
    return cov / var_m, False


def variance_chi2_ci(estimator_samples, alpha: float = 0.05):
    """Chi-square interval ``[(N-1)S^2/q_{1-a/2}, (N-1)S^2/q_{a/2}]`` for a variance."""
    x = np.asarray(estimator_samples, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("need at least two replications")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    s2 = float(np.var(x, ddof=1))
    dof = n - 1
    return (dof * s2 / chi2.ppf(1 - alpha / 2, dof), dof * s2 / chi2.ppf(alpha / 2, dof))


@dataclass
class EvaluationReport:
    plain_variance: float
    cv_variance: float
    reduction_factor: float
    estimator_mean: float
    estimator_ci: tuple
    variance_ci_mc: tuple
    variance_ci_cv: tuple
    lam: float
    n_mc: int
    n_in: int
    seed: int
    training_steps: int
    training_paths: int
    plain_mean: float = float("nan")
    plain_ci: tuple = (float("nan"), float("nan"))
    replicates_mc: list = field(default_factory=list)
    replicates_cv: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    FIELDS = (
        "plain_variance",
        "cv_variance",
        "reduction_factor",
        "estimator_mean",
        "estimator_ci",
        "variance_ci_mc",
        "variance_ci_cv",
        "lambda",
        "n_mc",
        "n_in",
        "seed",
        "training_steps",
        "training_paths",
    )

    @property
    def cv_standard_error(self) -> float:
        return float(np.sqrt(self.cv_variance / (self.n_mc * self.n_in)))

    @property
    def plain_standard_error(self) -> float:
        return float(np.sqrt(self.plain_variance / (self.n_mc * self.n_in)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        for key in ("estimator_ci", "variance_ci_mc", "variance_ci_cv", "plain_ci"):
            d[key] = list(d[key])
        extra = d.pop("extra")
        out = {k: d[k] for k in self.FIELDS}
        out.update({k: v for k, v in d.items() if k not in out})
        out.update(extra)
        return out

    def to_json(self, path=None, **extra) -> str:
        text = json.dumps({**self.to_dict(), **extra}, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path) -> None:
        d = self.to_dict()
        row = {}
        for key in self.FIELDS:
            v = d[key]
            if isinstance(v, (list, tuple)):
                row[f"{key}_low"], row[f"{key}_high"] = v
            else:
                row[key] = v
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            writer.writeheader()
            writer.writerow(row)


def _chunk_size(n_in: int, n_steps: int, d: int) -> int:
    # keep one chunk of asset paths around 16 MB
    return int(max(1000, min(n_in, 2_000_000 // ((n_steps + 1) * d))))


def evaluate(
    cv,
    model: MarketModel,
    payoff: Payoff,
    init: Optional[InitialSampler] = None,
    n_mc: int = 10,
    n_in: int = 100_000,
    stream=None,
    lambda_override: Optional[float] = None,
    parametric: Optional[ParametricSampler] = None,
    threads: int = 1,
    confidence: float = 0.95,
) -> EvaluationReport:
    """Replicated plain-MC versus control-variate comparison on shared paths.

    Replication ``r`` and chunk ``c`` use substream ``(r, c)`` of ``stream``,
    so results do not depend on ``threads``.
    """
    if n_mc < 2 or n_in < 2:
        raise ValueError("n_mc and n_in must both be at least 2")
    if stream is None:
        stream = RandomStream(0)
    elif isinstance(stream, (int, np.integer)):
        stream = RandomStream(int(stream))
    init = init or InitialSampler.fixed(1.0)
    lam = cv.lam if lambda_override is None else float(lambda_override)
    grid = cv.grid
    chunk = _chunk_size(n_in, grid.n_steps, model.d)
    bounds = [(lo, min(lo + chunk, n_in)) for lo in range(0, n_in, chunk)]
    tasks = [(r, c, hi - lo) for r in range(n_mc) for c, (lo, hi) in enumerate(bounds)]

    def run(task):
        r, c, size = task
        sub = stream.substream(r).substream(c)
        paths = simulate_paths(model, grid, size, init, sub, parametric)
        xi = paths.discounts()[:, -1] * payoff(paths.terminal)
        v = xi if lam == 0.0 else xi - lam * cv.martingale_sum(paths)
        return SampleMoments.of(xi), SampleMoments.of(v)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    rep_mc = [SampleMoments() for _ in range(n_mc)]
    rep_cv = [SampleMoments() for _ in range(n_mc)]
    for (r, _, _), (m_mc, m_cv) in zip(tasks, results):
        rep_mc[r] = rep_mc[r].merge(m_mc)
        rep_cv[r] = rep_cv[r].merge(m_cv)
    pooled_mc, pooled_cv = SampleMoments(), SampleMoments()
    for a, b in zip(rep_mc, rep_cv):
        pooled_mc = pooled_mc.merge(a)
        pooled_cv = pooled_cv.merge(b)

    est_mc = np.array([m.mean for m in rep_mc])
    est_cv = np.array([m.mean for m in rep_cv])
    alpha = 1.0 - confidence
    z = float(norm.ppf(1 - alpha / 2))
    se_cv, se_mc = pooled_cv.standard_error, pooled_mc.standard_error
    meta = getattr(cv, "metadata", {}) or {}
    seed = stream.seed if isinstance(stream, RandomStream) else None
    return EvaluationReport(
        plain_variance=pooled_mc.variance,
        cv_variance=pooled_cv.variance,
        reduction_factor=pooled_mc.variance / pooled_cv.variance,
        estimator_mean=pooled_cv.mean,
        estimator_ci=(pooled_cv.mean - z * se_cv, pooled_cv.mean + z * se_cv),
        variance_ci_mc=variance_chi2_ci(est_mc, alpha),
        variance_ci_cv=variance_chi2_ci(est_cv, alpha),
        lam=lam,
        n_mc=n_mc,
        n_in=n_in,
        seed=seed,
        training_steps=int(meta.get("training_steps", 0)),
        training_paths=int(meta.get("training_paths", 0)),
        plain_mean=pooled_mc.mean,
        plain_ci=(pooled_mc.mean - z * se_mc, pooled_mc.mean + z * se_mc),
        replicates_mc=est_mc.tolist(),
        replicates_cv=est_cv.tolist(),
    )


def robustness_sweep(
    cv,
    base_model: MarketModel,
    payoff: Payoff,
    sigma_values: Sequence[float],
    init: Optional[InitialSampler] = None,
    n_mc: int = 10,
    n_in: int = 100_000,
    stream=None,
    threads: int = 1,
) -> list:
    """Evaluate one fixed model under each volatility in ``sigma_values``."""
    stream = stream if stream is not None else RandomStream(0)
    if isinstance(stream, (int, np.integer)):
        stream = RandomStream(int(stream))
    reports = []
    for j, s in enumerate(sigma_values):
        model = base_model.with_sigma(s)
        rep = evaluate(cv, model, payoff, init, n_mc, n_in, stream.substream(10_000 + j),
                       threads=threads)
        rep.extra["sigma"] = float(s)
        reports.append(rep)
    return reports


def write_sweep_csv(reports: Sequence[EvaluationReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", "factor", "mean", "ci_low", "ci_high"])
        for rep in reports:
            lo, hi = rep.estimator_ci
            writer.writerow([rep.extra["sigma"], rep.reduction_factor, rep.estimator_mean, lo, hi])


def price_comparison(
    cv,
    model: MarketModel,
    payoff: Payoff,
    init: InitialSampler,
    sample_sizes: Sequence[int],
    analytic: float,
    n_rep: int = 20,
    stream=None,
) -> list:
    """Root-mean-square error against ``analytic`` of plain MC, CV and the
    direct value-network readout, for each sample size.

    The readout is taken at the mean initial state; it does not depend on
    the sample size.
    """
    stream = stream if stream is not None else RandomStream(0)
    rows = []
    readout = None
    if cv.value is not None:
        x0 = np.atleast_2d(np.broadcast_to(np.asarray(init.s0, dtype=np.float64), (model.d,)))
        readout = float(cv.value_readout(x0)[0])
    for j, n in enumerate(sample_sizes):
        err_mc, err_cv, vals_mc, vals_cv = [], [], [], []
        for r in range(n_rep):
            paths = simulate_paths(model, cv.grid, int(n), init, stream.substream(j).substream(r))
            xi = paths.discounts()[:, -1] * payoff(paths.terminal)
            v = xi - cv.lam * cv.martingale_sum(paths)
            vals_mc.append(xi.mean())
            vals_cv.append(v.mean())
            err_mc.append((xi.mean() - analytic) ** 2)
            err_cv.append((v.mean() - analytic) ** 2)
        row = {
            "n": int(n),
            "mc_mean": float(np.mean(vals_mc)),
            "cv_mean": float(np.mean(vals_cv)),
            "mc_l2_error": float(np.sqrt(np.mean(err_mc))),
            "cv_l2_error": float(np.sqrt(np.mean(err_cv))),
        }
        if readout is not None:
            row["readout"] = readout
            row["readout_l2_error"] = abs(readout - analytic)
        rows.append(row)
    return rows
