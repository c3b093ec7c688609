"""Neural martingale control variates for Monte-Carlo option pricing."""

__version__ = "0.1.0"

from .mathcore import RandomStream, cholesky, normal_cdf, standard_normals
from .market import (
    Basket,
    Exchange,
    ExchangeVsAverage,
    InitialSampler,
    MarketModel,
    ParametricSampler,
    PathBatch,
    TimeGrid,
    margrabe_delta,
    margrabe_price,
    simulate_paths,
)
from .nn import Network, init_network, load_checkpoint, save_checkpoint
from .cvmodel import ControlVariateModel, load_model, save_model
from .evaluation import EvaluationReport, SampleMoments, evaluate, optimal_lambda, variance_chi2_ci
from .solvers import (
    BELSolver,
    CorrelationMaxSolver,
    IterativeMRSSolver,
    IterativeProjectionSolver,
    MRSSolver,
    PricingProblem,
    ProjectionSolver,
    TrainConfig,
    VarianceMinSolver,
    train,
)
