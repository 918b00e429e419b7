"""Low-rank saddle-free Newton (LRSFN) optimization with baselines,
randomized eigendecomposition and linearized stability tools."""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .oracle import (
    FiniteSumProblem,
    FunctionOracle,
    Michalewicz,
    ObjectiveOracle,
    OracleError,
    Quadratic,
    Rosenbrock,
    StochasticQuadratic,
    make_problem,
)
from .optim import OptimizerConfig, OptimizerError, RunResult, run
from .randeig import LowRankEig, RangeFinderConfig, adaptive_rank, randomized_eigh

__all__ = [
    "BACKEND",
    "FiniteSumProblem",
    "FunctionOracle",
    "LowRankEig",
    "Michalewicz",
    "ObjectiveOracle",
    "OptimizerConfig",
    "OptimizerError",
    "OracleError",
    "Quadratic",
    "RangeFinderConfig",
    "Rosenbrock",
    "RunResult",
    "StochasticQuadratic",
    "adaptive_rank",
    "make_problem",
    "randomized_eigh",
    "run",
]
