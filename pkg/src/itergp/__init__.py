"""Matrix-free Gaussian-process hyperparameter learning with iterative solvers."""

from .data import Dataset, SplitSpec, load_table, standardise_and_split, synthetic_regression
from .estimators import estimate_gradient_pathwise, estimate_gradient_standard, gen_standard_probes
from .exact import DenseProblem, exact_gradient, exact_mll, exact_optimise, exact_posterior
from .kernels import Hyperparameters, KernelOperator, pivoted_cholesky
from .optim import OptimiseConfig, TraceRecord, init_heuristic, optimise, raw_gradient, taylor_warmstart_diagnostic
from .posterior import PosteriorHandle, posterior_samples, predict_mean, sample_posterior
from .rff import RFFPrior, build_rff_basis, pathwise_targets
from .solvers import LinearSystemBatch, SolverConfig, solve

__version__ = "0.1.0"
