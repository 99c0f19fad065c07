"""Marginal-likelihood maximisation with iterative solves.

Each outer step builds (or reuses) probe targets, solves the batched system
``H [v_y, v_1..v_s] = [y, b_1..b_s]``, turns the solutions into a gradient
estimate, and takes an Adam step on the softplus-unconstrained parameters.
With warm starting, targets are drawn once and the previous solutions seed
the next solve.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .estimators import estimate_gradient_pathwise, estimate_gradient_standard, gen_standard_probes
from .exact import ExactPrior, exact_optimise
from .kernels import Hyperparameters, KernelOperator, pivoted_cholesky
from .posterior import PosteriorHandle, TestMetrics, test_metrics
from .rff import RFFPrior, build_rff_basis, draw_noise, pathwise_targets
from .rng import make_rng
from .solvers import LinearSystemBatch, SolverConfig, solve

log = logging.getLogger(__name__)

ESTIMATORS = ("standard", "pathwise")
PRIORS = ("rff", "exact")
EVAL_STREAM = 1_000_003


class Adam:
    """Adam minimiser over a flat parameter vector."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def raw_gradient(constrained_grad, raw) -> np.ndarray:
    """Chain rule through softplus: multiply by sigmoid(raw)."""
    from scipy.special import expit

    return np.asarray(constrained_grad) * expit(np.asarray(raw, dtype=float))


@dataclass
class OptimiseConfig:
    estimator: str = "standard"
    solver: SolverConfig = field(default_factory=SolverConfig)
    steps: int = 100
    learning_rate: float = 0.1
    num_probes: int = 64
    probe_kind: str = "gaussian"
    m_pairs: int = 1000
    prior: str = "rff"
    probe_seed: int = 1
    feature_seed: int = 2
    solver_seed: int = 3
    metric_stride: int = 0
    init_value: float = 1.0
    on_failure: str = "skip"
    kernel_cache: bool = False
    block_size: int = 1024

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}")
        if self.on_failure not in ("skip", "abort"):
            raise ValueError("on_failure must be 'skip' or 'abort'")
        if self.steps < 0 or self.num_probes < 1 or self.learning_rate <= 0:
            raise ValueError("steps ≥ 0, num_probes ≥ 1 and learning_rate > 0 required")

    @property
    def warm_start(self) -> bool:
        return self.solver.warm_start


@dataclass
class TraceRecord:
    step: int
    hyperparameters: np.ndarray  # constrained, at which this step's systems were solved
    mean_residual: float
    probe_residual: float
    iterations: int
    epochs: float
    reached_tolerance: bool
    status: str
    solver_seconds: float  # cumulative
    total_seconds: float  # cumulative
    grad_inf_norm: float
    test_rmse: float | None = None
    test_llh: float | None = None


class SolverFailure(RuntimeError):
    pass


@dataclass
class OptimiseResult:
    hyperparameters: Hyperparameters
    trace: list
    initial_metrics: TestMetrics | None = None
    final_metrics: TestMetrics | None = None
    posterior: PosteriorHandle | None = None
    solver_seconds: float = 0.0
    total_seconds: float = 0.0
    total_epochs: float = 0.0

    def __iter__(self):
        return iter((self.hyperparameters, self.trace))


class ProbeSource:
    """Right-hand sides for each outer step.

    Under warm starting the base randomness is drawn once (stream 0); otherwise
    every step uses a fresh stream.
    """

    def __init__(self, config: OptimiseConfig, train_inputs, extra_points=None):
        self.config = config
        self.inputs = train_inputs
        self.extra_points = extra_points
        self._cache = {}

    def _stream(self, step):
        return 0 if self.config.warm_start else step + 1

    def prior(self, step):
        stream = self._stream(step)
        key = ("prior", stream)
        if key not in self._cache:
            if not self.config.warm_start:
                self._cache.clear()
            self._cache[key] = make_prior(self.config, self.inputs, self.extra_points, stream)
        return self._cache[key]

    def noise(self, step):
        stream = self._stream(step)
        key = ("noise", stream)
        if key not in self._cache:
            self._cache[key] = draw_noise(len(self.inputs), self.config.num_probes, self.config.probe_seed, stream)
        return self._cache[key]

    def standard(self, step):
        c = self.config
        s = len(self.inputs) if c.probe_kind == "basis" else c.num_probes
        return gen_standard_probes(len(self.inputs), s, c.probe_seed, c.probe_kind, self._stream(step)).targets


def make_prior(config: OptimiseConfig, train_inputs, extra_points=None, stream: int = 0):
    if config.prior == "exact":
        points = train_inputs if extra_points is None else np.vstack([train_inputs, extra_points])
        return ExactPrior(points, config.num_probes, config.feature_seed, stream)
    d = train_inputs.shape[1]
    return RFFPrior(build_rff_basis(d, config.m_pairs, config.feature_seed, config.num_probes, stream))


def solve_batch(op, targets, cfg: SolverConfig, init=None, rng=None):
    """Solve one batch with the configured solver, building the CG preconditioner if needed."""
    batch = LinearSystemBatch(op, targets, init)
    precond = None
    start = time.perf_counter()
    if cfg.kind == "cg" and cfg.preconditioner_rank > 0:
        precond = pivoted_cholesky(op, min(cfg.preconditioner_rank, op.n))
    report = solve(batch, cfg, precond, rng)
    report.wall_time = time.perf_counter() - start
    return batch, report


def evaluate(train, test, hp: Hyperparameters, config: OptimiseConfig, stream: int = EVAL_STREAM):
    """Test metrics at ``hp`` from a fresh pathwise solve (cold start)."""
    op = KernelOperator(train.inputs, hp, config.block_size, config.kernel_cache)
    prior = make_prior(config, train.inputs, test.inputs, stream)
    targets = pathwise_targets(prior, hp, train.inputs, draw_noise(train.n, config.num_probes, config.probe_seed, stream))
    cfg = SolverConfig(**{**config.solver.__dict__, "warm_start": False})
    batch, report = solve_batch(op, np.column_stack([train.targets, targets.xi]), cfg, rng=make_rng(config.solver_seed, 9, stream))
    if report.failed:
        log.warning("evaluation solve failed with status %s", report.status)
    handle = PosteriorHandle(train.inputs, hp, batch.solutions[:, 0], prior, batch.solutions[:, 1:], config.block_size)
    return test_metrics(handle, test.inputs, test.targets, test.target_scale), handle


def optimise(train, config: OptimiseConfig, test=None, init: Hyperparameters | None = None, evaluate_ends: bool = True):
    """Maximise the marginal likelihood of ``train``.

    Returns an :class:`OptimiseResult`, which unpacks as ``(hyperparameters, trace)``.
    """
    t0 = time.perf_counter()
    hp = init if init is not None else Hyperparameters.initial(train.d, config.init_value)
    adam = Adam(config.learning_rate)
    solver_cfg = SolverConfig(**config.solver.__dict__)
    extra = test.inputs if test is not None else None
    source = ProbeSource(config, train.inputs, extra)
    previous = None
    trace = []
    solver_seconds = 0.0
    total_epochs = 0.0
    halved = False
    initial_metrics = final_metrics = None
    if test is not None and evaluate_ends:
        initial_metrics, _ = evaluate(train, test, hp, config)
    last_handle = None

    for step in range(config.steps):
        op = KernelOperator(train.inputs, hp, config.block_size, config.kernel_cache)
        if config.estimator == "standard":
            probes = source.standard(step)
        else:
            prior = source.prior(step)
            probes = pathwise_targets(prior, hp, train.inputs, source.noise(step)).xi
        targets = np.column_stack([train.targets, probes])
        init_solutions = previous if (config.warm_start and previous is not None) else None
        batch, report = solve_batch(op, targets, solver_cfg, init_solutions, make_rng(config.solver_seed, 8, step))
        solver_seconds += report.wall_time
        total_epochs += report.epochs

        if report.failed:
            if config.on_failure == "abort":
                raise SolverFailure(f"step {step}: solver {report.status}")
            if solver_cfg.kind == "sgd" and not halved:
                solver_cfg.learning_rate /= 2.0
                halved = True
            log.warning("step %d: solver %s, skipping update", step, report.status)
            trace.append(
                TraceRecord(step, hp.constrained, report.mean_residual, report.probe_residual, report.iterations,
                            report.epochs, False, report.status, solver_seconds, time.perf_counter() - t0, float("nan"))
            )
            continue

        v_y, V = batch.solutions[:, 0], batch.solutions[:, 1:]
        if config.estimator == "standard":
            est = estimate_gradient_standard(op, v_y, V, probes)
        else:
            est = estimate_gradient_pathwise(op, v_y, V)
        grad = est.values

        rmse = llh = None
        if test is not None:
            due = config.metric_stride > 0 and (step + 1) % config.metric_stride == 0
            if config.estimator == "pathwise":
                last_handle = PosteriorHandle(train.inputs, hp, v_y, source.prior(step), V, config.block_size)
                m = test_metrics(last_handle, test.inputs, test.targets, test.target_scale)
                rmse, llh = m.rmse, m.llh
            elif due:
                m, _ = evaluate(train, test, hp, config, EVAL_STREAM + step + 1)
                rmse, llh = m.rmse, m.llh

        previous = batch.solutions
        trace.append(
            TraceRecord(step, hp.constrained, report.mean_residual, report.probe_residual, report.iterations,
                        report.epochs, report.reached_tolerance, report.status, solver_seconds,
                        time.perf_counter() - t0, float(np.max(np.abs(grad))), rmse, llh)
        )
        log.info("step %d: %s after %.3g epochs, |grad|max %.3g", step, report.status, report.epochs, trace[-1].grad_inf_norm)
        # ascent on L == descent on -L
        hp = Hyperparameters(adam.step(hp.raw, -raw_gradient(grad, hp.raw)))

    handle = None
    if test is not None and evaluate_ends:
        final_metrics, handle = evaluate(train, test, hp, config)
    return OptimiseResult(hp, trace, initial_metrics, final_metrics, handle or last_handle,
                          solver_seconds, time.perf_counter() - t0, total_epochs)


def init_heuristic(dataset, n_centroids: int = 10, subset: int = 10000, seed: int = 0,
                   steps: int = 100, learning_rate: float = 0.1, init_value: float = 1.0) -> Hyperparameters:
    """Average of exact-optimum hyperparameters on nearest-neighbour subsets.

    For each of ``n_centroids`` uniformly chosen centroids, the ``subset``
    nearest training points (ties broken by index) are optimised exactly
    with Adam; constrained values are averaged arithmetically.
    """
    X, y = dataset.inputs, dataset.targets
    start = Hyperparameters.initial(dataset.d, init_value)
    if subset >= dataset.n:
        return exact_optimise(X, y, start, steps, learning_rate)[0]
    rng = make_rng(seed, 10)
    found = []
    for _ in range(n_centroids):
        c = int(rng.integers(dataset.n))
        dist = np.linalg.norm(X - X[c], axis=1)
        nearest = np.argsort(dist, kind="stable")[:subset]
        hp, _ = exact_optimise(X[nearest], y[nearest], start, steps, learning_rate)
        found.append(hp.constrained)
    return Hyperparameters.from_vector(np.mean(found, axis=0))


def taylor_prediction_errors(op_t, op_t1, v_t):
    """(prediction error, actual change) of the first-order warm-start prediction.

    With the right-hand side fixed at ``b = H_t v_t``, the exact next solution
    is ``v_{t+1} = H_{t+1}⁻¹ b`` and the first-order prediction is
    ``v_t − H_t⁻¹ (H_{t+1} − H_t) v_t``. Both quantities are measured in the
    ``H_{t+1}`` norm: ``‖v_{t+1} − prediction‖`` and ``‖v_{t+1} − v_t‖``.
    Dense, small n only.
    """
    Ht, Ht1 = op_t.dense(), op_t1.dense()
    v_t = np.asarray(v_t, dtype=float)
    # work with differences from v_t so that unchanged operators give exact zeros
    delta_v = (Ht1 - Ht) @ v_t
    actual = -np.linalg.solve(Ht1, delta_v)
    predicted = -np.linalg.solve(Ht, delta_v)

    def hnorm(u):
        return float(np.sqrt(max(u @ Ht1 @ u, 0.0)))

    return hnorm(actual - predicted), hnorm(actual)


def taylor_warmstart_diagnostic(op_t, op_t1, v_t) -> float:
    """Prediction error relative to the actual change; 0 when nothing moved."""
    error, actual = taylor_prediction_errors(op_t, op_t1, v_t)
    return 0.0 if actual == 0.0 else error / actual
