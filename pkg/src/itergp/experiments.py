"""Run configuration and the experiment drivers behind the command line.

A run is a pure function of its :class:`RunConfig`. Configs are JSON objects
with a ``schema_version`` field; unknown keys are rejected so typos do not
silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, SplitSpec, load_table, standardise_and_split, synthetic_regression
from .exact import DEFAULT_CAP, DenseProblem, exact_optimise, exact_prior_sample
from .kernels import Hyperparameters, KernelOperator
from .optim import OptimiseConfig, optimise, taylor_warmstart_diagnostic
from .rng import make_rng
from .solvers import SolverConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SEED_NAMES = ("split", "probes", "features", "solver")
TRACE_FIXED = ["step"]
TRACE_TAIL = [
    "mean_residual",
    "probe_residual",
    "iterations",
    "epochs",
    "reached_tolerance",
    "status",
    "grad_inf_norm",
    "test_rmse",
    "test_llh",
]


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None
    target: int | str = -1
    delimiter: str = ","
    test_fraction: float = 0.1
    subsample: int | None = None
    synthetic: dict | None = None  # {"n", "d", "noise", "seed"} when no path is given


@dataclass
class DiagnoseConfig:
    mc_draws: int = 1000
    taylor_step: float = 1e-3
    power_iterations: int = 200
    cap: int = DEFAULT_CAP


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    estimator: str = "standard"
    solver: SolverConfig = field(default_factory=SolverConfig)
    warm_start: bool = False
    steps: int = 100
    learning_rate: float = 0.1
    num_probes: int = 64
    probe_kind: str = "gaussian"
    m_pairs: int = 1000
    prior: str = "rff"
    seeds: dict = field(default_factory=lambda: {name: i for i, name in enumerate(SEED_NAMES)})
    metric_stride: int = 0
    init_value: float = 1.0
    init: list | None = None  # explicit constrained start [lengthscales..., signal, noise]
    on_failure: str = "skip"
    kernel_cache: bool = False
    block_size: int = 1024
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)
    schema_version: int = SCHEMA_VERSION

    def optimise_config(self) -> OptimiseConfig:
        solver = dataclasses.replace(self.solver, warm_start=self.warm_start)
        return OptimiseConfig(
            estimator=self.estimator,
            solver=solver,
            steps=self.steps,
            learning_rate=self.learning_rate,
            num_probes=self.num_probes,
            probe_kind=self.probe_kind,
            m_pairs=self.m_pairs,
            prior=self.prior,
            probe_seed=self.seeds["probes"],
            feature_seed=self.seeds["features"],
            solver_seed=self.seeds["solver"],
            metric_stride=self.metric_stride,
            init_value=self.init_value,
            on_failure=self.on_failure,
            kernel_cache=self.kernel_cache,
            block_size=self.block_size,
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["solver"].pop("warm_start", None)
        return out


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(raw: dict, seed_overrides: dict | None = None) -> RunConfig:
    """Validate a decoded JSON config and build a :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    nested = {}
    for key, cls in (("data", DataConfig), ("solver", SolverConfig), ("diagnose", DiagnoseConfig)):
        if key in raw:
            sub = dict(raw.pop(key))
            if key == "solver" and "warm_start" in sub:
                raise ConfigError("solver: set warm_start at the top level")
            nested[key] = _build(cls, sub, key)
    seeds = {name: i for i, name in enumerate(SEED_NAMES)}
    given = raw.pop("seeds", {})
    if not isinstance(given, dict) or set(given) - set(SEED_NAMES):
        raise ConfigError(f"seeds: keys must be among {list(SEED_NAMES)}")
    seeds.update(given)
    for name, value in (seed_overrides or {}).items():
        if name not in SEED_NAMES:
            raise ConfigError(f"unknown seed {name!r}; expected one of {list(SEED_NAMES)}")
        seeds[name] = value
    if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in seeds.values()):
        raise ConfigError("seeds must be non-negative integers")
    cfg = _build(RunConfig, {**raw, **nested, "seeds": seeds}, "config")
    data = cfg.data
    if (data.path is None) == (data.synthetic is None):
        raise ConfigError("data: give exactly one of 'path' or 'synthetic'")
    if data.synthetic is not None and not {"n", "d"} <= set(data.synthetic):
        raise ConfigError("data.synthetic needs 'n' and 'd'")
    try:
        cfg.optimise_config()
        SplitSpec(data.test_fraction, seeds["split"], data.subsample)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def initial_hyperparameters(cfg: RunConfig, d: int) -> Hyperparameters:
    if cfg.init is None:
        return Hyperparameters.initial(d, cfg.init_value)
    if len(cfg.init) != d + 2:
        raise ConfigError(f"init needs {d + 2} values (d lengthscales, signal, noise), got {len(cfg.init)}")
    try:
        return Hyperparameters.from_vector(np.asarray(cfg.init, dtype=float))
    except ValueError as exc:
        raise ConfigError(f"init: {exc}") from None


def load_config(path, seed_overrides=None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(raw, seed_overrides)


def load_dataset(cfg: RunConfig) -> Dataset:
    data = cfg.data
    if data.path is not None:
        return load_table(data.path, data.target, data.delimiter)
    syn = data.synthetic
    X, y = synthetic_regression(int(syn["n"]), int(syn["d"]), int(syn.get("seed", 0)), float(syn.get("noise", 0.1)))
    return Dataset(X, y)


def prepare_data(cfg: RunConfig):
    spec = SplitSpec(cfg.data.test_fraction, cfg.seeds["split"], cfg.data.subsample)
    return standardise_and_split(load_dataset(cfg), spec)


def trace_header(d: int) -> list[str]:
    return TRACE_FIXED + Hyperparameters.initial(d).names() + TRACE_TAIL


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def trace_rows(trace) -> list[list[str]]:
    rows = []
    for rec in trace:
        values = [rec.step, *rec.hyperparameters, rec.mean_residual, rec.probe_residual, rec.iterations,
                  rec.epochs, rec.reached_tolerance, rec.status, rec.grad_inf_norm, rec.test_rmse, rec.test_llh]
        rows.append([_fmt(v) for v in values])
    return rows


def run_train(cfg: RunConfig):
    """Split, optimise and evaluate. Returns (result, train, test)."""
    train, test = prepare_data(cfg)
    start = initial_hyperparameters(cfg, train.d)
    return optimise(train, cfg.optimise_config(), test, start), train, test


def metrics_dict(m):
    return None if m is None else dataclasses.asdict(m)


def summary_document(cfg: RunConfig, result, train, test) -> dict:
    hp = result.hyperparameters
    failed = sum(rec.status not in ("converged", "budget") for rec in result.trace)
    total = result.total_seconds
    return {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "n_train": train.n,
        "n_test": test.n,
        "d": train.d,
        "hyperparameters": dict(zip(hp.names(), map(float, hp.constrained))),
        "raw_hyperparameters": [float(v) for v in hp.raw],
        "initial_metrics": metrics_dict(result.initial_metrics),
        "final_metrics": metrics_dict(result.final_metrics),
        "steps_completed": len(result.trace) - failed,
        "failed_steps": failed,
        "total_epochs": result.total_epochs,
        "solver_seconds": result.solver_seconds,
        "total_seconds": total,
        "solver_fraction": result.solver_seconds / total if total > 0 else None,
    }


# diagnostics ---------------------------------------------------------------


def _require_small(n, cap):
    if n > cap:
        raise ConfigError(f"n={n} exceeds the oracle cap of {cap}; subsample the data first")


def power_iteration_inverse(dense: DenseProblem, iterations: int = 200, seed: int = 0) -> float:
    """Largest eigenvalue of H⁻¹ by power iteration with dense solves."""
    u = make_rng(seed, 11).standard_normal(dense.n)
    u /= np.linalg.norm(u)
    lam = 0.0
    for _ in range(iterations):
        w = dense.solve(u)
        lam = float(u @ w)
        u = w / np.linalg.norm(w)
    return float(u @ dense.solve(u)) if iterations else lam


def initial_distances(dense: DenseProblem, hp: Hyperparameters, draws: int, seed: int):
    """Monte-Carlo initial RKHS distances ``bᵀH⁻¹b`` from a zero start.

    Standard probes are standard normal; pathwise targets are exact prior
    draws plus noise. Returns ``{kind: (mean, standard error)}``.
    """
    n = dense.n
    K = dense.H - hp.noise_scale**2 * np.eye(n)
    Z = make_rng(seed, 4, 0).standard_normal((n, draws))
    Xi = exact_prior_sample(K, make_rng(seed, 3, 0), draws) + hp.noise_scale * make_rng(seed, 2, 0).standard_normal((n, draws))
    out = {}
    for kind, B in (("standard", Z), ("pathwise", Xi)):
        d = np.einsum("ij,ij->j", B, dense.solve(B))
        out[kind] = (float(d.mean()), float(d.std(ddof=1) / np.sqrt(draws)))
    return out


def run_diagnose(cfg: RunConfig, hp: Hyperparameters | None = None) -> dict:
    train, _ = prepare_data(cfg)
    dc = cfg.diagnose
    _require_small(train.n, dc.cap)
    hp = hp if hp is not None else initial_hyperparameters(cfg, train.d)
    op = KernelOperator(train.inputs, hp)
    dense = DenseProblem.from_operator(op, dc.cap)
    distances = initial_distances(dense, hp, dc.mc_draws, cfg.seeds["probes"])
    direction = make_rng(cfg.seeds["solver"], 12).standard_normal(hp.size)
    direction /= np.linalg.norm(direction)
    op_next = KernelOperator(train.inputs, Hyperparameters(hp.raw + dc.taylor_step * direction))
    ratio = taylor_warmstart_diagnostic(op, op_next, dense.solve(train.targets))
    return {
        "n": train.n,
        "trace_inverse": float(np.trace(dense.inverse())),
        "lambda_max_inverse": power_iteration_inverse(dense, dc.power_iterations, cfg.seeds["solver"]),
        "noise_precision": 1.0 / hp.noise_scale**2,
        "distance_standard": distances["standard"][0],
        "distance_standard_se": distances["standard"][1],
        "distance_pathwise": distances["pathwise"][0],
        "distance_pathwise_se": distances["pathwise"][1],
        "taylor_ratio": ratio,
    }


def run_compare_oracle(cfg: RunConfig):
    """Iterative and exact trajectories from the same start.

    Returns (names, differences) with ``differences[t, k]`` the signed
    constrained-parameter difference, iterative minus exact, at step t.
    """
    train, _ = prepare_data(cfg)
    _require_small(train.n, cfg.diagnose.cap)
    ocfg = cfg.optimise_config()
    start = initial_hyperparameters(cfg, train.d)
    result = optimise(train, ocfg, None, start)
    _, exact_traj = exact_optimise(train.inputs, train.targets, start, cfg.steps, cfg.learning_rate, cfg.diagnose.cap)
    diffs = np.array([rec.hyperparameters - ex.constrained for rec, ex in zip(result.trace, exact_traj)])
    return start.names(), diffs.reshape(len(result.trace), start.size)


def difference_histogram(diffs, bins: int = 20):
    """Histogram of log10 |Δθ| over all steps and coordinates."""
    mags = np.abs(np.asarray(diffs)).ravel()
    mags = np.log10(np.maximum(mags, 1e-16))
    if mags.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0)
    return np.histogram(mags, bins=bins)
