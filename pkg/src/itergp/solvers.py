"""Batched SPD solvers: conjugate gradients, alternating projections, SGD.

All three solve ``H [v_y, v_1, ..., v_s] = [y, b_1, ..., b_s]`` on a shared
operator. Internally each column is divided by ``‖b_j‖ + eps`` so the
tolerance acts on relative residual norms; solutions and residuals are
scaled back before returning. Column 0 is the mean system, the remaining
columns are probe systems, and their residual norms are tracked separately.

Budgets are counted in epochs, one epoch being one evaluation of every entry
of H: a CG iteration is one epoch, an AP or SGD iteration with block or batch
size ``b`` is ``b / n`` epochs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

EPS = 1e-12
DIVERGENCE_LIMIT = 1e3  # relative residual norm beyond which SGD is declared diverged

SOLVER_KINDS = ("cg", "ap", "sgd")


@dataclass
class SolverConfig:
    kind: str = "cg"
    tolerance: float = 0.01
    max_epochs: float = 1000.0
    block_size: int = 1000
    batch_size: int = 500
    learning_rate: float = 30.0
    momentum: float = 0.9
    preconditioner_rank: int = 100
    warm_start: bool = False

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in SOLVER_KINDS:
            raise ValueError(f"unknown solver kind {self.kind!r}; expected one of {SOLVER_KINDS}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not self.max_epochs >= 1:
            raise ValueError("max_epochs must be at least 1")
        if self.block_size < 1 or self.batch_size < 1:
            raise ValueError("block and batch sizes must be at least 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.learning_rate < 0 or self.preconditioner_rank < 0:
            raise ValueError("learning rate and preconditioner rank must be non-negative")


@dataclass
class SolverReport:
    iterations: int
    epochs: float
    mean_residual: float
    probe_residual: float
    reached_tolerance: bool
    wall_time: float
    status: str  # "converged", "budget", "breakdown", "diverged" or "not_spd"
    residuals_estimated: bool = False

    @property
    def failed(self) -> bool:
        return self.status in ("breakdown", "diverged", "not_spd")


class LinearSystemBatch:
    """Targets, current solutions and residuals of a batch of systems.

    Parameters
    ----------
    operator
        Anything exposing ``n``, ``matvec``, ``rows``, ``columns`` and ``block``.
    targets : (n, s + 1) array
        Column 0 is the mean target ``y``.
    init : (n, s + 1) array, optional
        Initial solutions (a warm start); zero when omitted.
    """

    def __init__(self, operator, targets, init=None):
        targets = np.asarray(targets, dtype=float)
        if targets.ndim == 1:
            targets = targets[:, None]
        if targets.shape[0] != operator.n:
            raise ValueError(f"targets have {targets.shape[0]} rows, operator has {operator.n}")
        if not np.all(np.isfinite(targets)):
            raise ValueError("targets must be finite")
        self.operator = operator
        self.targets = targets
        if init is None:
            self.solutions = np.zeros_like(targets)
        else:
            init = np.asarray(init, dtype=float)
            if init.shape != targets.shape:
                raise ValueError("init must match the targets' shape")
            self.solutions = init.copy()
        self.residuals = None
        self.scales = np.linalg.norm(targets, axis=0) + EPS

    @property
    def num_probes(self) -> int:
        return self.targets.shape[1] - 1

    def recompute_residuals(self) -> np.ndarray:
        return self.targets - self.operator.matvec(self.solutions)

    def relative_norms(self, residuals=None) -> np.ndarray:
        r = self.residuals if residuals is None else residuals
        if r is None:
            r = self.recompute_residuals()
        return np.linalg.norm(r, axis=0) / self.scales


def _split_norms(col_norms):
    probe = float(np.mean(col_norms[1:])) if col_norms.size > 1 else 0.0
    return float(col_norms[0]), probe


def termination_check(batch: LinearSystemBatch, tolerance: float):
    """Return (mean_norm, probe_norm, done); done needs both norms ≤ tolerance."""
    mean, probe = _split_norms(batch.relative_norms())
    return mean, probe, bool(mean <= tolerance and probe <= tolerance)


def _normalised(batch):
    return batch.targets / batch.scales, batch.solutions / batch.scales


def _finish(batch, v, r, t, epochs, tol, start, status, estimated=False):
    batch.solutions = v * batch.scales
    batch.residuals = r * batch.scales
    mean, probe = _split_norms(np.linalg.norm(r, axis=0))
    done = mean <= tol and probe <= tol
    if status is None:
        status = "converged" if done else "budget"
    return SolverReport(t, epochs, mean, probe, bool(done), time.perf_counter() - start, status, estimated)


def _done(r, tol):
    mean, probe = _split_norms(np.linalg.norm(r, axis=0))
    return mean <= tol and probe <= tol


def solve_cg(batch: LinearSystemBatch, cfg: SolverConfig, precond=None, callback=None) -> SolverReport:
    """Preconditioned conjugate gradients, every column updated until both norms meet the tolerance.

    ``precond`` maps residual columns to preconditioned columns; identity when
    None. ``callback(t, v, r)`` receives normalised iterates.
    """
    start = time.perf_counter()
    H = batch.operator
    P = precond if precond is not None else (lambda R: R)
    b, v = _normalised(batch)
    tol = cfg.tolerance
    r = b - H.matvec(v)
    p = P(r)
    d = p.copy()
    gamma = np.einsum("ij,ij->j", r, p)
    t = 0
    status = None
    while t < cfg.max_epochs and not _done(r, tol):
        Hd = H.matvec(d)
        curvature = np.einsum("ij,ij->j", d, Hd)
        active = gamma != 0.0
        if np.any(active & ~(curvature > 0)) or not np.all(np.isfinite(curvature)):
            status = "breakdown"
            break
        alpha = np.where(active, gamma / np.where(active, curvature, 1.0), 0.0)
        if not np.all(np.isfinite(alpha)):
            status = "breakdown"
            break
        v = v + alpha * d
        r = r - alpha * Hd
        p = P(r)
        gamma_new = np.einsum("ij,ij->j", r, p)
        beta = np.where(active, gamma_new / np.where(active, gamma, 1.0), 0.0)
        gamma = gamma_new
        d = p + beta * d
        t += 1
        if callback is not None:
            callback(t, v, r)
    return _finish(batch, v, r, t, float(t), tol, start, status)


def block_partition(n: int, block_size: int):
    return [slice(s, min(s + block_size, n)) for s in range(0, n, block_size)]


def solve_ap(batch: LinearSystemBatch, cfg: SolverConfig, callback=None, factors=None) -> SolverReport:
    """Alternating projections over contiguous blocks.

    Each iteration projects onto the block whose summed residual
    ``r_y[blk] + Σ_j r_j[blk]`` has the largest norm. Block Cholesky factors
    are computed on first use and kept in ``factors`` (a dict) if given.
    """
    start = time.perf_counter()
    H = batch.operator
    n = H.n
    bs = min(cfg.block_size, n)
    blocks = block_partition(n, bs)
    starts = np.array([blk.start for blk in blocks])
    factors = {} if factors is None else factors
    b, v = _normalised(batch)
    tol = cfg.tolerance
    r = b - H.matvec(v)
    max_iter = n * cfg.max_epochs / bs
    t = 0
    status = None
    while t < max_iter and not _done(r, tol):
        summed = r.sum(axis=1)
        scores = np.add.reduceat(summed * summed, starts)
        i = int(np.argmax(scores))
        blk = blocks[i]
        if i not in factors:
            try:
                factors[i] = cho_factor(H.block(blk, blk), lower=True)
            except LinAlgError:
                status = "not_spd"
                break
        delta = cho_solve(factors[i], r[blk])
        v[blk] += delta
        r -= H.columns(blk) @ delta
        t += 1
        if callback is not None:
            callback(t, v, r)
    return _finish(batch, v, r, t, t * bs / n, tol, start, status)


def solve_sgd(batch: LinearSystemBatch, cfg: SolverConfig, rng: np.random.Generator, callback=None) -> SolverReport:
    """Minibatch SGD with momentum on the quadratic ½uᵀHu − uᵀb.

    The residual is tracked sparsely: entries in the current batch are
    overwritten with the negative batch gradient, all others keep their last
    value, so the reported norms are estimates.
    """
    start = time.perf_counter()
    H = batch.operator
    n = H.n
    bs = min(cfg.batch_size, n)
    b, v = _normalised(batch)
    tol = cfg.tolerance
    r = b.copy()
    m = np.zeros_like(v)
    step = cfg.learning_rate / bs
    max_iter = n * cfg.max_epochs / bs
    t = 0
    status = None
    while t < max_iter and not _done(r, tol):
        idx = np.sort(rng.choice(n, size=bs, replace=False))
        g = H.rows(idx) @ v - b[idx]
        m *= cfg.momentum
        m[idx] -= step * g
        v_next = v + m
        if not (np.all(np.isfinite(v_next)) and np.all(np.isfinite(g))):
            status = "diverged"
            break
        v = v_next
        r[idx] = -g
        t += 1
        if np.max(np.linalg.norm(r, axis=0)) > DIVERGENCE_LIMIT:
            status = "diverged"
            break
        if callback is not None:
            callback(t, v, r)
    return _finish(batch, v, r, t, t * bs / n, tol, start, status, estimated=True)


def solve(batch: LinearSystemBatch, cfg: SolverConfig, precond=None, rng=None) -> SolverReport:
    if cfg.kind == "cg":
        return solve_cg(batch, cfg, precond)
    if cfg.kind == "ap":
        return solve_ap(batch, cfg)
    if rng is None:
        raise ValueError("SGD needs a random generator")
    return solve_sgd(batch, cfg, rng)


def epochs_per_iteration(cfg: SolverConfig, n: int) -> float:
    if cfg.kind == "cg":
        return 1.0
    size = cfg.block_size if cfg.kind == "ap" else cfg.batch_size
    return min(size, n) / n

