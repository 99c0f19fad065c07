"""Dense Cholesky reference computations for small problems.

This is correctness scaffolding: exact marginal likelihood and gradient,
exact posterior moments and exact prior draws. Problem size is capped so it
is never used at scale by accident.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from .kernels import Hyperparameters, KernelOperator, cross_kernel
from .rng import make_rng

DEFAULT_CAP = 4096
DENSE_STACK_LIMIT = 2**25  # entries in the (d_θ, n, n) derivative stack
LOG_2PI = np.log(2.0 * np.pi)


class NotPositiveDefinite(LinAlgError):
    pass


@dataclass
class DenseProblem:
    op: KernelOperator
    H: np.ndarray
    chol: np.ndarray  # lower triangular

    @classmethod
    def from_operator(cls, op: KernelOperator, cap: int = DEFAULT_CAP):
        if op.n > cap:
            raise ValueError(f"n={op.n} exceeds the dense reference cap of {cap}")
        H = op.dense().copy()
        try:
            L = cholesky(H, lower=True)
        except LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
        return cls(op, H, L)

    @cached_property
    def dH(self) -> np.ndarray:
        """Dense derivative stack, shape (d_θ, n, n)."""
        return self.op.dense_derivatives()

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def solve(self, b):
        return cho_solve((self.chol, True), b)

    def inverse(self):
        return self.solve(np.eye(self.n))

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


def exact_mll(dense: DenseProblem, y) -> float:
    y = np.asarray(y, dtype=float)
    alpha = solve_triangular(dense.chol, y, lower=True)
    return float(-0.5 * alpha @ alpha - 0.5 * dense.logdet() - 0.5 * dense.n * LOG_2PI)


def exact_gradient(dense: DenseProblem, y) -> np.ndarray:
    """Gradient of the marginal likelihood with respect to constrained parameters."""
    v = dense.solve(np.asarray(y, dtype=float))
    Hinv = dense.inverse()
    if dense.op.num_params * dense.n**2 > DENSE_STACK_LIMIT:
        # tr(H⁻¹ dH) = Σ H⁻¹ ⊙ dH for symmetric H⁻¹: fold both terms into one weight matrix
        return dense.op.contract_matrix(0.5 * np.outer(v, v) - 0.5 * Hinv)
    quad = np.einsum("i,kij,j->k", v, dense.dH, v)
    trace = np.einsum("ij,kij->k", Hinv, dense.dH)
    return 0.5 * quad - 0.5 * trace


def mll_and_gradient(inputs, y, hp: Hyperparameters, cap: int = DEFAULT_CAP):
    dense = DenseProblem.from_operator(KernelOperator(inputs, hp), cap=cap)
    return exact_mll(dense, y), exact_gradient(dense, y)


def jittered_cholesky(K: np.ndarray, max_relative_jitter: float = 1e-6) -> np.ndarray:
    """Cholesky of a PSD covariance, escalating jitter 1e-10 → 1e-6 × mean diagonal."""
    scale = float(np.mean(np.diag(K)))
    jitter = 1e-10
    while jitter <= max_relative_jitter * (1 + 1e-12):
        try:
            return cholesky(K + jitter * scale * np.eye(K.shape[0]), lower=True)
        except LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefinite("prior covariance not factorisable within the jitter ladder")


def exact_prior_sample(K: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """L_K w with w standard normal; ``size`` draws as columns if given."""
    L = jittered_cholesky(K)
    w = rng.standard_normal(K.shape[0] if size is None else (K.shape[0], size))
    return L @ w


class ExactPrior:
    """Exact joint prior samples on a registered, finite point set.

    The standard-normal base draws are fixed at construction; the samples
    follow the hyperparameters through the Cholesky factor of K(θ). Evaluation
    is only possible at registered points.
    """

    def __init__(self, points, num_samples: int, seed: int, stream: int = 0, cap: int = DEFAULT_CAP):
        points = np.unique(np.atleast_2d(np.asarray(points, dtype=float)), axis=0)
        if points.shape[0] > cap:
            raise ValueError(f"{points.shape[0]} registered points exceed the cap of {cap}")
        self.points = points
        self._lookup = {row.tobytes(): i for i, row in enumerate(points)}
        self.draws = make_rng(seed, 3, stream).standard_normal((points.shape[0], num_samples))
        self._cached = None

    @property
    def num_samples(self) -> int:
        return self.draws.shape[1]

    def _values(self, hp):
        if self._cached is None or not np.array_equal(self._cached[0], hp.raw):
            K = cross_kernel(self.points, self.points, hp)
            self._cached = (hp.raw.copy(), jittered_cholesky(K) @ self.draws)
        return self._cached[1]

    def evaluate(self, hp: Hyperparameters, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        try:
            idx = [self._lookup[np.ascontiguousarray(row).tobytes()] for row in points]
        except KeyError:
            raise ValueError("ExactPrior can only be evaluated at registered points") from None
        return self._values(hp)[idx]


def exact_posterior(inputs, y, hp: Hyperparameters, points):
    """Posterior mean and covariance of f at ``points``."""
    dense = DenseProblem.from_operator(KernelOperator(inputs, hp))
    Kpx = cross_kernel(points, inputs, hp)
    mean = Kpx @ dense.solve(y)
    cov = cross_kernel(points, points, hp) - Kpx @ dense.solve(Kpx.T)
    return mean, cov


def exact_predictive_llh(inputs, y, hp: Hyperparameters, points, targets) -> float:
    """Mean Gaussian log-density of test targets under the exact marginal predictive."""
    mean, cov = exact_posterior(inputs, y, hp, points)
    var = np.diag(cov) + hp.noise_scale**2
    return float(np.mean(-0.5 * (LOG_2PI + np.log(var) + (targets - mean) ** 2 / var)))


def exact_optimise(inputs, y, hp: Hyperparameters, steps: int, learning_rate: float, cap: int = DEFAULT_CAP):
    """Adam ascent on the exact marginal likelihood; returns (final, trajectory).

    The trajectory lists the hyperparameters at which each step's gradient was
    taken, matching the iterative trace.
    """
    from .optim import Adam

    adam = Adam(learning_rate)
    raw = hp.raw.copy()
    trajectory = []
    for _ in range(steps):
        current = Hyperparameters(raw)
        trajectory.append(current)
        _, grad = mll_and_gradient(inputs, y, current, cap=cap)
        raw = adam.step(raw, -grad * current.chain_factor())
    return Hyperparameters(raw), trajectory
