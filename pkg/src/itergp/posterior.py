"""Predictions from solved systems.

The mean needs ``v_y = H⁻¹ y``. Posterior samples come from pathwise
conditioning, ``f_j(·) + k(·, x)(v_y − ẑ_j)``, where ``f_j`` is a prior
sample and ``ẑ_j = H⁻¹(f_j(x) + σ w_j)``; no further solves are needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import Hyperparameters, cross_kernel

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PosteriorHandle:
    inputs: np.ndarray
    hp: Hyperparameters
    v_y: np.ndarray
    prior: object = None  # exposes evaluate(hp, points) -> (p, s)
    zhat: np.ndarray | None = None  # (n, s)
    block_size: int = 1024

    @property
    def num_samples(self) -> int:
        return 0 if self.zhat is None else self.zhat.shape[1]

    def _cross_apply(self, points, W):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.inputs.shape[1]:
            raise ValueError(f"points must have {self.inputs.shape[1]} columns")
        out = np.empty((points.shape[0],) + W.shape[1:])
        for s in range(0, points.shape[0], self.block_size):
            tile = slice(s, s + self.block_size)
            out[tile] = cross_kernel(points[tile], self.inputs, self.hp) @ W
        return out


def predict_mean(h: PosteriorHandle, points) -> np.ndarray:
    return h._cross_apply(points, h.v_y)


def sample_posterior(h: PosteriorHandle, j: int, points) -> np.ndarray:
    if h.zhat is None or h.prior is None:
        raise ValueError("handle carries no pathwise samples")
    if not 0 <= j < h.num_samples:
        raise IndexError(f"sample index {j} out of range [0, {h.num_samples})")
    return posterior_samples(h, points)[:, j]


def posterior_samples(h: PosteriorHandle, points) -> np.ndarray:
    """All posterior samples at ``points``, shape (p, s)."""
    if h.zhat is None or h.prior is None:
        raise ValueError("handle carries no pathwise samples")
    prior = h.prior.evaluate(h.hp, points)
    return prior + h._cross_apply(points, h.v_y[:, None] - h.zhat)


@dataclass
class TestMetrics:
    rmse: float
    llh: float | None
    rmse_raw: float
    llh_raw: float | None


def gaussian_llh(targets, mean, var) -> float:
    return float(np.mean(-0.5 * (LOG_2PI + np.log(var) + (targets - mean) ** 2 / var)))


def test_metrics(h: PosteriorHandle, points, targets, target_scale: float = 1.0) -> TestMetrics:
    """RMSE and mean predictive log-likelihood on standardised and raw scales.

    The predictive variance is the unbiased sample variance of the posterior
    samples plus σ². With fewer than two samples only the RMSE is returned.
    """
    targets = np.asarray(targets, dtype=float)
    mean = predict_mean(h, points)
    rmse = float(np.sqrt(np.mean((targets - mean) ** 2)))
    llh = llh_raw = None
    if h.num_samples >= 2:
        var = np.var(posterior_samples(h, points), axis=1, ddof=1) + h.hp.noise_scale**2
        llh = gaussian_llh(targets, mean, var)
        llh_raw = llh - float(np.log(target_scale))
    return TestMetrics(rmse, llh, rmse * target_scale, llh_raw)


test_metrics.__test__ = False  # keep pytest from collecting the name
TestMetrics.__test__ = False
