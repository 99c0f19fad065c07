"""Random Fourier feature prior samples for the Matérn-3/2 kernel.

Frequencies are drawn once from the lengthscale-free spectral measure (a
multivariate Student-t with 3 degrees of freedom) and divided by the current
lengthscales at evaluation time. A prior sample therefore keeps its identity
while the hyperparameters move, which is what warm-started solves need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import Hyperparameters
from .rng import make_rng

DEFAULT_PAIRS = 1000


@dataclass(frozen=True)
class RFFBasis:
    base_frequencies: np.ndarray  # (m_pairs, d)
    weights: np.ndarray  # (2 * m_pairs, num_samples)
    seed: int

    @property
    def m_pairs(self) -> int:
        return self.base_frequencies.shape[0]

    @property
    def d(self) -> int:
        return self.base_frequencies.shape[1]

    @property
    def num_samples(self) -> int:
        return self.weights.shape[1]


def build_rff_basis(
    d: int, m_pairs: int = DEFAULT_PAIRS, seed: int = 0, num_samples: int = 1, stream: int = 0
) -> RFFBasis:
    if m_pairs < 1:
        raise ValueError("m_pairs must be at least 1")
    if d < 1 or num_samples < 1:
        raise ValueError("d and num_samples must be positive")
    rng = make_rng(seed, 0, stream)
    gauss = rng.standard_normal((m_pairs, d))
    chi2 = rng.chisquare(3.0, size=m_pairs)
    freqs = gauss / np.sqrt(chi2 / 3.0)[:, None]
    weights = make_rng(seed, 1, stream).standard_normal((2 * m_pairs, num_samples))
    freqs.setflags(write=False)
    weights.setflags(write=False)
    return RFFBasis(freqs, weights, int(seed))


def feature_map(basis: RFFBasis, hp: Hyperparameters, points) -> np.ndarray:
    """φ(points), shape (p, 2 m_pairs), with φ(x)·φ(x') ≈ k(x, x')."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != basis.d or hp.d != basis.d:
        raise ValueError(f"dimension mismatch: basis has d={basis.d}")
    proj = points @ (basis.base_frequencies / hp.lengthscales).T
    scale = hp.signal_scale / np.sqrt(basis.m_pairs)
    return scale * np.concatenate([np.cos(proj), np.sin(proj)], axis=1)


def evaluate_prior(basis: RFFBasis, hp: Hyperparameters, points, j=None) -> np.ndarray:
    """Prior sample ``j`` at ``points``; all samples as columns when ``j`` is None."""
    phi = feature_map(basis, hp, points)
    if j is None:
        return phi @ basis.weights
    if not 0 <= j < basis.num_samples:
        raise IndexError(f"sample index {j} out of range")
    return phi @ basis.weights[:, j]


class RFFPrior:
    """Prior function samples backed by a fixed RFF basis."""

    def __init__(self, basis: RFFBasis):
        self.basis = basis

    @property
    def num_samples(self) -> int:
        return self.basis.num_samples

    def evaluate(self, hp: Hyperparameters, points) -> np.ndarray:
        return evaluate_prior(self.basis, hp, points)


@dataclass(frozen=True)
class PathwiseTargets:
    xi: np.ndarray  # (n, s)
    noise_draws: np.ndarray  # (n, s), standard normal, fixed
    prior_values: np.ndarray  # f_j(x), (n, s)


def draw_noise(n: int, s: int, seed: int, stream: int = 0) -> np.ndarray:
    return make_rng(seed, 2, stream).standard_normal((n, s))


def pathwise_targets(prior, hp: Hyperparameters, inputs, noise_draws) -> PathwiseTargets:
    """ξ_j = f_j(x) + σ w_j, with the noise reparameterised through fixed w_j."""
    f = prior.evaluate(hp, inputs)
    if f.shape != noise_draws.shape:
        raise ValueError("prior samples and noise draws must have the same shape")
    return PathwiseTargets(f + hp.noise_scale * noise_draws, noise_draws, f)
