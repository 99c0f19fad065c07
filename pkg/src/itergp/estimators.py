"""Stochastic marginal-likelihood gradients from solved linear systems.

Both estimators return ``½ v_yᵀ dH v_y − ½ tr(H⁻¹ dH)`` with the trace
replaced by a probe average:

* standard: ``(1/s) Σ_j (H⁻¹ z_j)ᵀ dH z_j`` with ``E[z zᵀ] = I``;
* pathwise: ``(1/s) Σ_j ẑ_jᵀ dH ẑ_j`` with ``ẑ_j = H⁻¹ ξ_j`` and ``E[ξ ξᵀ] = H``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import make_rng

PROBE_KINDS = ("gaussian", "rademacher", "basis")


@dataclass(frozen=True)
class ProbeSet:
    kind: str
    targets: np.ndarray  # (n, s)
    seed: int


@dataclass(frozen=True)
class GradientEstimate:
    quadratic: np.ndarray  # v_yᵀ dH v_y per parameter
    trace: np.ndarray  # trace estimate per parameter

    @property
    def values(self) -> np.ndarray:
        return 0.5 * self.quadratic - 0.5 * self.trace


def gen_standard_probes(n: int, s: int, seed: int, kind: str = "gaussian", stream: int = 0) -> ProbeSet:
    """Probe vectors with identity second moment.

    ``kind="basis"`` returns the deterministic columns ``√n e_i`` (``s`` must
    equal ``n``), for which the trace estimate is exact.
    """
    if s < 1:
        raise ValueError("need at least one probe")
    if kind == "gaussian":
        Z = make_rng(seed, 4, stream).standard_normal((n, s))
    elif kind == "rademacher":
        Z = make_rng(seed, 4, stream).choice(np.array([-1.0, 1.0]), size=(n, s))
    elif kind == "basis":
        if s != n:
            raise ValueError("basis probes need s == n")
        Z = np.sqrt(n) * np.eye(n)
    else:
        raise ValueError(f"unknown probe kind {kind!r}")
    return ProbeSet(kind, Z, seed)


def _check(op, *arrays):
    for a in arrays:
        if a.shape[0] != op.n:
            raise ValueError(f"expected {op.n} rows, got {a.shape[0]}")


def estimate_gradient_standard(op, v_y, V, Z) -> GradientEstimate:
    """Hutchinson estimate from solutions ``V`` of ``H V = Z``."""
    v_y = np.asarray(v_y, dtype=float)
    V = np.atleast_2d(np.asarray(V, dtype=float).T).T
    Z = np.atleast_2d(np.asarray(Z, dtype=float).T).T
    _check(op, v_y, V, Z)
    if V.shape != Z.shape:
        raise ValueError("solutions and probes must have the same shape")
    quad, trace = op.contract_derivatives([(v_y, v_y), (V, Z)])
    return GradientEstimate(quad, trace / Z.shape[1])


def estimate_gradient_pathwise(op, v_y, Zhat) -> GradientEstimate:
    """Estimate from solutions ``Ẑ`` of ``H Ẑ = Ξ`` with pathwise targets."""
    v_y = np.asarray(v_y, dtype=float)
    Zhat = np.atleast_2d(np.asarray(Zhat, dtype=float).T).T
    _check(op, v_y, Zhat)
    quad, trace = op.contract_derivatives([(v_y, v_y), (Zhat, Zhat)])
    return GradientEstimate(quad, trace / Zhat.shape[1])


def initial_rkhs_distance(b, u) -> float:
    """Squared H-norm distance from a zero initialisation, bᵀH⁻¹b, given u = H⁻¹b."""
    return float(np.dot(b, u))
