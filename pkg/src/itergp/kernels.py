"""Matérn-3/2 kernel and matrix-free access to the regularised kernel matrix.

The regularised kernel matrix is ``H = K + noise_scale**2 * I``. Everything
here works on row tiles so that at most ``block_size * n`` kernel entries
are alive at once, unless a dense copy is explicitly requested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

SQRT3 = np.sqrt(3.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class Hyperparameters:
    """Unconstrained hyperparameter vector with positive views.

    ``raw`` has length ``d + 2``: ``d`` lengthscales, then the signal scale,
    then the noise scale. Each constrained value is ``softplus(raw_k)``.
    """

    raw: np.ndarray

    def __post_init__(self):
        raw = np.array(self.raw, dtype=float).reshape(-1)
        if raw.size < 3:
            raise ValueError("need at least one lengthscale plus signal and noise scales")
        if not np.all(np.isfinite(raw)):
            raise ValueError("raw hyperparameters must be finite")
        raw.setflags(write=False)
        object.__setattr__(self, "raw", raw)

    @classmethod
    def from_constrained(cls, lengthscales, signal_scale, noise_scale):
        values = np.concatenate(
            [np.atleast_1d(np.asarray(lengthscales, dtype=float)), [signal_scale, noise_scale]]
        )
        if np.any(values <= 0):
            raise ValueError("constrained hyperparameters must be positive")
        return cls(softplus_inverse(values))

    @classmethod
    def initial(cls, d: int, value: float = 1.0):
        return cls.from_constrained(np.full(d, value), value, value)

    @classmethod
    def from_vector(cls, constrained):
        constrained = np.asarray(constrained, dtype=float)
        return cls.from_constrained(constrained[:-2], constrained[-2], constrained[-1])

    @property
    def d(self) -> int:
        return self.raw.size - 2

    @property
    def size(self) -> int:
        return self.raw.size

    @property
    def signal_index(self) -> int:
        return self.raw.size - 2

    @property
    def noise_index(self) -> int:
        return self.raw.size - 1

    @property
    def constrained(self) -> np.ndarray:
        return softplus(self.raw)

    @property
    def lengthscales(self) -> np.ndarray:
        return softplus(self.raw[:-2])

    @property
    def signal_scale(self) -> float:
        return float(softplus(self.raw[-2]))

    @property
    def noise_scale(self) -> float:
        return float(softplus(self.raw[-1]))

    def chain_factor(self) -> np.ndarray:
        """d(constrained)/d(raw), elementwise."""
        return expit(self.raw)

    def names(self) -> list[str]:
        return [f"lengthscale_{i}" for i in range(self.d)] + ["signal_scale", "noise_scale"]


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")


def matern32(x, x2, hp: Hyperparameters) -> float:
    """Scalar Matérn-3/2 covariance between two points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    _check_finite(x, "x")
    _check_finite(x2, "x2")
    if x.shape != (hp.d,) or x2.shape != (hp.d,):
        raise ValueError(f"points must have dimension {hp.d}")
    r = np.sqrt(np.sum(((x - x2) / hp.lengthscales) ** 2))
    s2 = hp.signal_scale**2
    return float(s2 * (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r))


def scaled_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between rows of two pre-scaled point sets.

    Accumulates per dimension in a fixed order so that entry (i, j) is
    bitwise equal to entry (j, i) of the transposed call.
    """
    out = np.zeros((a.shape[0], b.shape[0]))
    diff = np.empty_like(out)
    for i in range(a.shape[1]):
        np.subtract(a[:, i, None], b[None, :, i], out=diff)
        np.multiply(diff, diff, out=diff)
        out += diff
    return out


def matern32_from_sqdist(sq: np.ndarray, signal_scale: float) -> np.ndarray:
    r = np.sqrt(sq)
    return signal_scale**2 * (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)


def cross_kernel(points, inputs, hp: Hyperparameters) -> np.ndarray:
    """k(points, inputs) without the noise term."""
    ls = hp.lengthscales
    sq = scaled_sqdist(np.asarray(points, float) / ls, np.asarray(inputs, float) / ls)
    return matern32_from_sqdist(sq, hp.signal_scale)


def _rowwise_matmul(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    # identical (1 x n) @ (n x m) call per row: result independent of tile height
    return np.matmul(a[:, None, :], v)[:, 0, :]


def _as_index(idx, n):
    if isinstance(idx, slice):
        return np.arange(n)[idx]
    return np.asarray(idx, dtype=np.intp).reshape(-1)


class KernelOperator:
    """Matrix-free handle on ``H = K + sigma^2 I`` for fixed data and hyperparameters.

    Parameters
    ----------
    inputs : (n, d) array
        Training inputs.
    hp : Hyperparameters
    block_size : int
        Number of rows per kernel tile.
    cache : bool
        Materialise the dense matrix on first use and reuse it for all
        products. Only sensible for small ``n``.
    """

    def __init__(self, inputs, hp: Hyperparameters, block_size: int = 1024, cache: bool = False):
        inputs = np.asarray(inputs, dtype=float)
        if inputs.ndim != 2:
            raise ValueError("inputs must be an (n, d) array")
        _check_finite(inputs, "inputs")
        if inputs.shape[1] != hp.d:
            raise ValueError(f"inputs have {inputs.shape[1]} columns, hyperparameters expect {hp.d}")
        if block_size < 1:
            raise ValueError("block_size must be positive")
        self.inputs = inputs
        self.hp = hp
        self.block_size = int(block_size)
        self.cache = bool(cache)
        self._scaled = inputs / hp.lengthscales
        self._dense = None
        self._sqdist = None

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_params(self) -> int:
        return self.hp.size

    @property
    def noise_variance(self) -> float:
        return self.hp.noise_scale**2

    def _tiles(self):
        for start in range(0, self.n, self.block_size):
            yield slice(start, min(start + self.block_size, self.n))

    def kernel_rows(self, rows) -> np.ndarray:
        """K[rows, :] without the noise term."""
        idx = _as_index(rows, self.n)
        sq = self._tile_sqdist(idx) if self.cache else scaled_sqdist(self._scaled[idx], self._scaled)
        return matern32_from_sqdist(sq, self.hp.signal_scale)

    def rows(self, rows) -> np.ndarray:
        """H[rows, :]."""
        idx = _as_index(rows, self.n)
        if self.cache:
            return self.dense()[idx]
        out = self.kernel_rows(idx)
        out[np.arange(idx.size), idx] += self.noise_variance
        return out

    def columns(self, cols) -> np.ndarray:
        """H[:, cols]; equal to ``rows(cols).T`` because H is symmetric."""
        if self.cache:
            return self.dense()[:, _as_index(cols, self.n)]
        return self.rows(cols).T

    def block(self, rows, cols) -> np.ndarray:
        ridx = _as_index(rows, self.n)
        cidx = _as_index(cols, self.n)
        if self.cache:
            return self.dense()[np.ix_(ridx, cidx)]
        sq = scaled_sqdist(self._scaled[ridx], self._scaled[cidx])
        out = matern32_from_sqdist(sq, self.hp.signal_scale)
        out[ridx[:, None] == cidx[None, :]] += self.noise_variance
        return out

    def diagonal(self) -> np.ndarray:
        return np.full(self.n, self.hp.signal_scale**2 + self.noise_variance)

    def dense(self) -> np.ndarray:
        """Assemble H tile by tile."""
        if self._dense is not None:
            return self._dense
        if self.cache:
            self._sqdist = scaled_sqdist(self._scaled, self._scaled)
            out = matern32_from_sqdist(self._sqdist, self.hp.signal_scale)
        else:
            out = np.empty((self.n, self.n))
            for tile in self._tiles():
                out[tile] = self.kernel_rows(tile)
        out[np.diag_indices(self.n)] += self.noise_variance
        if self.cache:
            self._dense = out
        return out

    def _tile_sqdist(self, tile):
        if self.cache:
            if self._sqdist is None:
                self.dense()
            return self._sqdist[tile]
        return scaled_sqdist(self._scaled[tile], self._scaled)

    def matvec(self, V: np.ndarray) -> np.ndarray:
        """Return H @ V for an (n,) or (n, m) array."""
        V = np.asarray(V, dtype=float)
        vec = V.ndim == 1
        V2 = V[:, None] if vec else V
        if V2.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got {V2.shape[0]}")
        if self.cache:
            out = self.dense() @ V2
        else:
            out = np.empty_like(V2)
            for tile in self._tiles():
                out[tile] = _rowwise_matmul(self.kernel_rows(tile), V2) + self.noise_variance * V2[tile]
        return out[:, 0] if vec else out

    def _derivative_tile(self, tile, k):
        """dH/dθ_k restricted to rows ``tile`` (constrained parameterisation, k not noise)."""
        hp = self.hp
        r = np.sqrt(self._tile_sqdist(tile))
        e = np.exp(-SQRT3 * r)
        if k == hp.signal_index:
            return 2.0 * hp.signal_scale * (1.0 + SQRT3 * r) * e
        diff = self._scaled[tile, k, None] - self._scaled[None, :, k]
        # d/dℓ of s²(1+√3r)e^{-√3r} is 3 s² e^{-√3r} (Δ/ℓ)² / ℓ, which is 0 at r = 0
        return (3.0 * hp.signal_scale**2 / hp.lengthscales[k]) * e * (diff * diff)

    def deriv_matvec(self, k: int, V: np.ndarray) -> np.ndarray:
        """Return (dH/dθ_k) @ V with θ_k the constrained parameter."""
        if not 0 <= k < self.num_params:
            raise IndexError(f"hyperparameter index {k} out of range [0, {self.num_params})")
        V = np.asarray(V, dtype=float)
        vec = V.ndim == 1
        V2 = V[:, None] if vec else V
        if V2.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got {V2.shape[0]}")
        if k == self.hp.noise_index:
            out = 2.0 * self.hp.noise_scale * V2
        else:
            out = np.empty_like(V2)
            for tile in self._tiles():
                out[tile] = _rowwise_matmul(self._derivative_tile(tile, k), V2)
        return out[:, 0] if vec else out

    def dense_derivatives(self) -> np.ndarray:
        """Stack of dense dH/dθ_k, shape (d_θ, n, n)."""
        out = np.zeros((self.num_params, self.n, self.n))
        for k in range(self.num_params - 1):
            for tile in self._tiles():
                out[k, tile] = self._derivative_tile(tile, k)
        out[-1][np.diag_indices(self.n)] = 2.0 * self.hp.noise_scale
        return out

    def contract_derivatives(self, pairs) -> np.ndarray:
        """Compute Σ_j a_jᵀ (dH/dθ_k) b_j for every k and every (A, B) pair.

        One sweep over kernel tiles serves all pairs and all parameters.

        Parameters
        ----------
        pairs : sequence of (A, B)
            Each an (n,) or (n, m) array pair with matching shapes.

        Returns
        -------
        (len(pairs), d_θ) array
        """
        pairs = [
            (np.atleast_2d(np.asarray(a, float).T).T, np.atleast_2d(np.asarray(b, float).T).T)
            for a, b in pairs
        ]
        for a, b in pairs:
            if a.shape != b.shape or a.shape[0] != self.n:
                raise ValueError("pair shapes must match and have n rows")
        out = self._contract(lambda tile: [a[tile] @ b.T for a, b in pairs], len(pairs))
        for p, (a, b) in enumerate(pairs):
            out[p, self.hp.noise_index] = 2.0 * self.hp.noise_scale * np.sum(a * b)
        return out

    def contract_matrix(self, W: np.ndarray) -> np.ndarray:
        """Σ_ab (dH/dθ_k)_ab W_ab for every k, given a dense (n, n) weight matrix."""
        W = np.asarray(W, dtype=float)
        if W.shape != (self.n, self.n):
            raise ValueError("W must be (n, n)")
        out = self._contract(lambda tile: [W[tile]], 1)[0]
        out[self.hp.noise_index] = 2.0 * self.hp.noise_scale * np.trace(W)
        return out

    def _contract(self, weights_for, count):
        # Lengthscale terms use Σ_ab (x_a − x_b)² M_ab = Σ_a x_a² rowsum_a + Σ_b x_b² colsum_b − 2 Σ_a x_a (M x)_a
        # per dimension, so a tile costs one (tile × n)(n × d) product instead of d elementwise passes.
        hp = self.hp
        X = self._scaled - self._scaled.mean(axis=0)  # centring keeps the expansion well conditioned
        X2 = X * X
        ls_factor = 3.0 * hp.signal_scale**2 / hp.lengthscales
        out = np.zeros((count, self.num_params))
        for tile in self._tiles():
            r = np.sqrt(self._tile_sqdist(tile))
            e = np.exp(-SQRT3 * r)
            poly = 1.0 + SQRT3 * r
            for p, w in enumerate(weights_for(tile)):
                m = e * w
                out[p, hp.signal_index] += 2.0 * hp.signal_scale * np.sum(poly * m)
                quad = X2[tile].T @ m.sum(axis=1) + X2.T @ m.sum(axis=0) - 2.0 * np.sum(X[tile] * (m @ X), axis=0)
                out[p, : hp.d] += ls_factor * quad
        return out


class DenseOperator:
    """Explicit SPD matrix with the same access surface as KernelOperator.

    Used for solver tests on arbitrary SPD systems.
    """

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("matrix must be square")
        self.matrix = matrix

    @property
    def n(self):
        return self.matrix.shape[0]

    def matvec(self, V):
        return self.matrix @ V

    def rows(self, rows):
        return self.matrix[_as_index(rows, self.n)]

    def columns(self, cols):
        return self.matrix[:, _as_index(cols, self.n)]

    def block(self, rows, cols):
        return self.matrix[np.ix_(_as_index(rows, self.n), _as_index(cols, self.n))]

    def diagonal(self):
        return np.diag(self.matrix).copy()

    def dense(self):
        return self.matrix


class PivotedCholeskyPreconditioner:
    """Apply (L Lᵀ + σ² I)⁻¹ via the Woodbury identity.

    ``L`` is an (n, rank) greedy diagonal-pivoted partial Cholesky factor of K.
    """

    def __init__(self, factor: np.ndarray, noise_variance: float, pivots=()):
        self.factor = factor
        self.noise_variance = float(noise_variance)
        self.pivots = list(pivots)
        self.rank = factor.shape[1]
        if self.rank:
            inner = noise_variance * np.eye(self.rank) + factor.T @ factor
            self._inner_chol = np.linalg.cholesky(inner)

    def __call__(self, R: np.ndarray) -> np.ndarray:
        if self.rank == 0:
            return R / self.noise_variance
        from scipy.linalg import cho_solve

        LtR = self.factor.T @ R
        corr = self.factor @ cho_solve((self._inner_chol, True), LtR)
        return (R - corr) / self.noise_variance


def pivoted_cholesky(op: KernelOperator, rank: int) -> PivotedCholeskyPreconditioner:
    """Greedy partial Cholesky of K with diagonal pivoting.

    Stops early, at the achieved rank, when the largest remaining diagonal
    entry is no longer positive.
    """
    n = op.n
    if not 0 <= rank <= n:
        raise ValueError(f"rank must lie in [0, {n}]")
    residual_diag = np.full(n, op.hp.signal_scale**2)
    L = np.zeros((n, rank))
    pivots = []
    for m in range(rank):
        p = int(np.argmax(residual_diag))
        pivot = residual_diag[p]
        if pivot <= 0.0:
            break
        row = op.kernel_rows([p])[0] - L[:, :m] @ L[p, :m]
        col = row / np.sqrt(pivot)
        L[:, m] = col
        residual_diag = residual_diag - col * col
        residual_diag[p] = 0.0
        pivots.append(p)
    L = L[:, : len(pivots)]
    return PivotedCholeskyPreconditioner(L, op.noise_variance, pivots)
