import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from itergp.kernels import (
    DenseOperator,
    Hyperparameters,
    KernelOperator,
    cross_kernel,
    matern32,
    pivoted_cholesky,
    softplus,
    softplus_inverse,
)

from conftest import gp_problem


@given(st.floats(-30, 30))
def test_softplus_round_trip(v):
    assert abs(float(softplus_inverse(softplus(v))) - v) <= 1e-10


@given(arrays(float, 5, elements=st.floats(-30, 30)))
def test_constrained_views_positive(raw):
    hp = Hyperparameters(raw)
    assert np.all(np.isfinite(hp.constrained)) and np.all(hp.constrained > 0)
    assert hp.size == hp.d + 2 == 5


def test_hyperparameter_layout():
    hp = Hyperparameters.from_constrained([0.5, 2.0], 1.5, 0.1)
    np.testing.assert_allclose(hp.lengthscales, [0.5, 2.0])
    assert hp.signal_scale == pytest.approx(1.5)
    assert hp.noise_scale == pytest.approx(0.1)
    assert hp.names() == ["lengthscale_0", "lengthscale_1", "signal_scale", "noise_scale"]
    np.testing.assert_allclose(Hyperparameters.initial(3).constrained, 1.0, rtol=1e-15)


def test_hyperparameters_reject_bad_values():
    with pytest.raises(ValueError):
        Hyperparameters(np.array([0.0, np.nan, 1.0]))
    with pytest.raises(ValueError):
        Hyperparameters.from_constrained([1.0], -1.0, 0.1)


def test_matern_zero_distance():
    hp = Hyperparameters.from_constrained([0.3, 2.0], 1.7, 0.1)
    x = np.array([0.2, -1.0])
    assert matern32(x, x, hp) == pytest.approx(1.7**2, rel=1e-14)


def test_matern_unit_distance():
    # (1 + √3) e^{-√3} evaluated with mpmath at 30 digits
    hp = Hyperparameters.from_constrained([1.0], 1.0, 0.1)
    assert matern32(np.array([0.0]), np.array([1.0]), hp) == pytest.approx(0.48335772459650765, rel=1e-14)
    assert (1 + math.sqrt(3)) * math.exp(-math.sqrt(3)) == pytest.approx(0.48335772459650765, rel=1e-15)


@given(arrays(float, 3, elements=st.floats(-5, 5)), arrays(float, 3, elements=st.floats(-5, 5)))
def test_matern_symmetric(a, b):
    hp = Hyperparameters.from_constrained([0.5, 1.0, 3.0], 0.9, 0.1)
    assert matern32(a, b, hp) == matern32(b, a, hp)


def test_matern_validation():
    hp = Hyperparameters.initial(2)
    with pytest.raises(ValueError):
        matern32(np.array([np.inf, 0.0]), np.zeros(2), hp)
    with pytest.raises(ValueError):
        matern32(np.zeros(3), np.zeros(3), hp)


def test_dense_matches_scalar_kernel_on_toy_data():
    X = np.array([[0.0, 0.1], [1.0, -0.5], [0.3, 2.0]])
    hp = Hyperparameters.from_constrained([0.7, 1.3], 1.1, 0.2)
    op = KernelOperator(X, hp, block_size=1)
    direct = np.array([[matern32(a, b, hp) for b in X] for a in X]) + 0.04 * np.eye(3)
    assembled = op.matvec(np.eye(3))
    np.testing.assert_allclose(assembled, direct, rtol=0, atol=1e-12)
    np.testing.assert_allclose(op.dense(), direct, rtol=0, atol=1e-12)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        np.testing.assert_array_equal(op.matvec(e), assembled[:, i])


def test_matvec_zero():
    X, _, hp = gp_problem(30, 2, 1)
    np.testing.assert_array_equal(KernelOperator(X, hp).matvec(np.zeros((30, 3))), 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_matvec_bitwise_tile_invariant(block, seed):
    X, _, hp = gp_problem(57, 3, 2)
    V = np.random.default_rng(seed).standard_normal((57, 4))
    ref = KernelOperator(X, hp, block_size=57).matvec(V)
    np.testing.assert_array_equal(KernelOperator(X, hp, block_size=block).matvec(V), ref)


def test_dense_equals_tiled_identity():
    X, _, hp = gp_problem(70, 2, 3)
    op = KernelOperator(X, hp, block_size=16)
    np.testing.assert_allclose(op.matvec(np.eye(70)), op.dense(), rtol=0, atol=1e-12)


def test_cached_operator_agrees():
    X, _, hp = gp_problem(80, 3, 4)
    V = np.random.default_rng(0).standard_normal((80, 5))
    plain = KernelOperator(X, hp, block_size=32)
    cached = KernelOperator(X, hp, cache=True)
    np.testing.assert_allclose(cached.matvec(V), plain.matvec(V), rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(cached.rows([3, 7]), plain.rows([3, 7]))
    np.testing.assert_array_equal(cached.kernel_rows([5]), plain.kernel_rows([5]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_operator_symmetric_and_positive(seed):
    X, _, hp = gp_problem(25, 2, 5)
    op = KernelOperator(X, hp, block_size=7)
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal(25), rng.standard_normal(25)
    a, b = u @ op.matvec(v), op.matvec(u) @ v
    assert abs(a - b) <= 1e-8 * max(abs(a), 1.0)
    assert v @ op.matvec(v) >= hp.noise_scale**2 * (v @ v) * (1 - 1e-12)


def test_block_access_consistent():
    X, _, hp = gp_problem(30, 2, 6)
    op = KernelOperator(X, hp)
    H = op.dense()
    rows, cols = [1, 4, 9], slice(3, 12)
    np.testing.assert_allclose(op.rows(rows), H[rows], atol=1e-15)
    np.testing.assert_allclose(op.columns(cols), H[:, cols], atol=1e-15)
    np.testing.assert_allclose(op.block(rows, cols), H[np.ix_(rows, range(3, 12))], atol=1e-15)
    np.testing.assert_allclose(op.diagonal(), np.diag(H), atol=1e-15)


def test_matvec_dimension_mismatch():
    X, _, hp = gp_problem(10, 2, 7)
    with pytest.raises(ValueError):
        KernelOperator(X, hp).matvec(np.ones(9))
    with pytest.raises(ValueError):
        KernelOperator(X[:, :1], hp)


def _perturbed(hp, k, eps):
    c = hp.constrained.copy()
    c[k] += eps
    return Hyperparameters.from_vector(c)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_derivatives_match_central_differences(seed):
    X, _, hp = gp_problem(50, 3, seed, lengthscales=[0.6, 1.0, 1.7], signal=1.3, noise=0.5)
    op = KernelOperator(X, hp, block_size=13)
    V = np.random.default_rng(seed).standard_normal((50, 2))
    eps = 1e-5
    for k in range(hp.size):
        fd = (KernelOperator(X, _perturbed(hp, k, eps)).matvec(V) - KernelOperator(X, _perturbed(hp, k, -eps)).matvec(V)) / (2 * eps)
        got = op.deriv_matvec(k, V)
        assert np.linalg.norm(got - fd) <= 1e-5 * np.linalg.norm(fd)


def test_noise_derivative_exact():
    X, _, hp = gp_problem(20, 2, 8)
    V = np.random.default_rng(1).standard_normal((20, 3))
    op = KernelOperator(X, hp)
    np.testing.assert_array_equal(op.deriv_matvec(hp.noise_index, V), 2.0 * hp.noise_scale * V)
    np.testing.assert_array_equal(op.deriv_matvec(0, np.zeros((20, 2))), 0.0)
    with pytest.raises(IndexError):
        op.deriv_matvec(hp.size, V)


def test_lengthscale_derivative_zero_on_diagonal():
    X, _, hp = gp_problem(15, 2, 9)
    D = KernelOperator(X, hp).dense_derivatives()
    for k in range(hp.d):
        np.testing.assert_array_equal(np.diag(D[k]), 0.0)


@pytest.mark.parametrize("cache", [False, True])
def test_fused_contraction_matches_dense_stack(cache):
    X, _, hp = gp_problem(45, 3, 10)
    op = KernelOperator(X, hp, block_size=11, cache=cache)
    rng = np.random.default_rng(3)
    A, B = rng.standard_normal((45, 6)), rng.standard_normal((45, 6))
    a = rng.standard_normal(45)
    D = op.dense_derivatives()
    got = op.contract_derivatives([(a, a), (A, B)])
    np.testing.assert_allclose(got[0], np.einsum("i,kij,j->k", a, D, a), rtol=1e-11)
    np.testing.assert_allclose(got[1], np.einsum("ia,kij,ja->k", A, D, B), rtol=1e-11)
    W = rng.standard_normal((45, 45))
    np.testing.assert_allclose(op.contract_matrix(W), np.einsum("ij,kij->k", W, D), rtol=1e-11)


def test_contraction_symmetry_identity():
    # zᵀ H⁻¹ dH z computed either way round agrees for symmetric H
    X, _, hp = gp_problem(30, 2, 11)
    op = KernelOperator(X, hp)
    z = np.random.default_rng(4).standard_normal(30)
    u = np.linalg.solve(op.dense(), z)
    left = op.contract_derivatives([(u, z)])[0]
    right = op.contract_derivatives([(z, u)])[0]
    np.testing.assert_allclose(left, right, rtol=1e-10)


def test_pivoted_cholesky_full_rank_is_exact():
    X, _, hp = gp_problem(20, 2, 12, noise=0.3)
    op = KernelOperator(X, hp)
    P = pivoted_cholesky(op, 20)
    b = np.random.default_rng(0).standard_normal((20, 3))
    np.testing.assert_allclose(P(b), np.linalg.solve(op.dense(), b), rtol=1e-8, atol=1e-8)


def test_pivoted_cholesky_rank_zero():
    X, _, hp = gp_problem(10, 2, 13, noise=0.5)
    P = pivoted_cholesky(KernelOperator(X, hp), 0)
    b = np.arange(10.0)
    np.testing.assert_allclose(P(b), b / 0.25)


def test_pivoted_cholesky_stops_on_exhausted_rank():
    X = np.zeros((6, 1))  # all points identical: K has rank one
    P = pivoted_cholesky(KernelOperator(X, Hyperparameters.from_constrained([1.0], 1.0, 0.1)), 4)
    assert P.rank == 1


def test_preconditioner_spd():
    X, _, hp = gp_problem(40, 2, 14)
    P = pivoted_cholesky(KernelOperator(X, hp), 10)
    M = P(np.eye(40))
    np.testing.assert_allclose(M, M.T, atol=1e-10)
    assert np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) > 0


def test_dense_operator_surface():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    op = DenseOperator(A)
    np.testing.assert_allclose(op.matvec(np.eye(2)), A)
    np.testing.assert_allclose(op.diagonal(), [2.0, 1.0])


def test_cross_kernel_far_points_vanish():
    hp = Hyperparameters.from_constrained([0.5], 1.0, 0.1)
    assert cross_kernel(np.array([[0.0]]), np.array([[50.0]]), hp)[0, 0] < 1e-70
