import numpy as np
import pytest

from itergp.exact import jittered_cholesky
from itergp.kernels import Hyperparameters, cross_kernel


def gp_problem(n, d, seed, lengthscales=None, signal=1.0, noise=0.3):
    """Inputs and targets drawn from the Matérn-3/2 GP prior plus noise."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2.0, 2.0, size=(n, d))
    ls = np.full(d, 0.8) if lengthscales is None else np.asarray(lengthscales, float)
    hp = Hyperparameters.from_constrained(ls, signal, noise)
    K = cross_kernel(X, X, hp)
    f = jittered_cholesky(K) @ rng.standard_normal(n)
    y = f + noise * rng.standard_normal(n)
    return X, y, hp


@pytest.fixture
def small_problem():
    return gp_problem(40, 2, 0, lengthscales=[0.7, 1.4], signal=1.2, noise=0.4)
