import numpy as np
import pytest

from latticegp.kernels import StationaryKernelSpec
from latticegp import oracle


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_spec(family="rbf", d=3, ell=1.0, outputscale=1.0, noise=0.1):
    ls = np.full(d, ell) if np.isscalar(ell) else np.asarray(ell, dtype=float)
    return StationaryKernelSpec(family, ls, outputscale, noise)


def gp_sample(X, spec, seed=0):
    """Draw targets from the GP prior (plus noise) at the given inputs."""
    rng = np.random.default_rng(seed)
    K = oracle.dense_kernel_matrix(X, spec, shifted=True)
    return np.linalg.cholesky(K) @ rng.standard_normal(X.shape[0])


def cosine(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
