"""Dense brute-force references: exact kernel MVMs, exact GP inference,
analytic gradients, and explicit reconstruction of the lattice operator.

Everything here is O(n^2) or worse and exists to pin down correctness of the
fast paths at desk scale; nothing in this module is performance-sensitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import lattice
from .kernels import StationaryKernelSpec
from .stencil import Stencil

JITTERS = (0.0, 1e-8, 1e-6, 1e-4)


class FactorizationError(RuntimeError):
    """Cholesky failed even after the jitter ladder."""


def _pairwise_sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    sq = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * (A @ B.T)
    )
    return np.maximum(sq, 0.0)


def dense_kernel_matrix(X: np.ndarray, spec: StationaryKernelSpec, shifted: bool = False) -> np.ndarray:
    """Materialize K_XX (optionally + sigma^2 I)."""
    Xn = spec.normalize(X)
    K = spec.outputscale * spec.profile.value(_pairwise_sq_dists(Xn, Xn))
    K = 0.5 * (K + K.T)
    if shifted:
        K[np.diag_indices_from(K)] += spec.noise_variance
    return K


def cross_kernel_matrix(X_star: np.ndarray, X: np.ndarray, spec: StationaryKernelSpec) -> np.ndarray:
    """Materialize K_{X*,X}."""
    A = spec.normalize(X_star)
    B = spec.normalize(X)
    return spec.outputscale * spec.profile.value(_pairwise_sq_dists(A, B))


def exact_mvm(X: np.ndarray, V: np.ndarray, spec: StationaryKernelSpec, block_size: int = 2048) -> np.ndarray:
    """K_XX @ V streamed over row blocks; no O(n^2) storage."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.asarray(V, dtype=float)
    squeeze = V.ndim == 1
    V2 = V[:, None] if squeeze else V
    n = X.shape[0]
    if V2.shape[0] != n:
        raise ValueError("value rows must match input rows")
    Xn = spec.normalize(X)
    prof = spec.profile
    out = np.empty((n, V2.shape[1]))
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        K_block = prof.value(_pairwise_sq_dists(Xn[start:stop], Xn))
        out[start:stop] = spec.outputscale * (K_block @ V2)
    return out[:, 0] if squeeze else out


def _chol_with_jitter(A: np.ndarray, scale: float):
    for jit in JITTERS:
        try:
            shifted = A if jit == 0.0 else A + (jit * scale) * np.eye(A.shape[0])
            return cho_factor(shifted, lower=True), jit
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError("kernel matrix is indefinite even after the jitter ladder")


@dataclass
class ExactGPResult:
    mean: np.ndarray
    variance: np.ndarray
    mll: float
    jitter: float


def exact_gp(X: np.ndarray, y: np.ndarray, X_star: np.ndarray, spec: StationaryKernelSpec) -> ExactGPResult:
    """Cholesky-based predictive mean/variance and marginal log-likelihood."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    n = X.shape[0]
    A = dense_kernel_matrix(X, spec, shifted=True)
    factor, jitter = _chol_with_jitter(A, max(spec.outputscale, spec.noise_variance))
    alpha = cho_solve(factor, y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    mll = -0.5 * float(y @ alpha) - 0.5 * logdet - 0.5 * n * math.log(2.0 * math.pi)
    K_star = cross_kernel_matrix(X_star, X, spec)
    mean = K_star @ alpha
    solve_star = cho_solve(factor, K_star.T)
    variance = spec.outputscale - np.einsum("ij,ji->i", K_star, solve_star)
    return ExactGPResult(mean=mean, variance=variance, mll=mll, jitter=jitter)


# ---------------------------------------------------------------------------
# explicit lattice reconstruction
# ---------------------------------------------------------------------------


def dense_lattice_reconstruction(plan: lattice.SplatPlan, stencil: Stencil):
    """Explicit W (n, m) and per-direction convolution matrices C_j (m, m).

    W (prod_j C_j) W^T reproduces the filter path over the same key set; the
    two code paths share only the plan, so agreement pins the sparse
    plumbing.
    """
    W = plan.interpolation_matrix().toarray()
    key_set = plan.key_set
    m = key_set.m
    r = stencil.order
    tables = lattice.neighbor_tables(key_set, r)
    cs = []
    rows = np.arange(m)
    for j in range(key_set.dim + 1):
        C = np.eye(m) * stencil.coefficients[r]
        t = 0
        for o in range(-r, r + 1):
            if o == 0:
                continue
            tgt = tables[j, t, :]
            present = tgt < m
            C[rows[present], tgt[present]] += stencil.coefficients[r + o]
            t += 1
        cs.append(C)
    return W, cs


def compose_blur(cs, symmetrize: bool = False) -> np.ndarray:
    """Product of the per-direction matrices in application order
    (ascending directions act first)."""
    asc = np.eye(cs[0].shape[0])
    for C in cs:
        asc = C @ asc
    if not symmetrize:
        return asc
    desc = np.eye(cs[0].shape[0])
    for C in reversed(cs):
        desc = C @ desc
    return 0.5 * (asc + desc)


def dense_operator(op) -> np.ndarray:
    """Materialize a LatticeOperator as an (n, n) matrix (train rows)."""
    W, cs = dense_lattice_reconstruction(op.train_plan, op.stencil)
    B = compose_blur(cs, symmetrize=op.symmetrize)
    return op.spec.outputscale * (W @ B @ W.T)


def dense_cross_operator(op) -> np.ndarray:
    """Materialize the test-by-train cross block W_* B W^T."""
    if op.test_plan is None:
        raise ValueError("operator was built without test inputs")
    W, cs = dense_lattice_reconstruction(op.train_plan, op.stencil)
    W_star = op.test_plan.interpolation_matrix().toarray()
    B = compose_blur(cs, symmetrize=op.symmetrize)
    return op.spec.outputscale * (W_star @ B @ W.T)


# ---------------------------------------------------------------------------
# analytic gradients
# ---------------------------------------------------------------------------


def exact_gradient(X: np.ndarray, V: np.ndarray, G: np.ndarray, spec: StationaryKernelSpec) -> np.ndarray:
    """Dense gradient of sum_c g_c^T (K v_c) with respect to the normalized
    inputs: 2 sum_j k'(d_ij^2) (x_i - x_j)(g_i v_j + g_j v_i) per row i."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.asarray(V, dtype=float)
    G = np.asarray(G, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    if G.ndim == 1:
        G = G[:, None]
    if V.shape != G.shape:
        raise ValueError("value and cotangent shapes must match")
    Xn = spec.normalize(X)
    Kp = spec.outputscale * spec.profile.derivative(_pairwise_sq_dists(Xn, Xn))
    grad = np.zeros_like(Xn)
    for t in range(V.shape[1]):
        v = V[:, t : t + 1]
        g = G[:, t : t + 1]
        kv = Kp @ v
        kg = Kp @ g
        kxv = Kp @ (Xn * v)
        kxg = Kp @ (Xn * g)
        grad += g * (Xn * kv - kxv) + v * (Xn * kg - kxg)
    return 2.0 * grad


def exact_mll_gradients(X: np.ndarray, y: np.ndarray, spec: StationaryKernelSpec):
    """Dense marginal log-likelihood and its gradient in the log-parameter
    vector [log lengthscales.., log outputscale, log noise]."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    n, d = X.shape
    Xn = spec.normalize(X)
    sq = _pairwise_sq_dists(Xn, Xn)
    K = spec.outputscale * spec.profile.value(sq)
    A = K + spec.noise_variance * np.eye(n)
    factor, _ = _chol_with_jitter(A, max(spec.outputscale, spec.noise_variance))
    alpha = cho_solve(factor, y)
    A_inv = cho_solve(factor, np.eye(n))
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    mll = -0.5 * float(y @ alpha) - 0.5 * logdet - 0.5 * n * math.log(2.0 * math.pi)

    Kp = spec.outputscale * spec.profile.derivative(sq)
    grad = np.empty(d + 2)
    for j in range(d):
        diff_sq = (Xn[:, j][:, None] - Xn[:, j][None, :]) ** 2
        dK = -2.0 * Kp * diff_sq
        grad[j] = 0.5 * (alpha @ dK @ alpha) - 0.5 * float(np.sum(A_inv * dK))
    grad[d] = 0.5 * (alpha @ K @ alpha) - 0.5 * float(np.sum(A_inv * K))
    grad[d + 1] = spec.noise_variance * (0.5 * float(alpha @ alpha) - 0.5 * float(np.trace(A_inv)))
    return mll, grad
