"""Matrix-free inference: batched conjugate gradients, stochastic Lanczos
quadrature for log-determinants, and the GP predictive equations.

All stochastic estimators draw from explicit seeds and are reproducible;
CG exposes a minimum iteration count because the loose training tolerance
(1.0) would otherwise be satisfied immediately by the zero iterate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .filtering import LatticeOperator
from .kernels import StationaryKernelSpec


class NonPositiveCurvatureError(RuntimeError):
    """CG met a direction of non-positive curvature (operator not PD)."""

    def __init__(self, iteration: int, column: int):
        super().__init__(
            f"non-positive curvature at CG iteration {iteration}, column {column}; "
            "the shifted lattice operator drifted indefinite"
        )
        self.iteration = iteration
        self.column = column


class DivergenceError(RuntimeError):
    """CG produced non-finite values."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite values at CG iteration {iteration}")
        self.iteration = iteration


class SolverAbort(RuntimeError):
    """Solve failed even after retrying with the symmetrized blur."""


@dataclass
class CGConfig:
    tolerance: float = 0.01
    max_iterations: int = 500
    seed: int = 0
    min_iterations: int = 10

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class SolveReport:
    solution: np.ndarray
    iterations: np.ndarray
    residuals: np.ndarray
    converged: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def cg_solve(
    apply: Callable[[np.ndarray], np.ndarray],
    B: np.ndarray,
    cfg: CGConfig,
    x0: Optional[np.ndarray] = None,
) -> SolveReport:
    """Solve A x = b for each column of B with conjugate gradients.

    ``apply`` must act column-wise on (n, c) blocks and be symmetric
    positive definite on the working subspace.  Columns converge when the
    relative residual drops below ``cfg.tolerance`` (never before
    ``cfg.min_iterations`` unless the residual is exactly zero).
    """
    B = np.asarray(B, dtype=float)
    squeeze = B.ndim == 1
    B2 = B[:, None] if squeeze else B
    n, c = B2.shape

    x = np.zeros_like(B2) if x0 is None else np.array(x0, dtype=float).reshape(n, c).copy()
    r = B2 - apply(x) if x0 is not None else B2.copy()
    b_norm = np.linalg.norm(B2, axis=0)
    b_norm_safe = np.where(b_norm > 0, b_norm, 1.0)
    p = r.copy()
    rs = np.sum(r * r, axis=0)

    iterations = np.zeros(c, dtype=int)
    converged = np.sqrt(rs) / b_norm_safe <= min(cfg.tolerance, 1e-14)
    converged |= b_norm == 0
    active = ~converged
    min_iters = min(cfg.min_iterations, cfg.max_iterations)

    it = 0
    while it < cfg.max_iterations and np.any(active):
        it += 1
        Ap = apply(p)
        pAp = np.sum(p * Ap, axis=0)
        bad = active & (pAp <= 0) & (rs > 0)
        if np.any(bad):
            raise NonPositiveCurvatureError(it, int(np.argmax(bad)))
        alpha = np.where(active, rs / np.where(pAp > 0, pAp, 1.0), 0.0)
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = np.sum(r * r, axis=0)
        if not np.all(np.isfinite(rs_new)):
            raise DivergenceError(it)
        rel = np.sqrt(rs_new) / b_norm_safe
        newly = active & ((rel <= cfg.tolerance) & (it >= min_iters) | (rel <= 1e-14))
        iterations[active] = it
        active = active & ~newly
        beta = np.where(active, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        p = r + beta * p
        rs = rs_new

    rel_final = np.sqrt(rs) / b_norm_safe
    report = SolveReport(
        solution=x[:, 0] if squeeze else x,
        iterations=iterations,
        residuals=rel_final,
        converged=(rel_final <= cfg.tolerance) | (b_norm == 0),
    )
    return report


def solve_shifted(op: LatticeOperator, B: np.ndarray, cfg: CGConfig, x0=None):
    """CG against (K + sigma^2 I) with the indefiniteness guard: one retry
    with the symmetrized blur, then abort with a diagnostic.

    Returns (report, operator_used).
    """
    try:
        return cg_solve(op.mvm_shifted, B, cfg, x0=x0), op
    except NonPositiveCurvatureError as first:
        if op.symmetrize:
            raise SolverAbort(
                f"CG hit non-positive curvature with symmetrization already on: {first}"
            ) from first
        warnings.warn(
            "CG hit non-positive curvature; retrying with the symmetrized blur",
            RuntimeWarning,
        )
        sym = op.symmetrized()
        try:
            return cg_solve(sym.mvm_shifted, B, cfg, x0=x0), sym
        except NonPositiveCurvatureError as second:
            raise SolverAbort(
                "CG hit non-positive curvature twice (plain and symmetrized blur); "
                f"first: {first}; second: {second}"
            ) from second


# ---------------------------------------------------------------------------
# stochastic log-determinant
# ---------------------------------------------------------------------------


@dataclass
class ProbeSet:
    """Rademacher probe vectors, reproducible from the seed."""

    count: int
    vectors: np.ndarray
    seed: int

    @classmethod
    def rademacher(cls, n: int, count: int, seed: int) -> "ProbeSet":
        rng = np.random.default_rng(seed)
        vecs = rng.integers(0, 2, size=(n, count)).astype(float) * 2.0 - 1.0
        return cls(count=count, vectors=vecs, seed=seed)


def logdet_slq(
    apply: Callable[[np.ndarray], np.ndarray],
    n: int,
    probes: ProbeSet,
    lanczos_steps: int,
    reorthogonalize: bool = True,
    stabilization_tol: float = 0.0,
) -> float:
    """Stochastic Lanczos quadrature estimate of log det(A).

    Each probe runs a Lanczos recurrence (with optional full
    reorthogonalization) whose tridiagonal eigendecomposition yields the
    quadrature z^T log(A) z; estimates average over probes.  A positive
    ``stabilization_tol`` stops early once the running estimate changes by
    less than that relative amount between checks, never exceeding
    ``lanczos_steps``.
    """
    steps = min(lanczos_steps, n)
    if steps < 1:
        raise ValueError("lanczos_steps must be at least 1")
    T = probes.count
    Z = probes.vectors
    if Z.shape != (n, T):
        raise ValueError("probe vectors have the wrong shape")
    z_norm = np.linalg.norm(Z, axis=0)
    q = Z / z_norm
    q_prev = np.zeros_like(q)
    beta_prev = np.zeros(T)

    alphas = np.zeros((steps, T))
    betas = np.zeros((steps, T))
    eff = np.full(T, steps, dtype=int)
    active = np.ones(T, dtype=bool)
    basis = np.zeros((steps, n, T)) if reorthogonalize else None

    last_estimate = None
    k_done = 0
    for k in range(steps):
        if basis is not None:
            basis[k] = q
        w = apply(q) - beta_prev * q_prev
        alpha = np.sum(w * q, axis=0)
        w = w - alpha * q
        if basis is not None and k > 0:
            # full reorthogonalization against the stored basis
            proj = np.einsum("knt,nt->kt", basis[: k + 1], w)
            w = w - np.einsum("knt,kt->nt", basis[: k + 1], proj)
        beta = np.linalg.norm(w, axis=0)
        alphas[k] = alpha
        betas[k] = beta

        scale = np.maximum(1.0, np.abs(alphas[: k + 1]).max(axis=0))
        broke = active & (beta <= 1e-12 * scale)
        eff[broke] = k + 1
        active = active & ~broke
        k_done = k + 1
        if not np.any(active):
            break
        beta_safe = np.where(beta > 0, beta, 1.0)
        q_prev = q
        q = w / beta_safe

        if stabilization_tol > 0 and (k + 1) % 10 == 0:
            est = _quadrature(alphas, betas, eff, active, k + 1, z_norm, n)
            if last_estimate is not None and abs(est - last_estimate) <= stabilization_tol * max(
                1.0, abs(est)
            ):
                k_done = k + 1
                break
            last_estimate = est

    return _quadrature(alphas, betas, eff, active, k_done, z_norm, n)


def _quadrature(alphas, betas, eff, active, k_done, z_norm, n) -> float:
    T = alphas.shape[1]
    total = 0.0
    for t in range(T):
        k = int(min(eff[t], k_done))
        a = alphas[:k, t]
        b = betas[: k - 1, t]
        vals, vecs = eigh_tridiagonal(a, b)
        floor = 1e-12 * max(vals.max(), 1e-300)
        if np.any(vals <= 0):
            warnings.warn(
                "non-positive Ritz value in log-det quadrature (operator drifted "
                "indefinite); clipping",
                RuntimeWarning,
            )
        vals = np.maximum(vals, floor)
        total += float(z_norm[t] ** 2) * float(np.sum(vecs[0, :] ** 2 * np.log(vals)))
    return total / T


# ---------------------------------------------------------------------------
# trained model and predictive equations
# ---------------------------------------------------------------------------


@dataclass
class Standardization:
    """Per-column input statistics and target statistics of the training
    portion; the model predicts in original target units through these."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def identity(cls, dim: int) -> "Standardization":
        return cls(np.zeros(dim), np.ones(dim), 0.0, 1.0)

    def apply_x(self, X: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(np.asarray(X, dtype=float)) - self.x_mean) / self.x_std

    def apply_y(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def invert_y(self, y_std: np.ndarray) -> np.ndarray:
        return np.asarray(y_std, dtype=float) * self.y_std + self.y_mean


@dataclass
class GPModel:
    """Trained hyperparameters plus the cached training solve.

    ``X_train`` and ``alpha`` live in standardized units; predictions are
    mapped back to original target units through ``stats``.
    """

    spec: StationaryKernelSpec
    X_train: np.ndarray
    alpha: np.ndarray
    stats: Standardization
    order: int = 1
    symmetrize: bool = False
    cg_eval: CGConfig = field(default_factory=lambda: CGConfig(tolerance=0.01))
    _operator: Optional[LatticeOperator] = field(default=None, repr=False, compare=False)

    def operator(self) -> LatticeOperator:
        if self._operator is None:
            self._operator = LatticeOperator.build(
                self.spec, self.X_train, order=self.order, symmetrize=self.symmetrize
            )
        return self._operator

    def joint_operator(self, X_star_std: np.ndarray) -> LatticeOperator:
        return LatticeOperator.build(
            self.spec,
            self.X_train,
            X_star=X_star_std,
            order=self.order,
            symmetrize=self.symmetrize,
        )

    @classmethod
    def from_training_solve(
        cls,
        spec: StationaryKernelSpec,
        X_train_std: np.ndarray,
        y_train_std: np.ndarray,
        stats: Standardization,
        order: int = 1,
        symmetrize: bool = False,
        cg_eval: Optional[CGConfig] = None,
    ) -> "GPModel":
        """Build the model and cache alpha = (K + sigma^2 I)^{-1} y."""
        cg_eval = cg_eval or CGConfig(tolerance=0.01)
        op = LatticeOperator.build(spec, X_train_std, order=order, symmetrize=symmetrize)
        report, op_used = solve_shifted(op, np.asarray(y_train_std, dtype=float), cg_eval)
        model = cls(
            spec=spec,
            X_train=np.atleast_2d(np.asarray(X_train_std, dtype=float)),
            alpha=report.solution,
            stats=stats,
            order=order,
            symmetrize=op_used.symmetrize,
            cg_eval=cg_eval,
        )
        model._operator = op_used
        return model

    # -- persistence --------------------------------------------------

    def save(self, path: str) -> None:
        np.savez(
            path,
            family=self.spec.family,
            lengthscales=self.spec.lengthscales,
            outputscale=self.spec.outputscale,
            noise_variance=self.spec.noise_variance,
            X_train=self.X_train,
            alpha=self.alpha,
            x_mean=self.stats.x_mean,
            x_std=self.stats.x_std,
            y_mean=self.stats.y_mean,
            y_std=self.stats.y_std,
            order=self.order,
            symmetrize=self.symmetrize,
            cg_tolerance=self.cg_eval.tolerance,
            cg_max_iterations=self.cg_eval.max_iterations,
        )

    @classmethod
    def load(cls, path: str) -> "GPModel":
        data = np.load(path, allow_pickle=False)
        spec = StationaryKernelSpec(
            family=str(data["family"]),
            lengthscales=data["lengthscales"],
            outputscale=float(data["outputscale"]),
            noise_variance=float(data["noise_variance"]),
        )
        stats = Standardization(
            x_mean=data["x_mean"],
            x_std=data["x_std"],
            y_mean=float(data["y_mean"]),
            y_std=float(data["y_std"]),
        )
        return cls(
            spec=spec,
            X_train=data["X_train"],
            alpha=data["alpha"],
            stats=stats,
            order=int(data["order"]),
            symmetrize=bool(data["symmetrize"]),
            cg_eval=CGConfig(
                tolerance=float(data["cg_tolerance"]),
                max_iterations=int(data["cg_max_iterations"]),
            ),
        )


@dataclass
class MLLReport:
    value: float
    quad_term: float
    logdet: float
    constant: float
    cg_converged: bool
    cg_iterations: int


def mll(
    model: GPModel,
    y_std: np.ndarray,
    probes: Optional[ProbeSet] = None,
    lanczos_steps: int = 100,
    stabilization_tol: float = 0.0,
) -> MLLReport:
    """Marginal log-likelihood of standardized targets under the lattice
    operator: -(1/2) y^T (K+s2 I)^{-1} y - (1/2) log det(K+s2 I) - (n/2) log 2 pi."""
    y = np.asarray(y_std, dtype=float).reshape(-1)
    n = y.shape[0]
    op = model.operator()
    report, op_used = solve_shifted(op, y, model.cg_eval)
    if not report.all_converged:
        warnings.warn(
            f"CG did not reach tolerance {model.cg_eval.tolerance:g} within "
            f"{model.cg_eval.max_iterations} iterations (residual "
            f"{float(report.residuals.max()):.3g}); MLL value still returned",
            RuntimeWarning,
        )
    quad = -0.5 * float(y @ report.solution)
    if probes is None:
        probes = ProbeSet.rademacher(n, 32, seed=model.cg_eval.seed)
    logdet = logdet_slq(
        op_used.mvm_shifted, n, probes, lanczos_steps, stabilization_tol=stabilization_tol
    )
    constant = -0.5 * n * math.log(2.0 * math.pi)
    return MLLReport(
        value=quad - 0.5 * logdet + constant,
        quad_term=quad,
        logdet=logdet,
        constant=constant,
        cg_converged=report.all_converged,
        cg_iterations=int(report.iterations.max()),
    )


def predictive_mean(model: GPModel, X_star: np.ndarray) -> np.ndarray:
    """Posterior mean at test inputs (original units)."""
    if model.alpha is None:
        raise ValueError("model has no cached training solve")
    Xs = model.stats.apply_x(X_star)
    joint = model.joint_operator(Xs)
    mean_std = joint.cross_mvm(model.alpha)
    return model.stats.invert_y(mean_std)


def predictive_variance(
    model: GPModel,
    X_star: np.ndarray,
    batch_size: int = 256,
    exact_cross: bool = False,
) -> np.ndarray:
    """Posterior latent variance at test inputs (standardized units).

    k(0)*outputscale - u^T (K + sigma^2 I)^{-1} u per test point, with the
    n-dimensional solves batched through CG.  By default the cross columns
    u run through the shared lattice, keeping the quadratic form consistent
    with the operator being inverted (an inconsistent pairing lets the form
    overshoot k(0) wherever the inverse acts outside the lattice range, and
    every interior variance comes back negative).  ``exact_cross`` switches
    to exactly evaluated O(n d) cross columns for diagnostics.  Values are
    floored at 1e-12; negative pre-floor values are reported as an
    approximation-quality warning.
    """
    Xs = model.stats.apply_x(X_star)
    n_star = Xs.shape[0]
    out = np.empty(n_star)
    negatives = 0
    outputscale = model.spec.outputscale

    if exact_cross:
        op = model.operator()
        Xn_train = model.spec.normalize(model.X_train)
        Xn_star = model.spec.normalize(Xs)
        prof = model.spec.profile
        for start in range(0, n_star, batch_size):
            stop = min(start + batch_size, n_star)
            chunk = Xn_star[start:stop]
            sq = (
                np.sum(Xn_train**2, axis=1)[:, None]
                + np.sum(chunk**2, axis=1)[None, :]
                - 2.0 * (Xn_train @ chunk.T)
            )
            U = outputscale * prof.value(np.maximum(sq, 0.0))
            report, _ = solve_shifted(op, U, model.cg_eval)
            var = outputscale - np.einsum("ij,ij->j", U, report.solution)
            negatives += int(np.sum(var < 0))
            out[start:stop] = np.maximum(var, 1e-12)
    else:
        joint = model.joint_operator(Xs)
        w_test = joint._w_test.tocsr()
        for start in range(0, n_star, batch_size):
            stop = min(start + batch_size, n_star)
            block = w_test[start:stop].T.toarray()
            U = outputscale * (joint._w_train @ joint._blur(block, joint.stencil.coefficients))
            report, _ = solve_shifted(joint, U, model.cg_eval)
            var = outputscale - np.einsum("ij,ij->j", U, report.solution)
            negatives += int(np.sum(var < 0))
            out[start:stop] = np.maximum(var, 1e-12)

    if negatives:
        warnings.warn(
            f"{negatives} predictive variances were negative before flooring "
            "(lattice approximation drift)",
            RuntimeWarning,
        )
    return out


def test_nll(model: GPModel, X_star: np.ndarray, y_star: np.ndarray) -> float:
    """Mean Gaussian negative log density of held-out targets under the
    predictive distribution plus observation noise, in standardized units."""
    y_std = model.stats.apply_y(y_star)
    Xs = model.stats.apply_x(X_star)
    joint = model.joint_operator(Xs)
    mean_std = joint.cross_mvm(model.alpha)
    var = predictive_variance(model, X_star) + model.spec.noise_variance
    return float(
        np.mean(0.5 * np.log(2.0 * math.pi * var) + 0.5 * (y_std - mean_std) ** 2 / var)
    )
