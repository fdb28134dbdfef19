"""Marginal-likelihood training with lattice-filtered gradients.

The MLL gradient splits into a quadratic term and a stochastic trace term;
every contraction u^T (dK/dtheta) v runs through one multi-channel filtering
pass with the derivative stencil, followed by the chain rule into log
hyperparameters.  Optimization is Adam in log space with a floor on the
noise variance, and the returned model is the epoch snapshot with the
lowest validation RMSE.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .filtering import LatticeOperator
from .kernels import StationaryKernelSpec
from .solver import (
    CGConfig,
    GPModel,
    ProbeSet,
    Standardization,
    logdet_slq,
    solve_shifted,
)


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    max_epochs: int = 100
    probes: int = 16
    seed: int = 0
    noise_floor: float = 1e-4
    patience: int = 10
    order: int = 1
    symmetrize: bool = False
    cg_tol_train: float = 1.0
    cg_tol_eval: float = 0.01
    cg_max_iterations: int = 500
    cg_min_iterations: int = 10
    lanczos_steps: int = 100
    trace_mll: bool = True
    init_outputscale: float = 1.0
    init_noise: float = 0.1
    init_lengthscale: Optional[float] = None  # default sqrt(d)/2

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")

    def train_cg(self) -> CGConfig:
        return CGConfig(
            tolerance=self.cg_tol_train,
            max_iterations=self.cg_max_iterations,
            seed=self.seed,
            min_iterations=self.cg_min_iterations,
        )

    def eval_cg(self) -> CGConfig:
        return CGConfig(
            tolerance=self.cg_tol_eval,
            max_iterations=self.cg_max_iterations,
            seed=self.seed,
            min_iterations=self.cg_min_iterations,
        )


@dataclass
class TrainTrace:
    """Per-epoch record of the optimization."""

    mll: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    hyperparameters: list = field(default_factory=list)
    cg_iterations: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.val_rmse)


def _initial_spec(family: str, dim: int, cfg: TrainConfig) -> StationaryKernelSpec:
    ls = cfg.init_lengthscale if cfg.init_lengthscale is not None else math.sqrt(dim) / 2.0
    return StationaryKernelSpec(
        family=family,
        lengthscales=np.full(dim, ls),
        outputscale=cfg.init_outputscale,
        noise_variance=max(cfg.init_noise, cfg.noise_floor),
    )


def _gradients_from_solves(
    op: LatticeOperator,
    Xn: np.ndarray,
    alpha: np.ndarray,
    Z: np.ndarray,
    W_solves: np.ndarray,
) -> np.ndarray:
    """MLL gradient over [log lengthscales, log outputscale, log noise]
    given alpha = A^{-1} y and W = A^{-1} Z for probe block Z."""
    spec = op.spec
    n, d = Xn.shape
    T = Z.shape[1] if Z.ndim == 2 and Z.size else 0

    # one filtering pass gives K alpha and K z_t for the outputscale term
    stack = np.concatenate([alpha[:, None], Z], axis=1) if T else alpha[:, None]
    K_stack = op.mvm(stack)
    K_alpha = K_stack[:, 0]
    grad_outputscale = 0.5 * float(alpha @ K_alpha)
    if T:
        grad_outputscale -= 0.5 / T * float(np.einsum("nt,nt->", W_solves, K_stack[:, 1:]))

    # input-space gradient of the combined bilinear forms, then chain rule
    v_block = stack
    g_block = np.concatenate([0.5 * alpha[:, None], -0.5 / T * W_solves], axis=1) if T else 0.5 * alpha[:, None]
    dmll_dx = op.gradient_filter(v_block, g_block, Xn)
    grad_ls = -np.einsum("nd,nd->d", Xn, dmll_dx)

    grad_noise = spec.noise_variance * 0.5 * float(alpha @ alpha)
    if T:
        grad_noise -= spec.noise_variance * 0.5 / T * float(np.einsum("nt,nt->", Z, W_solves))

    return np.concatenate([grad_ls, [grad_outputscale], [grad_noise]])


def mll_gradients(
    model: GPModel,
    y_std: np.ndarray,
    probes: ProbeSet,
    cg: Optional[CGConfig] = None,
) -> np.ndarray:
    """MLL gradient over {log lengthscales, log outputscale, log noise} using
    lattice-filtered contractions and Hutchinson trace probes."""
    y = np.asarray(y_std, dtype=float).reshape(-1)
    cg = cg or model.cg_eval
    op = model.operator()
    rhs = np.concatenate([y[:, None], probes.vectors], axis=1)
    report, op_used = solve_shifted(op, rhs, cg)
    alpha = report.solution[:, 0]
    W_solves = report.solution[:, 1:]
    Xn = model.spec.normalize(model.X_train)
    return _gradients_from_solves(op_used, Xn, alpha, probes.vectors, W_solves)


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def fit(
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    family: str,
    cfg: TrainConfig,
    stats: Optional[Standardization] = None,
) -> tuple[GPModel, TrainTrace]:
    """Maximize the MLL over log hyperparameters with early stopping on
    validation RMSE.

    Inputs are expected in standardized units (``stats`` only records how to
    map predictions back); the splat plan is rebuilt every epoch because the
    lengthscales move the embedding.
    """
    X_train = np.atleast_2d(np.asarray(X_train, dtype=float))
    y_train = np.asarray(y_train, dtype=float).reshape(-1)
    X_val = np.atleast_2d(np.asarray(X_val, dtype=float))
    y_val = np.asarray(y_val, dtype=float).reshape(-1)
    n, d = X_train.shape
    stats = stats or Standardization.identity(d)

    spec = _initial_spec(family, d, cfg)
    trace = TrainTrace()
    if cfg.max_epochs == 0:
        model = GPModel.from_training_solve(
            spec, X_train, y_train, stats, order=cfg.order,
            symmetrize=cfg.symmetrize, cg_eval=cfg.eval_cg(),
        )
        return model, trace

    theta = spec.log_params()
    adam_m = np.zeros_like(theta)
    adam_v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    log_floor = math.log(cfg.noise_floor)

    best = (math.inf, -1, theta.copy())
    cg_train = cfg.train_cg()
    cg_eval = cfg.eval_cg()
    constant = -0.5 * n * math.log(2.0 * math.pi)

    for epoch in range(cfg.max_epochs):
        tic = time.perf_counter()
        spec = spec.with_log_params(theta, noise_floor=cfg.noise_floor)
        op = LatticeOperator.build(spec, X_train, order=cfg.order, symmetrize=cfg.symmetrize)

        probes = ProbeSet.rademacher(n, cfg.probes, seed=cfg.seed + 7919 * epoch)
        rhs = np.concatenate([y_train[:, None], probes.vectors], axis=1)
        try:
            report, op = solve_shifted(op, rhs, cg_train)
        except Exception as err:
            if len(trace) == 0:
                raise RuntimeError(f"training failed at epoch 0: {err}") from err
            warnings.warn(f"stopping at epoch {epoch}: {err}", RuntimeWarning)
            break
        alpha = report.solution[:, 0]
        W_solves = report.solution[:, 1:]

        Xn = spec.normalize(X_train)
        grad = _gradients_from_solves(op, Xn, alpha, probes.vectors, W_solves)

        # per-epoch MLL estimate for the trace (quadratic term reuses the
        # training-tolerance solve; the log-det is stochastic quadrature)
        if cfg.trace_mll:
            logdet = logdet_slq(
                op.mvm_shifted, n, probes, cfg.lanczos_steps, stabilization_tol=1e-5
            )
            mll_est = -0.5 * float(y_train @ alpha) - 0.5 * logdet + constant
        else:
            mll_est = float("nan")

        # validation RMSE at the eval tolerance (warm-started from alpha)
        report_eval, op_eval = solve_shifted(op, y_train, cg_eval, x0=alpha)
        joint = LatticeOperator.build(
            spec, X_train, X_star=X_val, order=cfg.order, symmetrize=op_eval.symmetrize
        )
        val_pred = joint.cross_mvm(report_eval.solution)
        val_rmse = _rmse(val_pred, y_val)

        trace.mll.append(mll_est)
        trace.val_rmse.append(val_rmse)
        trace.hyperparameters.append(theta.copy())
        trace.cg_iterations.append(int(report.iterations.max()))
        trace.wall_time.append(time.perf_counter() - tic)

        if val_rmse < best[0]:
            best = (val_rmse, epoch, theta.copy())

        if epoch - best[1] >= cfg.patience:
            break

        # Adam ascent step in log space, then the noise floor
        adam_m = beta1 * adam_m + (1 - beta1) * grad
        adam_v = beta2 * adam_v + (1 - beta2) * grad * grad
        m_hat = adam_m / (1 - beta1 ** (epoch + 1))
        v_hat = adam_v / (1 - beta2 ** (epoch + 1))
        theta = theta + cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        theta[-1] = max(theta[-1], log_floor)

    trace.best_epoch = best[1]
    spec = _initial_spec(family, d, cfg).with_log_params(best[2], noise_floor=cfg.noise_floor)
    model = GPModel.from_training_solve(
        spec, X_train, y_train, stats, order=cfg.order,
        symmetrize=cfg.symmetrize, cg_eval=cg_eval,
    )
    return model, trace


# ---------------------------------------------------------------------------
# dense reference trainer (for lengthscale-agreement reports)
# ---------------------------------------------------------------------------


def fit_exact(
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    family: str,
    cfg: TrainConfig,
) -> tuple[StationaryKernelSpec, TrainTrace]:
    """Same optimization loop driven by dense Cholesky MLL gradients.

    Quadratic in n; intended for subsampled comparisons against the lattice
    path, not production training.
    """
    from . import oracle  # local import keeps oracle free of trainer deps

    X_train = np.atleast_2d(np.asarray(X_train, dtype=float))
    y_train = np.asarray(y_train, dtype=float).reshape(-1)
    n, d = X_train.shape
    spec = _initial_spec(family, d, cfg)
    trace = TrainTrace()
    if cfg.max_epochs == 0:
        return spec, trace

    theta = spec.log_params()
    adam_m = np.zeros_like(theta)
    adam_v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    best = (math.inf, -1, theta.copy())

    for epoch in range(cfg.max_epochs):
        tic = time.perf_counter()
        spec = spec.with_log_params(theta, noise_floor=cfg.noise_floor)
        mll_val, grad = oracle.exact_mll_gradients(X_train, y_train, spec)

        res = oracle.exact_gp(X_train, y_train, X_val, spec)
        val_rmse = _rmse(res.mean, y_val)

        trace.mll.append(mll_val)
        trace.val_rmse.append(val_rmse)
        trace.hyperparameters.append(theta.copy())
        trace.cg_iterations.append(0)
        trace.wall_time.append(time.perf_counter() - tic)

        if val_rmse < best[0]:
            best = (val_rmse, epoch, theta.copy())
        if epoch - best[1] >= cfg.patience:
            break

        adam_m = beta1 * adam_m + (1 - beta1) * grad
        adam_v = beta2 * adam_v + (1 - beta2) * grad * grad
        m_hat = adam_m / (1 - beta1 ** (epoch + 1))
        v_hat = adam_v / (1 - beta2 ** (epoch + 1))
        theta = theta + cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        theta[-1] = max(theta[-1], math.log(cfg.noise_floor))

    trace.best_epoch = best[1]
    spec = _initial_spec(family, d, cfg).with_log_params(best[2], noise_floor=cfg.noise_floor)
    return spec, trace
