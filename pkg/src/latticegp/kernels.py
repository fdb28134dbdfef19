"""Stationary kernel families and hyperparameter container.

Kernel profiles are expressed as functions of the squared normalized
distance tau^2 = sum_j ((x_j - y_j) / ell_j)^2 and are normalized so that
k(0) = 1; the outputscale multiplies the profile outside of it.  The
derivative is taken with respect to tau^2, which is the form needed by the
filtered gradient machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

FAMILIES = ("rbf", "matern32", "matern52")

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)


class TailTruncationError(ValueError):
    """Raised when a sampling window does not cover the kernel's support."""


@dataclass(frozen=True)
class KernelProfile:
    """Unit-variance stationary profile k(tau^2) with its tau^2-derivative."""

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]


def _rbf_value(sq):
    return np.exp(-0.5 * sq)


def _rbf_derivative(sq):
    return -0.5 * np.exp(-0.5 * sq)


def _matern32_value(sq):
    t = np.sqrt(sq)
    return (1.0 + _SQRT3 * t) * np.exp(-_SQRT3 * t)


def _matern32_derivative(sq):
    # d/d(tau^2) [(1 + sqrt3 t) exp(-sqrt3 t)] = -1.5 exp(-sqrt3 t), t = sqrt(tau^2)
    return -1.5 * np.exp(-_SQRT3 * np.sqrt(sq))


def _matern52_value(sq):
    t = np.sqrt(sq)
    return (1.0 + _SQRT5 * t + (5.0 / 3.0) * sq) * np.exp(-_SQRT5 * t)


def _matern52_derivative(sq):
    t = np.sqrt(sq)
    return -(5.0 / 6.0) * (1.0 + _SQRT5 * t) * np.exp(-_SQRT5 * t)


_PROFILES = {
    "rbf": KernelProfile("rbf", _rbf_value, _rbf_derivative),
    "matern32": KernelProfile("matern32", _matern32_value, _matern32_derivative),
    "matern52": KernelProfile("matern52", _matern52_value, _matern52_derivative),
}


def profile(family: str) -> KernelProfile:
    """Look up a kernel profile by family name (case-insensitive)."""
    key = family.strip().lower().replace("-", "").replace("/", "").replace("_", "")
    if key in ("matern32", "matern3", "matern15"):
        key = "matern32"
    if key not in _PROFILES:
        raise KeyError(f"unknown kernel family '{family}'; available: {list(FAMILIES)}")
    return _PROFILES[key]


@dataclass
class StationaryKernelSpec:
    """Hyperparameters of a stationary kernel: ARD lengthscales, outputscale,
    and Gaussian observation-noise variance.

    ``outputscale`` may be exactly zero, which collapses the prior covariance
    to zero (useful as a degenerate case in tests); lengthscales and the noise
    variance must be strictly positive.
    """

    family: str
    lengthscales: np.ndarray
    outputscale: float = 1.0
    noise_variance: float = 0.1

    def __post_init__(self):
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if self.lengthscales.ndim != 1:
            raise ValueError("lengthscales must be a 1-D vector")
        if not np.all(np.isfinite(self.lengthscales)) or np.any(self.lengthscales <= 0):
            raise ValueError("lengthscales must be finite and positive")
        if not (self.outputscale >= 0 and np.isfinite(self.outputscale)):
            raise ValueError("outputscale must be finite and non-negative")
        if not (self.noise_variance > 0 and np.isfinite(self.noise_variance)):
            raise ValueError("noise_variance must be finite and positive")
        profile(self.family)  # validates the family name

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]

    @property
    def profile(self) -> KernelProfile:
        return profile(self.family)

    def normalize(self, X: np.ndarray) -> np.ndarray:
        """Scale inputs by the per-dimension lengthscales."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim}-dimensional inputs, got {X.shape[1]}")
        return X / self.lengthscales

    # --- log-space parameter vector [log ell_1..d, log outputscale, log noise] ---

    def log_params(self) -> np.ndarray:
        if self.outputscale <= 0:
            raise ValueError("zero outputscale has no log-space representation")
        return np.concatenate(
            [np.log(self.lengthscales), [math.log(self.outputscale)], [math.log(self.noise_variance)]]
        )

    def with_log_params(self, theta: np.ndarray, noise_floor: float = 1e-4) -> "StationaryKernelSpec":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim + 2,):
            raise ValueError(f"expected {self.dim + 2} log-parameters")
        noise = max(math.exp(theta[-1]), noise_floor)
        return StationaryKernelSpec(
            family=self.family,
            lengthscales=np.exp(theta[: self.dim]),
            outputscale=math.exp(theta[self.dim]),
            noise_variance=noise,
        )


def evaluate(prof: KernelProfile, sq_dist) -> np.ndarray:
    """Evaluate the unit profile at squared distance(s) >= 0."""
    sq = np.asarray(sq_dist, dtype=float)
    if np.any(sq < 0):
        raise ValueError("squared distance must be non-negative")
    return prof.value(sq)


def normalized_sq_dist(x, y, lengthscales) -> float:
    """sum_j ((x_j - y_j) / ell_j)^2 for a pair of points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ell = np.asarray(lengthscales, dtype=float)
    if x.shape != y.shape or x.shape != ell.shape:
        raise ValueError(f"dimension mismatch: {x.shape}, {y.shape}, {ell.shape}")
    if np.any(ell <= 0):
        raise ValueError("lengthscales must be positive")
    diff = (x - y) / ell
    return float(np.dot(diff, diff))


@dataclass(frozen=True)
class SpectrumSamples:
    """Uniformly sampled Fourier transform of a 1-D kernel profile k(tau)."""

    omega: np.ndarray
    values: np.ndarray
    tau_step: float = field(default=0.0)


def numeric_fourier(prof: KernelProfile, grid_half_width: float, n_samples: int) -> SpectrumSamples:
    """Sample the Fourier transform of the 1-D slice k(tau) = profile(tau^2).

    The profile is sampled on [-W, W) and transformed with the FFT; the
    window must cover the kernel support (tail below 1e-8 of k(0)).
    """
    if n_samples < 64 or (n_samples & (n_samples - 1)) != 0:
        raise ValueError("n_samples must be a power of two, at least 64")
    w = float(grid_half_width)
    if w <= 0:
        raise ValueError("grid_half_width must be positive")
    k0 = float(prof.value(np.asarray(0.0)))
    tail = float(prof.value(np.asarray(w * w)))
    if k0 > 0 and tail > 1e-8 * k0:
        raise TailTruncationError(
            f"profile tail {tail:.3e} at tau={w:g} exceeds 1e-8 of k(0); widen the grid"
        )
    step = 2.0 * w / n_samples
    tau = -w + step * np.arange(n_samples)
    samples = prof.value(tau * tau)
    # continuous-transform convention: F(omega) = int k(tau) exp(-i omega tau) dtau
    raw = np.fft.fft(samples)
    omega = 2.0 * math.pi * np.fft.fftfreq(n_samples, d=step)
    spectrum = (raw * np.exp(1j * omega * w) * step).real
    order = np.argsort(omega, kind="stable")
    return SpectrumSamples(omega=omega[order], values=spectrum[order], tau_step=step)


def auto_fourier(prof: KernelProfile, pad_factor: int = 16, points_per_support: int = 1024) -> SpectrumSamples:
    """Sample the spectrum with an automatically chosen window.

    The support half-width is grown until the profile tail drops below 1e-8,
    then the window is zero-padded by ``pad_factor`` to refine the frequency
    resolution of the sampled transform.
    """
    support = 4.0
    k0 = float(prof.value(np.asarray(0.0)))
    if k0 == 0.0:
        tau = np.linspace(-4, 4, 64)
        return SpectrumSamples(omega=tau.copy(), values=np.zeros(64), tau_step=8 / 64)
    for _ in range(12):
        if float(prof.value(np.asarray(support * support))) <= 1e-8 * k0:
            break
        support *= 2.0
    else:
        raise TailTruncationError("profile tail does not decay below 1e-8 of k(0)")
    half_width = support * pad_factor
    step_target = support / points_per_support
    n = 1 << max(6, math.ceil(math.log2(2.0 * half_width / step_target)))
    return numeric_fourier(prof, half_width, n)
