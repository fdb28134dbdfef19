"""Discretization of stationary kernels into symmetric blur coefficients.

A stencil of order r holds coefficients k(i*s), i = -r..r, evaluated at a
spacing s chosen so that the kernel's coverage inside the stencil window in
the spatial domain equals its spectral-mass coverage inside the Nyquist band
[-pi/s, pi/s].  Widening s gains spatial coverage and loses frequency
coverage monotonically, so the balance point is found by bisection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from .kernels import KernelProfile, SpectrumSamples, auto_fourier


class BracketingError(RuntimeError):
    """The coverage-balance bisection could not bracket a sign change."""


class SpectrumResolutionError(ValueError):
    """Too few spectrum samples fall inside the Nyquist band."""


@dataclass(frozen=True)
class Stencil:
    """Symmetric blur coefficients with their spacing.

    ``coefficients`` is the full vector c_{-r}..c_{r} (length 2r+1, center
    normalized to 1); ``derivative_coefficients`` sample the kernel's
    tau^2-derivative at the same lattice offsets, normalized the same way
    (center 1) with the center value k'(0) carried in ``derivative_scale``.
    The center must be 1 because the sequential blur multiplies the center
    coefficient once per direction: any other value would compound d+1
    times.
    """

    order: int
    spacing: float
    coefficients: np.ndarray
    derivative_coefficients: np.ndarray
    derivative_scale: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float)
        if c.shape != (2 * self.order + 1,):
            raise ValueError("coefficient vector must have length 2*order+1")
        if not np.allclose(c, c[::-1], rtol=0, atol=1e-12):
            raise ValueError("stencil coefficients must be symmetric")
        if abs(c[self.order] - 1.0) > 1e-12:
            raise ValueError("center coefficient must be 1 after normalization")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")


def _tail_half_width(profile: KernelProfile) -> float:
    """Half-width beyond which the 1-D profile is below 1e-8 of k(0)."""
    w = 4.0
    k0 = float(profile.value(np.asarray(0.0)))
    if k0 == 0.0:
        return w
    for _ in range(12):
        if float(profile.value(np.asarray(w * w))) <= 1e-8 * k0:
            return w
        w *= 2.0
    raise BracketingError("kernel tail does not decay; cannot integrate coverage")


def _integral(profile: KernelProfile, upper: float, points: int = 4097) -> float:
    """Simpson integral of k(tau) over [0, upper]."""
    if upper <= 0:
        return 0.0
    tau = np.linspace(0.0, upper, points)
    return float(simpson(profile.value(tau * tau), x=tau))


def spatial_coverage(profile: KernelProfile, spacing: float, order: int) -> float:
    """Fraction of the kernel's spatial mass inside the stencil window
    [-s(2r+1)/2, s(2r+1)/2]."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    m = 2 * order + 1
    tail = _tail_half_width(profile)
    total = _integral(profile, tail)
    if total <= 0:
        raise BracketingError("profile has no spatial mass")
    half = spacing * m / 2.0
    return min(1.0, _integral(profile, min(half, tail)) / total)


def _band_fraction(spectrum: SpectrumSamples, cutoff: float) -> float:
    """Fraction of total spectral mass within [-cutoff, cutoff], trapezoid
    with linear interpolation at the band edges."""
    omega, vals = spectrum.omega, spectrum.values
    inside = np.abs(omega) <= cutoff
    if inside.sum() < 8:
        raise SpectrumResolutionError(
            f"only {int(inside.sum())} spectrum samples inside the band; refine the grid"
        )
    cum = np.concatenate([[0.0], np.cumsum(np.diff(omega) * 0.5 * (vals[1:] + vals[:-1]))])
    total = cum[-1]
    if total <= 0:
        raise BracketingError("spectrum has no mass")
    hi = float(np.interp(cutoff, omega, cum))
    lo = float(np.interp(-cutoff, omega, cum))
    return min(1.0, max(0.0, (hi - lo) / total))


def frequency_coverage(profile: KernelProfile, spacing: float, spectrum: SpectrumSamples | None = None) -> float:
    """Fraction of the kernel's spectral mass inside the Nyquist band
    [-pi/s, pi/s] of a grid with spacing s."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if spectrum is None:
        spectrum = auto_fourier(profile)
    return _band_fraction(spectrum, math.pi / spacing)


def find_spacing(profile: KernelProfile, order: int, tol: float = 1e-4) -> float:
    """Spacing at which spatial and frequency coverage agree within tol."""
    if order < 0:
        raise ValueError("order must be non-negative")
    if tol <= 0:
        raise ValueError("tol must be positive")
    spectrum = auto_fourier(profile)

    def gap(s: float) -> float:
        return spatial_coverage(profile, s, order) - frequency_coverage(profile, s, spectrum)

    lo, hi = 1.0, 1.0
    glo, ghi = gap(lo), gap(hi)
    for _ in range(60):
        if glo < 0:
            break
        lo /= 2.0
        glo = gap(lo)
    else:
        raise BracketingError("could not bracket the coverage balance from below")
    for _ in range(60):
        if ghi > 0:
            break
        hi *= 2.0
        ghi = gap(hi)
    else:
        raise BracketingError("could not bracket the coverage balance from above")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        g = gap(mid)
        if abs(g) <= tol:
            return mid
        if g < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# classic binomial blur for cross-checks against the original lattice lineage
BINOMIAL_COEFFICIENTS = np.array([0.5, 1.0, 0.5])


def build_stencil(
    profile: KernelProfile,
    order: int,
    spacing: float | None = None,
    tol: float = 1e-4,
    binomial: bool = False,
) -> Stencil:
    """Stencil for a kernel profile at the coverage-balanced spacing.

    With ``binomial`` the coefficients are the reference Gaussian-blur
    stencil [.5, 1, .5] (order forced to 1); the spacing is still taken from
    the coverage balance so the lattice geometry is unchanged.
    """
    if spacing is None:
        spacing = find_spacing(profile, 1 if binomial else order, tol=tol)
    k0 = float(profile.value(np.asarray(0.0)))
    if k0 <= 0:
        raise ValueError("profile must be positive at zero")
    dk0 = float(profile.derivative(np.asarray(0.0)))
    if dk0 == 0.0:
        raise ValueError("profile derivative vanishes at zero; no derivative stencil")
    if binomial:
        offsets = np.arange(-1, 2, dtype=float)
        sq = (offsets * spacing) ** 2
        return Stencil(
            order=1,
            spacing=spacing,
            coefficients=BINOMIAL_COEFFICIENTS.copy(),
            derivative_coefficients=np.asarray(profile.derivative(sq), dtype=float) / dk0,
            derivative_scale=dk0 / k0,
        )
    offsets = np.arange(-order, order + 1, dtype=float)
    sq = (offsets * spacing) ** 2
    coeffs = np.asarray(profile.value(sq), dtype=float) / k0
    dcoeffs = np.asarray(profile.derivative(sq), dtype=float) / dk0
    return Stencil(
        order=order,
        spacing=spacing,
        coefficients=coeffs,
        derivative_coefficients=dcoeffs,
        derivative_scale=dk0 / k0,
    )
