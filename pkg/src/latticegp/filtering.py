"""Matrix-free kernel MVMs composed from splat -> blur -> slice.

A :class:`LatticeOperator` realizes v -> outputscale * W B W^T v, the sparse
simplicial-lattice approximation of the kernel matrix action, plus the
shifted action (+ sigma^2 v), cross-covariance MVMs between a training and a
test plan sharing one lattice, and the lattice-filtered gradient of the
bilinear form g^T (K v) with respect to the normalized inputs.

The sequential per-direction blur does not commute across directions, so
the composed operator is only approximately symmetric; ``symmetrize``
averages the ascending and descending direction orders, which makes it
exactly symmetric at twice the blur cost.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import lattice
from .kernels import StationaryKernelSpec
from .stencil import Stencil, build_stencil


@dataclass
class LatticeOperator:
    """Immutable kernel-MVM operator over a shared simplicial lattice."""

    spec: StationaryKernelSpec
    stencil: Stencil
    basis: lattice.EmbeddingBasis
    train_plan: lattice.SplatPlan
    test_plan: Optional[lattice.SplatPlan]
    symmetrize: bool
    _tables: np.ndarray
    _w_train: "object"
    _w_test: "object"

    @classmethod
    def build(
        cls,
        spec: StationaryKernelSpec,
        X: np.ndarray,
        X_star: Optional[np.ndarray] = None,
        order: int = 1,
        symmetrize: bool = False,
        stencil: Optional[Stencil] = None,
        binomial: bool = False,
    ) -> "LatticeOperator":
        """Build the operator for training inputs X (raw units), optionally
        sharing the lattice with test inputs X_star for cross-covariance."""
        if stencil is None:
            stencil = build_stencil(spec.profile, order, binomial=binomial)
        basis = lattice.EmbeddingBasis.for_spacing(spec.dim, stencil.spacing)
        groups = [spec.normalize(X)]
        if X_star is not None:
            groups.append(spec.normalize(X_star))
        plans = lattice.build_plans(groups, basis)
        train_plan = plans[0]
        test_plan = plans[1] if X_star is not None else None
        tables = lattice.neighbor_tables(train_plan.key_set, stencil.order)
        return cls(
            spec=spec,
            stencil=stencil,
            basis=basis,
            train_plan=train_plan,
            test_plan=test_plan,
            symmetrize=symmetrize,
            _tables=tables,
            _w_train=train_plan.interpolation_matrix(),
            _w_test=test_plan.interpolation_matrix() if test_plan is not None else None,
        )

    # ------------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.train_plan.n

    @property
    def m(self) -> int:
        return self.train_plan.key_set.m

    @property
    def dim(self) -> int:
        return self.spec.dim

    def symmetrized(self, on: bool = True) -> "LatticeOperator":
        """Copy of this operator with the symmetrization mode toggled;
        shares all plans and tables."""
        return replace(self, symmetrize=on)

    def asymmetry(self, trials: int = 8, seed: int = 0) -> float:
        """Measured relative asymmetry |<Au,v> - <u,Av>| / (|A u||v|) over
        random probe pairs (diagnostic; zero when symmetrized)."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            u = rng.standard_normal(self.n)
            v = rng.standard_normal(self.n)
            au = self.mvm(u)
            av = self.mvm(v)
            denom = max(np.linalg.norm(au) * np.linalg.norm(v), 1e-300)
            worst = max(worst, abs(au @ v - u @ av) / denom)
        return worst

    # ------------------------------------------------------------------

    def _blur(self, values: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
        out = lattice.blur_values(values, coefficients, self._tables)
        if self.symmetrize:
            back = lattice.blur_values(values, coefficients, self._tables, descending=True)
            out = 0.5 * (out + back)
        return out

    def _filter(self, V: np.ndarray, coefficients: np.ndarray, w_out) -> np.ndarray:
        acc = self._w_train.T @ V
        blurred = self._blur(acc, coefficients)
        return w_out @ blurred

    def mvm(self, V: np.ndarray) -> np.ndarray:
        """Approximate K_XX @ V for V of shape (n,) or (n, c)."""
        V = np.asarray(V, dtype=float)
        squeeze = V.ndim == 1
        V2 = V[:, None] if squeeze else V
        if V2.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got {V2.shape[0]}")
        out = self.spec.outputscale * self._filter(V2, self.stencil.coefficients, self._w_train)
        return out[:, 0] if squeeze else out

    def mvm_shifted(self, V: np.ndarray, noise_variance: Optional[float] = None) -> np.ndarray:
        """(K_XX + sigma^2 I) @ V."""
        sigma2 = self.spec.noise_variance if noise_variance is None else float(noise_variance)
        if sigma2 <= 0:
            raise ValueError("noise variance must be positive")
        return self.mvm(V) + sigma2 * np.asarray(V, dtype=float)

    def cross_mvm(self, V: np.ndarray) -> np.ndarray:
        """Approximate K_{X*,X} @ V: splat with the training plan, blur once,
        slice at the test plan."""
        if self.test_plan is None:
            raise ValueError("operator was built without test inputs")
        V = np.asarray(V, dtype=float)
        squeeze = V.ndim == 1
        V2 = V[:, None] if squeeze else V
        if V2.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got {V2.shape[0]}")
        out = self.spec.outputscale * self._filter(V2, self.stencil.coefficients, self._w_test)
        return out[:, 0] if squeeze else out

    # ------------------------------------------------------------------

    def gradient_filter(self, V: np.ndarray, G: np.ndarray, X_normalized: np.ndarray) -> np.ndarray:
        """Gradient of sum_c g_c^T (K v_c) with respect to the normalized
        inputs, evaluated with one filtering pass under the derivative
        stencil.

        ``G`` carries the cotangent of the filter output (dL/du per channel
        for u = K v); the splat plan is treated as fixed, matching the
        ideal-kernel derivation rather than differentiating through the
        barycentric weights.
        """
        V = np.asarray(V, dtype=float)
        G = np.asarray(G, dtype=float)
        if V.ndim == 1:
            V = V[:, None]
        if G.ndim == 1:
            G = G[:, None]
        if V.shape != G.shape:
            raise ValueError("value and cotangent channel blocks must match")
        Xn = np.asarray(X_normalized, dtype=float)
        n, d = Xn.shape
        if V.shape[0] != n or n != self.n:
            raise ValueError("row count mismatch with the operator's training inputs")
        c = V.shape[1]
        if np.all(G == 0.0) or np.all(V == 0.0):
            return np.zeros((n, d))

        # channel block per (v, g) pair: [x*g (d), -g (1), x*v (d), -v (1)]
        width = 2 * d + 2
        block = np.empty((n, c * width))
        for t in range(c):
            base = t * width
            block[:, base : base + d] = Xn * G[:, t : t + 1]
            block[:, base + d] = -G[:, t]
            block[:, base + d + 1 : base + 2 * d + 1] = Xn * V[:, t : t + 1]
            block[:, base + 2 * d + 1] = -V[:, t]

        filtered = self._filter(block, self.stencil.derivative_coefficients, self._w_train)

        grad = np.zeros((n, d))
        for t in range(c):
            base = t * width
            A = filtered[:, base : base + d]            # F[x * g]
            B = filtered[:, base + d]                   # F[-g]
            C = filtered[:, base + d + 1 : base + 2 * d + 1]  # F[x * v]
            D = filtered[:, base + 2 * d + 1]           # F[-v]
            v = V[:, t : t + 1]
            g = G[:, t : t + 1]
            grad -= v * A + (v[:, 0] * B)[:, None] * Xn + g * C + (g[:, 0] * D)[:, None] * Xn
        # the derivative stencil is center-normalized; k'(0) re-enters here,
        # exactly once, alongside the outputscale
        return 2.0 * self.spec.outputscale * self.stencil.derivative_scale * grad
