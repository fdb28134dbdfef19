"""Sparse simplicial lattice: embedding, simplex location, splat/blur/slice.

Inputs are embedded into the hyperplane H_d of (d+1)-vectors summing to
zero, where a simplicial tiling (permutations of one canonical simplex, the
permutohedral lattice) provides d+1 enclosing vertices per point instead of
the 2^d of a rectangular grid.  Vertices are integer keys stored sparsely;
values move between inputs and vertices through barycentric interpolation
(splat / slice) and are convolved along each of the d+1 lattice directions
(blur).

Conventions pinned here:

* A key is a (d+1)-vector of integers summing to zero, all congruent
  modulo d+1; the shared residue is the vertex "remainder".
* The embedding is a uniform scaled isometry with scale chosen so that one
  lattice step equals the stencil spacing in normalized input units.
* Simplex location rounds to the nearest remainder-0 point (round half to
  even per coordinate), then rank-sorts the rounding residuals; rank ties
  break by coordinate index.
* The blur applies directions in ascending order 0..d; missing neighbors
  read as zero and the key set never grows during a blur.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class MissingKeyError(KeyError):
    """A slice plan referenced a key absent from the store."""


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingBasis:
    """Linear map R^d -> H_d that is a uniform scaled isometry.

    Column i (1-based) of the underlying basis is [1]*i, -i, [0]*(d-i),
    orthogonal with norm sqrt(i(i+1)); dividing by that norm and multiplying
    by ``scale`` makes ||E x - E x'|| = scale * ||x - x'|| exactly.
    """

    dim: int
    scale: float
    _factors: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        i = np.arange(1, self.dim + 1, dtype=float)
        object.__setattr__(self, "_factors", self.scale / np.sqrt(i * (i + 1.0)))

    @classmethod
    def for_spacing(cls, dim: int, spacing: float) -> "EmbeddingBasis":
        """Scale such that adjacent lattice vertices are ``spacing`` apart in
        normalized input space (lattice step length is sqrt(d(d+1)))."""
        if spacing <= 0:
            raise ValueError("spacing must be positive")
        return cls(dim=dim, scale=float(np.sqrt(dim * (dim + 1.0)) / spacing))

    def embed(self, X: np.ndarray) -> np.ndarray:
        """Map normalized inputs (n, d) onto H_d in O(d) per point."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim}-dimensional inputs")
        if not np.all(np.isfinite(X)):
            raise ValueError("inputs must be finite")
        n, d = X.shape
        scaled = X * self._factors
        out = np.empty((n, d + 1))
        # suffix sums give elevated[i] = sum_{j>i} c_j - i * c_i, elevated[0] = sum c_j
        suffix = np.zeros((n, d + 1))
        suffix[:, :d] = np.cumsum(scaled[:, ::-1], axis=1)[:, ::-1]
        out[:, 0] = suffix[:, 0]
        out[:, 1:] = suffix[:, 1:] - np.arange(1, d + 1) * scaled
        return out

    def dense_matrix(self) -> np.ndarray:
        """Explicit (d+1, d) matrix of the embedding, for verification."""
        d = self.dim
        B = np.zeros((d + 1, d))
        for i in range(1, d + 1):
            B[:i, i - 1] = 1.0
            B[i, i - 1] = -float(i)
        return B * (self._factors[None, :])

    def pullback(self, vec: np.ndarray) -> np.ndarray:
        """Preimage in R^d of a vector lying in H_d."""
        B = self.dense_matrix()
        return B.T @ np.asarray(vec, dtype=float) / (self.scale**2)


# ---------------------------------------------------------------------------
# keys
# ---------------------------------------------------------------------------


def direction_step(dim: int, direction: int) -> np.ndarray:
    """Integer lattice offset of one +1 step along a direction (0..d)."""
    if not 0 <= direction <= dim:
        raise ValueError(f"direction must be in 0..{dim}")
    step = -np.ones(dim + 1, dtype=np.int64)
    step[direction] = dim
    return step


def neighbor(key: np.ndarray, direction: int, offset: int) -> np.ndarray:
    """Key displaced ``offset`` steps along a lattice direction."""
    key = np.asarray(key, dtype=np.int64)
    return key + offset * direction_step(key.shape[-1] - 1, direction)


def canonical_vertices(dim: int) -> np.ndarray:
    """Vertices of the canonical simplex, rows k = 0..d: (d+1-k) entries of k
    followed by k entries of k-(d+1)."""
    ks = np.arange(dim + 1)
    return np.where(ks[None, :] <= dim - ks[:, None], ks[:, None], ks[:, None] - (dim + 1)).astype(np.int64)


def is_valid_key(key: np.ndarray) -> bool:
    key = np.asarray(key)
    d = key.shape[-1] - 1
    return int(key.sum()) == 0 and len(set(np.asarray(key) % (d + 1))) == 1


class KeySet:
    """Deduplicated lattice keys with exact, vectorized lookup.

    Keys are kept in a canonical sorted order (np.unique row order) so that
    identical inputs always produce identical indexing.
    """

    def __init__(self, keys: np.ndarray):
        self.keys = np.ascontiguousarray(np.asarray(keys, dtype=np.int64))
        if self.keys.ndim != 2:
            raise ValueError("keys must be a (m, d+1) array")

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> tuple["KeySet", np.ndarray]:
        """Deduplicate key rows; returns the set and per-row indices into it."""
        uniq, inverse = np.unique(np.asarray(rows, dtype=np.int64), axis=0, return_inverse=True)
        return cls(uniq), inverse.reshape(-1).astype(np.int64)

    @property
    def m(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1] - 1

    def lookup(self, queries: np.ndarray) -> np.ndarray:
        """Indices of query key rows, -1 where absent.  Exact row equality."""
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.int64))
        if q.ndim != 2 or q.shape[1] != self.keys.shape[1]:
            raise ValueError("query shape mismatch")
        if q.shape[0] == 0:
            return np.empty(0, dtype=np.int64)
        stacked = np.concatenate([self.keys, q], axis=0)
        uniq, inverse = np.unique(stacked, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        owner = np.full(uniq.shape[0], -1, dtype=np.int64)
        owner[inverse[: self.m]] = np.arange(self.m)
        return owner[inverse[self.m:]]


# ---------------------------------------------------------------------------
# splat plan
# ---------------------------------------------------------------------------


@dataclass
class SplatPlan:
    """Per-input barycentric interpolation onto d+1 enclosing vertices.

    ``key_ids[i, k]`` indexes ``key_set.keys``; ``weights[i, k]`` is the
    matching barycentric weight.  Row k of the plan corresponds to the
    remainder-k vertex of the enclosing simplex.
    """

    key_set: KeySet
    key_ids: np.ndarray
    weights: np.ndarray
    basis: EmbeddingBasis

    @property
    def n(self) -> int:
        return self.key_ids.shape[0]

    @property
    def dim(self) -> int:
        return self.key_set.dim

    def vertex_keys(self, i: int) -> np.ndarray:
        return self.key_set.keys[self.key_ids[i]]

    def interpolation_matrix(self) -> sp.csr_matrix:
        """Sparse (n, m) matrix W with the barycentric weights as rows."""
        n, k = self.key_ids.shape
        indptr = np.arange(n + 1) * k
        return sp.csr_matrix(
            (self.weights.reshape(-1), self.key_ids.reshape(-1), indptr),
            shape=(n, self.key_set.m),
        )


def _locate(embedded: np.ndarray):
    """Enclosing-simplex location for embedded points (n, d+1).

    Returns (rem0, rank, weights): the nearest remainder-0 vertex, the
    descending rank of each coordinate's rounding residual, and the d+1
    barycentric weights ordered by vertex remainder.
    """
    E = np.atleast_2d(embedded)
    n, dp1 = E.shape
    d = dp1 - 1
    rows = np.arange(n)[:, None]

    # nearest multiple of (d+1) per coordinate (ties: round half to even)
    rem0 = np.rint(E / (d + 1)) * (d + 1)
    disp = E - rem0
    order = np.argsort(-disp, axis=1, kind="stable")
    rank = np.empty_like(order)
    rank[rows, order] = np.arange(dp1)[None, :]

    # rounded point may be off the sum-zero plane; walk the extreme
    # residuals back onto it, wrapping ranks accordingly
    h = np.rint(rem0.sum(axis=1) / (d + 1)).astype(np.int64)
    rank = rank + h[:, None]
    low = rank < 0
    high = rank > d
    rank[low] += d + 1
    rem0[low] += d + 1
    rank[high] -= d + 1
    rem0[high] -= d + 1

    # barycentric weights from consecutive gaps of the sorted residuals
    t = (E - rem0) / (d + 1)
    bary = np.zeros((n, d + 2))
    np.add.at(bary, (rows, d - rank), t)
    np.add.at(bary, (rows, d + 1 - rank), -t)
    bary[:, 0] += 1.0 + bary[:, d + 1]
    return rem0.astype(np.int64), rank, bary[:, : d + 1]


def enclosing_simplex(point: np.ndarray):
    """Vertices (d+1 keys, remainder order) and residual ranks for one point
    in H_d.  The point must sum to zero within tolerance."""
    p = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    if abs(p.sum()) > 1e-6 * max(1.0, np.abs(p).max()):
        raise ValueError("point does not lie in the sum-zero hyperplane")
    d = p.shape[0] - 1
    rem0, rank, _ = _locate(p[None, :])
    offsets = canonical_vertices(d)
    keys = rem0[0][None, :] + offsets[:, rank[0]]
    return keys, rank[0]


def barycentric_weights(point: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Convex coordinates of ``point`` in the simplex spanned by ``vertices``
    ((d+1, d+1) rows).  Solves the affine system directly."""
    p = np.asarray(point, dtype=float)
    V = np.asarray(vertices, dtype=float)
    k = V.shape[0]
    A = np.concatenate([V.T, np.ones((1, k))], axis=0)
    b = np.concatenate([p, [1.0]])
    w, *_ = np.linalg.lstsq(A, b, rcond=None)
    resid = A @ w - b
    if np.abs(resid).max() > 1e-6:
        raise ValueError("degenerate vertex set")
    return w


def build_plans(groups: Sequence[np.ndarray], basis: EmbeddingBasis) -> list[SplatPlan]:
    """Splat plans for one or more input groups over a single shared key set.

    Sharing the key set lets cross-covariance filtering splat with one plan
    and slice with another.
    """
    if len(groups) == 0:
        raise ValueError("at least one input group required")
    offsets = canonical_vertices(basis.dim)
    all_keys = []
    located = []
    for X in groups:
        E = basis.embed(X)
        rem0, rank, weights = _locate(E)
        n, dp1 = E.shape
        keys = rem0[:, None, :] + offsets[:, rank].transpose(1, 0, 2)
        all_keys.append(keys.reshape(n * dp1, dp1))
        located.append((weights, n, dp1))
    key_set, inverse = KeySet.from_rows(np.concatenate(all_keys, axis=0))
    plans = []
    start = 0
    for (weights, n, dp1) in located:
        ids = inverse[start : start + n * dp1].reshape(n, dp1)
        start += n * dp1
        plans.append(SplatPlan(key_set=key_set, key_ids=ids, weights=weights, basis=basis))
    return plans


def build_plan(X: np.ndarray, basis: EmbeddingBasis) -> SplatPlan:
    return build_plans([X], basis)[0]


# ---------------------------------------------------------------------------
# store and the three filtering stages
# ---------------------------------------------------------------------------


@dataclass
class LatticeStore:
    """Values accumulated at lattice vertices: (m, c) per-channel array."""

    key_set: KeySet
    values: np.ndarray

    @property
    def m(self) -> int:
        return self.key_set.m


def splat(plan: SplatPlan, V: np.ndarray) -> LatticeStore:
    """Scatter input values onto the plan's vertices (the W^T action)."""
    V = np.asarray(V, dtype=float)
    squeeze = V.ndim == 1
    V2 = V[:, None] if squeeze else V
    if V2.shape[0] != plan.n:
        raise ValueError(f"expected {plan.n} value rows, got {V2.shape[0]}")
    acc = plan.interpolation_matrix().T @ V2
    return LatticeStore(key_set=plan.key_set, values=np.asarray(acc))


def slice_at(plan: SplatPlan, store: LatticeStore) -> np.ndarray:
    """Resample store values at the plan's inputs (the W action)."""
    if store.key_set is not plan.key_set:
        if store.key_set.m != plan.key_set.m or not np.array_equal(
            store.key_set.keys, plan.key_set.keys
        ):
            raise MissingKeyError("plan and store were built over different key sets")
    return plan.interpolation_matrix() @ store.values


def neighbor_tables(key_set: KeySet, order: int) -> np.ndarray:
    """Neighbor indices for every (direction, offset) pair.

    Shape (d+1, 2*order, m); entry [j, t, a] is the index of key_a displaced
    by offset o along direction j, where t enumerates offsets
    (-order..-1, 1..order); missing neighbors hold m (a zero sentinel row).
    """
    d = key_set.dim
    m = key_set.m
    offs = [o for o in range(-order, order + 1) if o != 0]
    tables = np.full((d + 1, len(offs), m), m, dtype=np.int64)
    if order == 0 or m == 0:
        return tables
    queries = []
    for j in range(d + 1):
        step = direction_step(d, j)
        for o in offs:
            queries.append(key_set.keys + o * step)
    found = key_set.lookup(np.concatenate(queries, axis=0))
    found = np.where(found < 0, m, found)
    tables[...] = found.reshape(d + 1, len(offs), m)
    return tables


def blur_values(
    values: np.ndarray,
    coefficients: np.ndarray,
    tables: np.ndarray,
    descending: bool = False,
) -> np.ndarray:
    """Sequential per-direction convolution of vertex values.

    ``coefficients`` is the full symmetric stencil c_{-r..r} (length 2r+1);
    ``tables`` comes from :func:`neighbor_tables`.  Directions apply in
    ascending order 0..d unless ``descending``.
    """
    coefficients = np.asarray(coefficients, dtype=float)
    r = (coefficients.shape[0] - 1) // 2
    m = values.shape[0]
    dplus1 = tables.shape[0]
    padded = np.zeros((m + 1,) + values.shape[1:])
    out = values
    dirs = range(dplus1 - 1, -1, -1) if descending else range(dplus1)
    for j in dirs:
        padded[:m] = out
        padded[m] = 0.0
        nxt = coefficients[r] * out
        t = 0
        for o in range(-r, r + 1):
            if o == 0:
                continue
            c = coefficients[r + o]
            if c != 0.0:
                nxt = nxt + c * padded[tables[j, t]]
            t += 1
        out = nxt
    return out


def blur(store: LatticeStore, stencil, symmetrize: bool = False) -> LatticeStore:
    """Convolve a store along every lattice direction with a stencil.

    ``stencil`` provides ``order`` and ``coefficients`` (see the stencil
    module); the key set is unchanged and missing neighbors read as zero.
    With ``symmetrize``, the ascending and descending direction orders are
    averaged, making the composed operator exactly symmetric.
    """
    tables = neighbor_tables(store.key_set, stencil.order)
    vals = blur_values(store.values, stencil.coefficients, tables)
    if symmetrize:
        vals = 0.5 * (vals + blur_values(store.values, stencil.coefficients, tables, descending=True))
    return LatticeStore(key_set=store.key_set, values=vals)
