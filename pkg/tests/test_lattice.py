import itertools

import numpy as np
import pytest

from latticegp import lattice
from latticegp.lattice import (
    EmbeddingBasis,
    KeySet,
    MissingKeyError,
    barycentric_weights,
    blur,
    build_plan,
    build_plans,
    canonical_vertices,
    direction_step,
    enclosing_simplex,
    neighbor,
    neighbor_tables,
    slice_at,
    splat,
)
from latticegp.stencil import Stencil


def identity_stencil():
    return Stencil(order=1, spacing=1.0, coefficients=np.array([0.0, 1.0, 0.0]),
                   derivative_coefficients=np.array([0.0, 1.0, 0.0]))


def simple_stencil(c=0.4):
    return Stencil(order=1, spacing=1.0, coefficients=np.array([c, 1.0, c]),
                   derivative_coefficients=np.array([c, 1.0, c]))


class TestEmbedding:
    def test_zero_maps_to_zero(self):
        basis = EmbeddingBasis.for_spacing(3, 1.2)
        np.testing.assert_allclose(basis.embed(np.zeros((1, 3))), 0.0)

    def test_d1_form(self):
        basis = EmbeddingBasis.for_spacing(1, 1.0)
        out = basis.embed(np.array([[0.7]]))[0]
        assert out[0] == pytest.approx(-out[1])

    def test_matches_dense_matrix_and_isometry(self, rng):
        for d in (1, 2, 4, 9):
            basis = EmbeddingBasis.for_spacing(d, 1.3)
            X = rng.standard_normal((60, d))
            E = basis.embed(X)
            np.testing.assert_allclose(E.sum(axis=1), 0.0, atol=1e-9)
            np.testing.assert_allclose(E, X @ basis.dense_matrix().T, atol=1e-9)
            a, b = X[:30], X[30:]
            d_in = np.linalg.norm(a - b, axis=1)
            d_emb = np.linalg.norm(basis.embed(a) - basis.embed(b), axis=1)
            np.testing.assert_allclose(d_emb, basis.scale * d_in, rtol=1e-9)

    def test_rejects_nonfinite(self):
        basis = EmbeddingBasis.for_spacing(2, 1.0)
        with pytest.raises(ValueError):
            basis.embed(np.array([[np.nan, 0.0]]))

    def test_adjacency_pins_the_scale(self, rng):
        # two inputs a spacing apart along a pulled-back lattice direction
        # land on adjacent vertices
        d, s = 4, 1.3
        basis = EmbeddingBasis.for_spacing(d, s)
        for j in range(d + 1):
            step = direction_step(d, j).astype(float)
            u = basis.pullback(step)
            assert np.linalg.norm(u) == pytest.approx(s, rel=1e-12)
            x0 = rng.standard_normal(d) * 0.3
            delta = basis.embed((x0 + u)[None]) - basis.embed(x0[None])
            np.testing.assert_allclose(delta[0], step, atol=1e-9)


class TestEnclosingSimplex:
    def test_on_vertex_weight_one(self):
        d = 3
        key = np.array([4, -4, 8, -8], dtype=float)  # remainder-0 vertex
        keys, _ = enclosing_simplex(key)
        plan = build_plans_from_embedded(key[None, :])
        i = int(np.argmax(plan.weights[0]))
        assert plan.weights[0, i] == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(plan.key_set.keys[plan.key_ids[0, i]], key.astype(int))
        assert any(np.array_equal(k, key.astype(int)) for k in keys)

    def test_d2_centroid_matches_brute_force(self, rng):
        d = 2
        basis = EmbeddingBasis.for_spacing(d, 1.4)
        for _ in range(25):
            p = basis.embed(rng.standard_normal((1, d)) * 2.0)[0]
            keys, _ = enclosing_simplex(p)
            got = {tuple(k) for k in keys}
            near, dist = brute_force_nearest(p, d)
            want = {tuple(k) for k in near}
            if got != want:  # boundary ties: distances must still agree
                got_d = sorted(np.linalg.norm(np.array(sorted(got)) - p, axis=1))
                np.testing.assert_allclose(sorted(dist), got_d, atol=1e-9)

    def test_vertices_contain_point(self, rng):
        for d in (1, 2, 3, 5):
            basis = EmbeddingBasis.for_spacing(d, 1.2)
            P = basis.embed(rng.standard_normal((40, d)))
            for p in P:
                keys, _ = enclosing_simplex(p)
                w = barycentric_weights(p, keys.astype(float))
                assert np.all(w >= -1e-9)
                np.testing.assert_allclose(w.sum(), 1.0, atol=1e-9)

    def test_off_plane_rejected(self):
        with pytest.raises(ValueError):
            enclosing_simplex(np.array([1.0, 1.0, 1.0]))


def build_plans_from_embedded(E):
    """Plan directly from embedded coordinates (test helper)."""
    d = E.shape[1] - 1
    basis = EmbeddingBasis.for_spacing(d, 1.0)
    offsets = canonical_vertices(d)
    rem0, rank, weights = lattice._locate(E)
    n = E.shape[0]
    keys = rem0[:, None, :] + offsets[:, rank].transpose(1, 0, 2)
    key_set, inverse = KeySet.from_rows(keys.reshape(n * (d + 1), d + 1))
    return lattice.SplatPlan(key_set=key_set, key_ids=inverse.reshape(n, d + 1),
                             weights=weights, basis=basis)


def brute_force_nearest(p, d, radius=5, count=None):
    pts = []
    base = np.rint(p / (d + 1)).astype(int)
    for rem in range(d + 1):
        for off in itertools.product(range(-radius, radius + 1), repeat=d):
            cand = (base + np.array(off + (0,))) * (d + 1) + rem
            cand[-1] = -cand[:-1].sum()
            if np.all((cand - rem) % (d + 1) == 0):
                pts.append(cand)
    pts = np.unique(np.array(pts), axis=0)
    dist = np.linalg.norm(pts - p, axis=1)
    order = np.argsort(dist, kind="stable")
    k = count or (d + 1)
    return pts[order[:k]], dist[order[:k]]


class TestBarycentric:
    def test_at_vertex(self):
        verts = canonical_vertices(3).astype(float)
        w = barycentric_weights(verts[1], verts)
        want = np.zeros(4)
        want[1] = 1.0
        np.testing.assert_allclose(w, want, atol=1e-9)

    def test_at_centroid(self):
        verts = canonical_vertices(4).astype(float)
        w = barycentric_weights(verts.mean(axis=0), verts)
        np.testing.assert_allclose(w, np.full(5, 1 / 5), atol=1e-9)

    def test_plan_weights_match_linear_solve(self, rng):
        for d in (2, 3, 6):
            basis = EmbeddingBasis.for_spacing(d, 1.3)
            X = rng.standard_normal((30, d))
            plan = build_plan(X, basis)
            E = basis.embed(X)
            for i in range(0, 30, 7):
                verts = plan.vertex_keys(i).astype(float)
                w = barycentric_weights(E[i], verts)
                np.testing.assert_allclose(np.sort(w), np.sort(plan.weights[i]), atol=1e-8)
                np.testing.assert_allclose(plan.weights[i] @ verts, E[i], atol=1e-8)

    def test_degenerate_vertices_rejected(self):
        verts = np.zeros((3, 3))
        with pytest.raises(ValueError):
            barycentric_weights(np.array([5.0, -1.0, -4.0]), verts)


class TestPlanInvariants:
    def test_weights_and_keys(self, rng):
        for d in (1, 3, 7, 10):
            basis = EmbeddingBasis.for_spacing(d, 1.45)
            X = rng.standard_normal((100, d)) * 2.0
            plan = build_plan(X, basis)
            w = plan.weights
            assert np.all(w >= -1e-12) and np.all(w <= 1 + 1e-12)
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
            keys = plan.key_set.keys
            assert np.all(keys.sum(axis=1) == 0)
            rem = keys[:, :1] % (d + 1)
            assert np.all(keys % (d + 1) == rem)
            # d+1 pairwise-distinct vertices per input
            for i in range(0, 100, 23):
                assert len({tuple(k) for k in plan.vertex_keys(i)}) == d + 1

    def test_sparsity_bounds(self, rng):
        d = 4
        basis = EmbeddingBasis.for_spacing(d, 1.45)
        X = rng.standard_normal((50, d))
        plan = build_plan(X, basis)
        assert plan.key_set.m <= 50 * (d + 1)
        single = build_plan(X[:1], basis)
        assert single.key_set.m == d + 1
        dup = build_plan(np.repeat(X[:1], 20, axis=0), basis)
        assert dup.key_set.m == d + 1

    def test_determinism(self, rng):
        d = 5
        basis = EmbeddingBasis.for_spacing(d, 1.45)
        X = rng.standard_normal((200, d))
        p1 = build_plan(X, basis)
        p2 = build_plan(X.copy(), basis)
        np.testing.assert_array_equal(p1.key_set.keys, p2.key_set.keys)
        np.testing.assert_array_equal(p1.key_ids, p2.key_ids)
        np.testing.assert_array_equal(p1.weights, p2.weights)

    def test_shared_key_set_across_groups(self, rng):
        d = 3
        basis = EmbeddingBasis.for_spacing(d, 1.45)
        A = rng.standard_normal((40, d))
        plans = build_plans([A, A[:10]], basis)
        assert plans[0].key_set is plans[1].key_set
        np.testing.assert_array_equal(plans[0].key_ids[:10], plans[1].key_ids)


class TestSplatSliceBlur:
    def test_splat_zero(self, rng):
        plan = build_plan(rng.standard_normal((10, 2)), EmbeddingBasis.for_spacing(2, 1.4))
        store = splat(plan, np.zeros((10, 3)))
        assert np.all(store.values == 0.0)

    def test_single_input_splat_is_weights(self, rng):
        d = 3
        plan = build_plan(rng.standard_normal((1, d)), EmbeddingBasis.for_spacing(d, 1.4))
        store = splat(plan, np.ones((1, 1)))
        np.testing.assert_allclose(np.sort(store.values[:, 0]),
                                   np.sort(plan.weights[0]), atol=1e-12)

    def test_splat_matches_dense_and_conserves_mass(self, rng):
        d = 2
        plan = build_plan(rng.standard_normal((5, d)), EmbeddingBasis.for_spacing(d, 1.4))
        V = rng.standard_normal((5, 2))
        store = splat(plan, V)
        W = plan.interpolation_matrix().toarray()
        np.testing.assert_allclose(store.values, W.T @ V, atol=1e-12)
        np.testing.assert_allclose(store.values.sum(axis=0), V.sum(axis=0), atol=1e-9)

    def test_slice_of_zero_store(self, rng):
        plan = build_plan(rng.standard_normal((6, 2)), EmbeddingBasis.for_spacing(2, 1.4))
        store = splat(plan, np.zeros(6))
        assert np.all(slice_at(plan, store) == 0.0)

    def test_single_input_round_trip_is_sum_of_squares(self, rng):
        d = 4
        plan = build_plan(rng.standard_normal((1, d)), EmbeddingBasis.for_spacing(d, 1.4))
        out = slice_at(plan, splat(plan, np.ones((1, 1))))
        want = float(np.sum(plan.weights[0] ** 2))
        assert out[0, 0] == pytest.approx(want, rel=1e-12)
        assert out[0, 0] <= 1.0

    def test_slice_matches_dense(self, rng):
        d = 3
        plan = build_plan(rng.standard_normal((5, d)), EmbeddingBasis.for_spacing(d, 1.4))
        vals = rng.standard_normal((plan.key_set.m, 2))
        store = lattice.LatticeStore(key_set=plan.key_set, values=vals)
        W = plan.interpolation_matrix().toarray()
        np.testing.assert_allclose(slice_at(plan, store), W @ vals, atol=1e-12)

    def test_slice_mismatched_store(self, rng):
        basis = EmbeddingBasis.for_spacing(2, 1.4)
        plan_a = build_plan(rng.standard_normal((5, 2)), basis)
        plan_b = build_plan(rng.standard_normal((5, 2)) + 30.0, basis)
        store = splat(plan_b, np.ones(5))
        with pytest.raises(MissingKeyError):
            slice_at(plan_a, store)

    def test_blur_identity_stencil_bit_for_bit(self, rng):
        d = 3
        plan = build_plan(rng.standard_normal((20, d)), EmbeddingBasis.for_spacing(d, 1.4))
        store = splat(plan, rng.standard_normal((20, 2)))
        out = blur(store, identity_stencil())
        np.testing.assert_array_equal(out.values, store.values)

    def test_blur_two_neighbors_hand_case(self):
        # two keys one step apart along direction j: after the direction-j
        # pass values (1, 0) become (1, c); other passes add self-terms only
        d = 2
        key0 = np.zeros(d + 1, dtype=np.int64)
        j = 1
        key1 = neighbor(key0, j, +1)
        key_set = KeySet(np.stack([key0, key1]))
        idx0 = int(key_set.lookup(key0[None, :])[0])
        idx1 = int(key_set.lookup(key1[None, :])[0])
        values = np.zeros((2, 1))
        values[idx0, 0] = 1.0
        store = lattice.LatticeStore(key_set=key_set, values=values)
        c = 0.4
        out = blur(store, simple_stencil(c))
        assert out.values[idx0, 0] == pytest.approx(1.0)
        assert out.values[idx1, 0] == pytest.approx(c)

    def test_blur_matches_dense_convolution_matrices(self, rng):
        from latticegp import oracle
        from latticegp.stencil import Stencil

        d = 3
        plan = build_plan(rng.standard_normal((40, d)), EmbeddingBasis.for_spacing(d, 1.4))
        st = Stencil(order=2, spacing=1.0,
                     coefficients=np.array([0.1, 0.45, 1.0, 0.45, 0.1]),
                     derivative_coefficients=np.array([0.1, 0.45, 1.0, 0.45, 0.1]))
        vals = rng.standard_normal((plan.key_set.m, 3))
        store = lattice.LatticeStore(key_set=plan.key_set, values=vals)
        out = blur(store, st)
        _, cs = oracle.dense_lattice_reconstruction(plan, st)
        dense = oracle.compose_blur(cs) @ vals
        np.testing.assert_allclose(out.values, dense, atol=1e-10)

    def test_blur_linearity(self, rng):
        d = 2
        plan = build_plan(rng.standard_normal((30, d)), EmbeddingBasis.for_spacing(d, 1.4))
        st = simple_stencil()
        A = rng.standard_normal((plan.key_set.m, 1))
        B = rng.standard_normal((plan.key_set.m, 1))
        mk = lambda v: lattice.LatticeStore(key_set=plan.key_set, values=v)
        lhs = blur(mk(2.0 * A + 3.0 * B), st).values
        rhs = 2.0 * blur(mk(A), st).values + 3.0 * blur(mk(B), st).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestNeighbor:
    def test_offset_zero_identity(self):
        key = np.array([3, -1, -1, -1])
        np.testing.assert_array_equal(neighbor(key, 0, 0), key)

    def test_round_trip(self):
        key = np.array([4, 0, -4, 0], dtype=np.int64)
        for j in range(4):
            np.testing.assert_array_equal(neighbor(neighbor(key, j, +1), j, -1), key)

    def test_result_sums_to_zero(self):
        key = np.array([5, -5, 0], dtype=np.int64)
        for j in range(3):
            assert neighbor(key, j, 2).sum() == 0

    def test_canonical_vertices_are_one_step_apart(self):
        for d in (2, 4, 6):
            verts = canonical_vertices(d)
            for k in range(1, d + 1):
                diff = verts[k] - verts[k - 1]
                j = int(np.argmin(diff))
                np.testing.assert_array_equal(diff, -direction_step(d, j))

    def test_neighbor_tables_match_lookup(self, rng):
        d = 3
        plan = build_plan(rng.standard_normal((25, d)), EmbeddingBasis.for_spacing(d, 1.4))
        ks = plan.key_set
        tables = neighbor_tables(ks, 1)
        for j in range(d + 1):
            want = ks.lookup(ks.keys + direction_step(d, j))
            got = tables[j, 1, :]  # offsets ordered (-1, +1)
            np.testing.assert_array_equal(np.where(want < 0, ks.m, want), got)


class TestAdjointness:
    def test_splat_slice_are_transposes(self, rng):
        # <slice(A), B> = <A, splat(B)> over random conforming blocks
        total = 0
        for d in (1, 2, 4, 7, 10):
            basis = EmbeddingBasis.for_spacing(d, 1.45)
            X = rng.standard_normal((200, d)) * 1.5
            plan = build_plan(X, basis)
            A = rng.standard_normal((plan.key_set.m, 2))
            B = rng.standard_normal((200, 2))
            store = lattice.LatticeStore(key_set=plan.key_set, values=A)
            lhs = float(np.sum(slice_at(plan, store) * B))
            rhs = float(np.sum(A * splat(plan, B).values))
            assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), abs(rhs), 1.0)
            total += 200
        assert total == 1000
