"""Acceptance suite: one test per release criterion.

Each test prints a `[criterion N] PASS` line (run with `pytest -s -v` to see
them inline).  The two UCI reproductions need the datasets on disk (see
docs/datasets.md); they skip with instructions when the files are absent.
"""

import json
import math
import os
import time
import tracemalloc
from pathlib import Path

import numpy as np
import pytest

from conftest import cosine, gp_sample, make_spec
from latticegp import cli, oracle, solver, trainer
from latticegp.data import SplitSpec, load_csv, split_standardize, synthetic_inputs
from latticegp.filtering import LatticeOperator
from latticegp.kernels import profile
from latticegp.solver import CGConfig, GPModel, ProbeSet, Standardization
from latticegp.stencil import find_spacing
from latticegp.trainer import TrainConfig, fit, mll_gradients

BASELINE_DIR = Path(__file__).parent / "baselines"
DATA_DIR = Path(os.environ.get("LATTICEGP_DATA_DIR", Path(__file__).parent.parent / "data" / "uci"))

PROTEIN = DATA_DIR / "protein.csv"
ELEVATORS = DATA_DIR / "elevators.csv"
SKIP_NOTE = (
    "dataset file not found: {path} — fetch instructions in docs/datasets.md "
    "(UCI downloads are not possible in offline environments)"
)


def ok(num, detail):
    print(f"\n[criterion {num}] PASS — {detail}")


def test_criterion_1_dense_reconstruction_equivalence():
    rng = np.random.default_rng(42)
    worst = 0.0
    cases = 0
    while cases < 100:
        d = int(rng.integers(1, 5))
        r = int(rng.integers(0, 3))
        fam = ("rbf", "matern32")[int(rng.integers(0, 2))]
        n = int(rng.integers(5, 51))
        X = rng.standard_normal((n, d)) * float(rng.uniform(0.5, 2.0))
        spec = make_spec(fam, d=d, ell=float(rng.uniform(0.6, 1.8)),
                         outputscale=float(rng.uniform(0.5, 2.0)))
        op = LatticeOperator.build(spec, X, order=r)
        dense = oracle.dense_operator(op)
        v = rng.standard_normal(n)
        got = op.mvm(v)
        want = dense @ v
        rel = np.abs(got - want).max() / max(np.abs(want).max(), 1e-300)
        worst = max(worst, rel)
        assert rel <= 1e-8, f"case {cases}: d={d} r={r} {fam} rel={rel}"
        cases += 1
    ok(1, f"100 instances, max relative error {worst:.3e} <= 1e-8")


def test_criterion_2_stencil_closed_form():
    errs = []
    for m in (3, 5, 7):
        r = (m - 1) // 2
        got = find_spacing(profile("rbf"), r, tol=1e-6)
        want = math.sqrt(2 * math.pi / m)
        errs.append(abs(got - want))
        assert abs(got - want) <= 1e-3, f"m={m}: {got} vs {want}"
    ok(2, "spacing matches sqrt(2*pi/m) for m in {3,5,7}; errors "
          + ", ".join(f"{e:.2e}" for e in errs))


def test_criterion_3_adjointness_and_barycentric_validity():
    from latticegp.lattice import EmbeddingBasis, LatticeStore, build_plan, slice_at, splat

    rng = np.random.default_rng(7)
    total = 0
    worst_adj = 0.0
    worst_recon = 0.0
    for d in (1, 2, 3, 5, 7, 10):
        n = 167 if d < 10 else 165
        basis = EmbeddingBasis.for_spacing(d, 1.4472)
        X = rng.standard_normal((n, d)) * 2.0
        plan = build_plan(X, basis)
        w = plan.weights
        assert np.all(w >= -1e-12), f"negative weight at d={d}"
        assert np.abs(w.sum(axis=1) - 1.0).max() <= 1e-9
        E = basis.embed(X)
        recon = np.einsum("nk,nkj->nj", w, plan.key_set.keys[plan.key_ids].astype(float))
        worst_recon = max(worst_recon, np.abs(recon - E).max())
        assert np.abs(recon - E).max() <= 1e-8

        A = rng.standard_normal((plan.key_set.m, 2))
        B = rng.standard_normal((n, 2))
        lhs = float(np.sum(slice_at(plan, LatticeStore(plan.key_set, A)) * B))
        rhs = float(np.sum(A * splat(plan, B).values))
        rel = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
        worst_adj = max(worst_adj, rel)
        assert rel <= 1e-9
        total += n
    assert total >= 1000
    ok(3, f"{total} inputs over d<=10: adjointness rel {worst_adj:.2e} <= 1e-9, "
          f"reconstruction {worst_recon:.2e} <= 1e-8")


def test_criterion_4_mvm_fidelity_regression_pinned():
    BASELINE_DIR.mkdir(exist_ok=True)
    baseline_path = BASELINE_DIR / "mvm_fidelity.json"
    measured = {}
    for d in (3, 9):
        rng = np.random.default_rng(2000 + d)
        n = 2000
        X = rng.standard_normal((n, d))
        spec = make_spec("rbf", d=d, ell=1.0)
        op = LatticeOperator.build(spec, X, order=1)
        v = rng.standard_normal(n)
        z = oracle.exact_mvm(X, v, spec)
        z_hat = op.mvm(v)
        err = 1.0 - cosine(z, z_hat)
        measured[f"rbf_d{d}_r1"] = err
        assert err <= 0.3, f"d={d}: cosine error {err} exceeds the hard ceiling"
    if baseline_path.exists():
        stored = json.loads(baseline_path.read_text())
        for key, err in measured.items():
            base = stored[key]
            assert abs(err - base) <= 0.2 * base, (
                f"{key}: measured {err:.5f} drifted beyond ±20% of baseline {base:.5f}")
        note = "regression-pinned against stored baseline"
    else:
        baseline_path.write_text(json.dumps(measured, indent=2) + "\n")
        note = "baseline stored at first build"
    ok(4, f"cosine errors {', '.join(f'{k}={v:.4f}' for k, v in measured.items())} "
          f"(ceiling 0.3; {note})")


def test_criterion_5_gradient_fidelity():
    rng = np.random.default_rng(5)
    n, d = 500, 3
    X = rng.standard_normal((n, d))
    spec = make_spec("rbf", d=d, ell=2.0)
    op = LatticeOperator.build(spec, X, order=1)
    v = rng.standard_normal(n)
    g = rng.standard_normal(n)
    got = op.gradient_filter(v, g, spec.normalize(X))
    want = oracle.exact_gradient(X, v, g, spec)
    cos = cosine(got, want)
    assert cos >= 0.95, f"filtered-gradient cosine {cos}"

    # the dense gradient itself is validated against finite differences
    n2, d2 = 40, 3
    X2 = rng.standard_normal((n2, d2))
    spec2 = make_spec("rbf", d=d2)
    v2 = rng.standard_normal(n2)
    g2 = rng.standard_normal(n2)

    def form(Xf):
        K = spec2.outputscale * spec2.profile.value(oracle._pairwise_sq_dists(Xf, Xf))
        return float(g2 @ (K @ v2))

    dense = oracle.exact_gradient(X2, v2, g2, spec2)
    h = 1e-6
    fd = np.zeros_like(dense)
    for i in range(n2):
        for j in range(d2):
            Xp = X2.copy(); Xp[i, j] += h
            Xm = X2.copy(); Xm[i, j] -= h
            fd[i, j] = (form(Xp) - form(Xm)) / (2 * h)
    fd_rel = np.abs(dense - fd).max() / np.abs(fd).max()
    assert fd_rel < 1e-5
    ok(5, f"filter-vs-dense cosine {cos:.4f} >= 0.95; dense-vs-FD rel {fd_rel:.2e} < 1e-5")


def test_criterion_6_solver_correctness():
    rng = np.random.default_rng(6)

    # (a) CG matches a direct factorization solve
    n = 300
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = (Q * np.linspace(1.0, 80.0, n)) @ Q.T
    b = rng.standard_normal(n)
    rep = solver.cg_solve(lambda v: A @ v, b, CGConfig(tolerance=1e-8, max_iterations=3000))
    want = np.linalg.solve(A, b)
    cg_rel = np.linalg.norm(rep.solution - want) / np.linalg.norm(want)
    assert cg_rel <= 1e-6

    # (b) stochastic MLL against the Cholesky MLL of the same operator,
    #     i.e. the dense reconstruction of the (symmetrized) lattice filter;
    #     the gap to the exact-kernel MLL is fidelity, recorded not gated
    d = 3
    X = rng.standard_normal((n, d))
    spec = make_spec("rbf", d=d, ell=2.0, noise=1.0)
    y = gp_sample(X, spec, seed=6)
    model = GPModel.from_training_solve(
        spec, X, y, Standardization.identity(d), symmetrize=True,
        cg_eval=CGConfig(tolerance=1e-8, max_iterations=2000))
    est = solver.mll(model, y, probes=ProbeSet.rademacher(n, 64, seed=64),
                     lanczos_steps=100)
    A_lat = oracle.dense_operator(model.operator()) + spec.noise_variance * np.eye(n)
    A_lat = 0.5 * (A_lat + A_lat.T)
    L = np.linalg.cholesky(A_lat)
    chol_mll = (-0.5 * y @ np.linalg.solve(A_lat, y) - np.sum(np.log(np.diag(L)))
                - 0.5 * n * math.log(2 * math.pi))
    mll_rel = abs(est.value - chol_mll) / abs(chol_mll)
    assert mll_rel <= 0.02
    exact_gap = abs(est.value - oracle.exact_gp(X, y, X[:1], spec).mll) / abs(chol_mll)

    # (c) every stochastic gradient component within 3 probe standard errors
    #     of the dense analytic gradient of the same (lattice) objective
    from test_trainer import lattice_objective_gradient

    model_g = GPModel.from_training_solve(
        spec, X, y, Standardization.identity(d), symmetrize=True,
        cg_eval=CGConfig(tolerance=1e-10, max_iterations=3000))
    target = lattice_objective_gradient(model_g, y)
    draws = np.array([
        mll_gradients(model_g, y, ProbeSet.rademacher(n, 16, seed=600 + t))
        for t in range(12)
    ])
    se = np.maximum(draws.std(axis=0, ddof=1), 1e-12)
    bias = np.abs(draws.mean(axis=0) - target)
    assert np.all(bias <= 3.0 * se), f"bias/se = {bias / se}"
    # diagnostic only: direction agreement with the exact-kernel gradient
    _, exact_grad = oracle.exact_mll_gradients(X, y, spec)
    diag_cos = cosine(draws.mean(axis=0), exact_grad)

    ok(6, f"CG rel {cg_rel:.2e} <= 1e-6; SLQ MLL rel {mll_rel:.3%} <= 2% "
          f"(exact-kernel fidelity gap {exact_gap:.3%}, recorded); gradient bias/SE "
          f"max {float((bias / se).max()):.2f} <= 3 (exact-kernel direction cosine "
          f"{diag_cos:.2f}, recorded)")


def _uci_rmse(path, target, seeds, family="matern32"):
    ds = load_csv(str(path), target_column=target)
    rmses = []
    for seed in seeds:
        train, val, test = split_standardize(ds, SplitSpec(seed=seed))
        cfg = TrainConfig(max_epochs=100, probes=16, patience=10, seed=seed,
                          noise_floor=1e-4, trace_mll=False)
        model, _ = fit(train.X, train.y, val.X, val.y, family, cfg, stats=train.stats)
        pred_std = model.joint_operator(test.X).cross_mvm(model.alpha)
        rmses.append(float(np.sqrt(np.mean((pred_std - test.y) ** 2))))
    return np.asarray(rmses), ds


@pytest.mark.skipif(not PROTEIN.exists(), reason=SKIP_NOTE.format(path=PROTEIN))
def test_criterion_7a_protein_rmse():
    seeds = range(int(os.environ.get("LATTICEGP_UCI_SEEDS", "3")))
    rmses, ds = _uci_rmse(PROTEIN, "RMSD", seeds)
    assert ds.dim == 9 and ds.n == 45730
    mean_rmse = float(rmses.mean())
    assert abs(mean_rmse - 0.571) <= 0.05, f"Protein RMSE {rmses}"
    ok("7a", f"Protein standardized test RMSE {mean_rmse:.3f} within 0.571 ± 0.05 "
             f"(per-seed {np.round(rmses, 3)})")


@pytest.mark.skipif(not ELEVATORS.exists(), reason=SKIP_NOTE.format(path=ELEVATORS))
def test_criterion_7b_elevators_rmse():
    seeds = range(int(os.environ.get("LATTICEGP_UCI_SEEDS", "3")))
    rmses, ds = _uci_rmse(ELEVATORS, None, seeds)
    assert ds.dim == 17 and ds.n == 16599
    mean_rmse = float(rmses.mean())
    assert abs(mean_rmse - 0.510) <= 0.07, f"Elevators RMSE {rmses}"
    ok("7b", f"Elevators standardized test RMSE {mean_rmse:.3f} within 0.510 ± 0.07 "
             f"(per-seed {np.round(rmses, 3)})")


def test_criterion_8_sparsity_properties():
    rng = np.random.default_rng(8)
    # worst-case bound and the single-input identity
    for d in (2, 5, 9):
        spec = make_spec("rbf", d=d, ell=0.8)
        X = rng.standard_normal((300, d))
        op = LatticeOperator.build(spec, X)
        assert op.m <= 300 * (d + 1)
        single = LatticeOperator.build(spec, X[:1])
        assert single.m == d + 1
    # clustered data at growing lengthscale: occupancy ratio shrinks
    ratios = []
    X = synthetic_inputs(2000, 4, seed=1, clusters=12, cluster_scale=0.05)
    for ell in (0.25, 0.5, 1.0, 2.0):
        spec = make_spec("rbf", d=4, ell=ell)
        op = LatticeOperator.build(spec, X)
        ratios.append(op.m / (2000 * 5))
    assert all(b < a for a, b in zip(ratios, ratios[1:])), ratios
    assert ratios[-1] < 0.2
    detail = (f"m <= n(d+1) and single-input m = d+1 hold; clustered m/L falls "
              f"{ratios[0]:.3f} -> {ratios[-1]:.4f} as lengthscale grows")
    if PROTEIN.exists():
        ds = load_csv(str(PROTEIN), target_column="RMSD")
        train, val, test = split_standardize(ds, SplitSpec(seed=0))
        cfg = TrainConfig(max_epochs=30, probes=8, patience=8, seed=0, trace_mll=False)
        model, _ = fit(train.X, train.y, val.X, val.y, "matern32", cfg, stats=train.stats)
        m_over_l = model.operator().m / (train.n * (ds.dim + 1))
        assert m_over_l < 0.2, f"Protein m/L {m_over_l}"
        detail += f"; Protein learned-lengthscale m/L = {m_over_l:.4f} < 0.2"
    else:
        detail += "; Protein m/L check skipped (dataset absent, see docs/datasets.md)"
    ok(8, detail)


def test_criterion_9_scaling():
    rng = np.random.default_rng(9)
    d = 9
    spec = make_spec("rbf", d=d, ell=1.0)
    times = []
    mems = []
    for n in (10_000, 20_000, 40_000):
        X = rng.standard_normal((n, d))
        v = rng.standard_normal(n)
        tracemalloc.start()
        op = LatticeOperator.build(spec, X, order=1)
        best = math.inf
        for _ in range(3):
            t0 = time.perf_counter()
            op.mvm(v)
            best = min(best, time.perf_counter() - t0)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        times.append(best)
        mems.append(peak)
        del op
    t_ratios = [times[1] / times[0], times[2] / times[1]]
    assert all(r <= 2.5 for r in t_ratios), f"time ratios {t_ratios}"
    mem_ratio = mems[2] / mems[0]
    assert mem_ratio < 8.0, f"memory grew {mem_ratio}x over 4x data (quadratic would be 16x)"
    ok(9, f"MVM times {['%.1fms' % (t * 1e3) for t in times]}, doubling ratios "
          f"{[round(r, 2) for r in t_ratios]} <= 2.5; peak-memory ratio over 4x data "
          f"{mem_ratio:.2f} (sub-quadratic)")


def _trace_run(data_path, tol_train, out_path, max_epochs="6"):
    rc = cli.main([
        "train", "--data", str(data_path), "--out", str(out_path),
        "--max-epochs", max_epochs, "--probes", "4", "--patience", "100",
        "--tol-train", str(tol_train), "--family", "rbf", "--nll-points", "32",
    ])
    assert rc == 0
    return json.loads(Path(out_path).read_text())


def test_criterion_10_training_stability_traces(tmp_path):
    from latticegp.data import save_csv, synthetic_regression

    if PROTEIN.exists():
        data_path = PROTEIN
        note = "Protein"
        epochs = "10"
    else:
        data_path = tmp_path / "synthetic.csv"
        save_csv(str(data_path), synthetic_regression(400, 3, seed=10))
        note = "synthetic stand-in (Protein absent, see docs/datasets.md)"
        epochs = "6"
    for tol in (1.0, 1e-4):
        metrics = _trace_run(data_path, tol, tmp_path / f"trace_{tol}.json", epochs)
        trace = metrics["trace"]
        n_epochs = len(trace["val_rmse"])
        assert n_epochs == int(epochs)
        assert len(trace["mll"]) == n_epochs
        assert len(trace["hyperparameters"]) == n_epochs
        assert len(trace["cg_iterations"]) == n_epochs
        assert all(np.isfinite(v) for v in trace["mll"])
        assert all(np.isfinite(v) for v in trace["val_rmse"])
        assert metrics["config"]["cg"]["tol_train"] == tol
    ok(10, f"per-epoch MLL and validation-RMSE traces complete for cg.tol_train in "
           f"{{1.0, 1e-4}} on {note}")
