"""Command-line surface: train / predict / mvm-bench / sparsity / stencil /
compare-ard / dump-lattice.

Configuration comes from a YAML file with a fixed key schema (unknown keys
are rejected); every knob also has a command-line flag, and flags win on
conflict.  Metrics are written as JSON next to a human-readable summary on
standard output.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
import time
from typing import Optional

import numpy as np
import yaml

from . import data as data_mod
from . import oracle, solver, trainer
from .filtering import LatticeOperator
from .kernels import StationaryKernelSpec, profile
from .stencil import build_stencil


class ConfigError(ValueError):
    """Unknown or malformed configuration key."""


DEFAULT_CONFIG = {
    "data": {"path": None, "target": None},
    "kernel": {"family": "matern32", "order": 1, "noise_floor": 1e-4},
    "train": {
        "lr": 0.1,
        "max_epochs": 100,
        "probes": 16,
        "patience": 10,
        "seed": 0,
        "trace_mll": True,
    },
    "cg": {
        "tol_train": 1.0,
        "tol_eval": 0.01,
        "max_iters": 500,
        "min_iters": 10,
        "max_lanczos": 100,
    },
    "lattice": {"symmetrize": False},
    "split": {"seed": 0, "fractions": [4.0 / 9.0, 2.0 / 9.0, 3.0 / 9.0]},
    "eval": {"nll_points": 1024},
}


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown configuration key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {where} must be a mapping")
            out[key] = _merge_config(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path) as fh:
        user = yaml.safe_load(fh) or {}
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _merge_config(DEFAULT_CONFIG, user)


def _apply_flag(cfg: dict, dotted: str, value) -> None:
    if value is None:
        return
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def _limit_threads(n: int) -> None:
    # deterministic mode caps the BLAS pools; the lattice path itself is a
    # single-process vectorized implementation either way
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except Exception:
        pass


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_metrics(path: Optional[str], metrics: dict) -> None:
    if path is None:
        return
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, default=_json_default)
        fh.write("\n")


def _load_dataset(cfg: dict, synthetic: Optional[str], seed: int) -> data_mod.Dataset:
    if synthetic:
        try:
            n_str, d_str = synthetic.split(",")
            n, d = int(n_str), int(d_str)
        except ValueError:
            raise ConfigError("--synthetic expects 'n,d'") from None
        return data_mod.synthetic_regression(n, d, seed=seed)
    path = cfg["data"]["path"]
    if not path:
        raise ConfigError("no dataset: pass --data/-d or set data.path in the config")
    return data_mod.load_csv(path, cfg["data"]["target"])


def _train_config(cfg: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        learning_rate=float(cfg["train"]["lr"]),
        max_epochs=int(cfg["train"]["max_epochs"]),
        probes=int(cfg["train"]["probes"]),
        seed=int(cfg["train"]["seed"]),
        noise_floor=float(cfg["kernel"]["noise_floor"]),
        patience=int(cfg["train"]["patience"]),
        order=int(cfg["kernel"]["order"]),
        symmetrize=bool(cfg["lattice"]["symmetrize"]),
        cg_tol_train=float(cfg["cg"]["tol_train"]),
        cg_tol_eval=float(cfg["cg"]["tol_eval"]),
        cg_max_iterations=int(cfg["cg"]["max_iters"]),
        cg_min_iterations=int(cfg["cg"]["min_iters"]),
        lanczos_steps=int(cfg["cg"]["max_lanczos"]),
        trace_mll=bool(cfg["train"]["trace_mll"]),
    )


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args, cfg) -> int:
    ds = _load_dataset(cfg, args.synthetic, seed=int(cfg["split"]["seed"]))
    split = data_mod.SplitSpec(fractions=tuple(cfg["split"]["fractions"]), seed=int(cfg["split"]["seed"]))
    train, val, test = data_mod.split_standardize(ds, split)
    tcfg = _train_config(cfg)

    tic = time.perf_counter()
    model, trace = trainer.fit(
        train.X, train.y, val.X, val.y, cfg["kernel"]["family"], tcfg, stats=train.stats
    )
    fit_seconds = time.perf_counter() - tic

    tic = time.perf_counter()
    test_pred_std = model.joint_operator(test.X).cross_mvm(model.alpha)
    rmse_std = _rmse(test_pred_std, test.y)
    rmse_orig = rmse_std * train.stats.y_std
    predict_seconds = time.perf_counter() - tic

    nll_points = min(int(cfg["eval"]["nll_points"]), test.n)
    rng = np.random.default_rng(int(cfg["split"]["seed"]))
    nll_idx = rng.choice(test.n, size=nll_points, replace=False)
    tic = time.perf_counter()
    # test Datasets are already standardized, so the model's stats must not
    # be re-applied: evaluate through a raw-space view of the same model
    raw_view = solver.GPModel(
        spec=model.spec,
        X_train=model.X_train,
        alpha=model.alpha,
        stats=solver.Standardization.identity(model.X_train.shape[1]),
        order=model.order,
        symmetrize=model.symmetrize,
        cg_eval=model.cg_eval,
    )
    nll = solver.test_nll(raw_view, test.X[nll_idx], test.y[nll_idx])
    nll_seconds = time.perf_counter() - tic

    op = model.operator()
    metrics = {
        "command": "train",
        "dataset": {
            "path": cfg["data"]["path"] or f"synthetic:{args.synthetic}",
            "n": ds.n,
            "d": ds.dim,
            "target": ds.target,
            "split_sizes": [train.n, val.n, test.n],
        },
        "config": cfg,
        "trace": {
            "mll": trace.mll,
            "val_rmse": trace.val_rmse,
            "hyperparameters": [h.tolist() for h in trace.hyperparameters],
            "cg_iterations": trace.cg_iterations,
            "wall_time": trace.wall_time,
            "best_epoch": trace.best_epoch,
        },
        "model": {
            "family": model.spec.family,
            "lengthscales": model.spec.lengthscales,
            "outputscale": model.spec.outputscale,
            "noise_variance": model.spec.noise_variance,
        },
        "test_rmse_standardized": rmse_std,
        "test_rmse_original": rmse_orig,
        "test_nll_standardized": nll,
        "nll_points_used": nll_points,
        "lattice": {"m": op.m, "L": train.n * (ds.dim + 1), "m_over_L": op.m / (train.n * (ds.dim + 1))},
        "timings": {
            "fit_seconds": fit_seconds,
            "predict_seconds": predict_seconds,
            "nll_seconds": nll_seconds,
        },
    }
    write_metrics(args.out, metrics)
    if args.model_out:
        model.save(args.model_out)

    print(f"dataset: n={ds.n} d={ds.dim} split={train.n}/{val.n}/{test.n}")
    print(f"epochs run: {len(trace)}  best epoch: {trace.best_epoch}")
    print(f"lengthscales: {np.array2string(model.spec.lengthscales, precision=4)}")
    print(f"outputscale: {model.spec.outputscale:.4g}  noise: {model.spec.noise_variance:.4g}")
    print(f"lattice points m={op.m}  m/L={metrics['lattice']['m_over_L']:.4g}")
    print(f"test RMSE (standardized): {rmse_std:.4f}")
    print(f"test RMSE (original units): {rmse_orig:.4f}")
    print(f"test NLL (standardized, {nll_points} points): {nll:.4f}")
    return 0


def cmd_predict(args, cfg) -> int:
    model = solver.GPModel.load(args.model)
    ds = data_mod.load_csv(args.data, cfg["data"]["target"]) if _has_target(args, cfg) else None
    if ds is None:
        # no target column: read every column as a feature
        raw = data_mod.load_csv(args.data)
        X = np.concatenate([raw.X, raw.y[:, None]], axis=1)
        names = list(raw.columns) + [raw.target]
    else:
        X = ds.X
        names = list(ds.columns)
    if X.shape[1] != model.X_train.shape[1]:
        raise ConfigError(
            f"model expects {model.X_train.shape[1]} features, file has {X.shape[1]} ({names})"
        )
    mean = solver.predictive_mean(model, X)
    var_std = solver.predictive_variance(model, X) + model.spec.noise_variance
    std_orig = np.sqrt(var_std) * model.stats.y_std
    out_path = args.out or "predictions.csv"
    with open(out_path, "w") as fh:
        fh.write("prediction,predictive_std\n")
        for mu, sd in zip(mean, std_orig):
            fh.write(f"{mu!r},{sd!r}\n")
    print(f"wrote {mean.shape[0]} predictions to {out_path}")
    if ds is not None:
        rmse = _rmse(mean, ds.y)
        print(f"RMSE against '{ds.target}' (original units): {rmse:.4f}")
    return 0


def _has_target(args, cfg) -> bool:
    return bool(cfg["data"]["target"]) or getattr(args, "assume_last_target", False)


def _bench_spec(cfg, d: int, lengthscales: Optional[str]) -> StationaryKernelSpec:
    if lengthscales:
        vals = [float(v) for v in lengthscales.split(",")]
        ls = np.full(d, vals[0]) if len(vals) == 1 else np.asarray(vals)
        if ls.shape[0] != d:
            raise ConfigError(f"--lengthscales needs 1 or {d} values")
    else:
        ls = np.full(d, 1.0)
    return StationaryKernelSpec(
        family=cfg["kernel"]["family"], lengthscales=ls, outputscale=1.0,
        noise_variance=max(cfg["kernel"]["noise_floor"], 1e-4),
    )


def cmd_mvm_bench(args, cfg) -> int:
    ds = _load_dataset(cfg, args.synthetic, seed=int(args.seed))
    X = ds.X
    n, d = X.shape
    spec = _bench_spec(cfg, d, args.lengthscales)
    rng = np.random.default_rng(int(args.seed))
    v = rng.standard_normal(n)

    exact_cap = int(args.exact_cap)
    z = None
    exact_seconds = None
    if n <= exact_cap:
        tic = time.perf_counter()
        z = oracle.exact_mvm(X, v, spec)
        exact_seconds = time.perf_counter() - tic
    else:
        print(f"note: exact MVM skipped (n={n} above cap {exact_cap})")

    results = []
    orders = [int(o) for o in str(args.orders).split(",")]
    for r in orders:
        tic = time.perf_counter()
        op = LatticeOperator.build(spec, X, order=r, symmetrize=bool(cfg["lattice"]["symmetrize"]))
        build_seconds = time.perf_counter() - tic
        best = math.inf
        for _ in range(max(1, int(args.trials))):
            tic = time.perf_counter()
            z_hat = op.mvm(v)
            best = min(best, time.perf_counter() - tic)
        entry = {
            "order": r,
            "m": op.m,
            "build_seconds": build_seconds,
            "mvm_seconds": best,
            "exact_seconds": exact_seconds,
        }
        if z is not None:
            cos = float(z @ z_hat / (np.linalg.norm(z) * np.linalg.norm(z_hat)))
            entry["cosine_error"] = 1.0 - cos
        results.append(entry)
        line = f"r={r}: m={op.m} build={build_seconds:.3f}s mvm={best * 1e3:.2f}ms"
        if exact_seconds is not None:
            line += f" exact={exact_seconds * 1e3:.2f}ms"
        if "cosine_error" in entry:
            line += f" cosine_error={entry['cosine_error']:.3e}"
        print(line)

    write_metrics(args.out, {
        "command": "mvm-bench",
        "dataset": {"n": n, "d": d, "path": cfg["data"]["path"] or f"synthetic:{args.synthetic}"},
        "config": cfg,
        "kernel": {"family": spec.family, "lengthscales": spec.lengthscales},
        "results": results,
    })
    return 0


def cmd_sparsity(args, cfg) -> int:
    ds = _load_dataset(cfg, args.synthetic, seed=int(args.seed))
    n, d = ds.X.shape
    if args.model:
        model = solver.GPModel.load(args.model)
        spec = model.spec
        X = model.stats.apply_x(ds.X)
        source = f"model {args.model}"
    else:
        X = (ds.X - ds.X.mean(axis=0)) / np.maximum(ds.X.std(axis=0), 1e-12)
        if args.lengthscales:
            spec = _bench_spec(cfg, d, args.lengthscales)
            source = "given"
        else:
            spec = _bench_spec(cfg, d, str(math.sqrt(d) / 2.0))
            source = "default sqrt(d)/2"
    op = LatticeOperator.build(spec, X, order=int(cfg["kernel"]["order"]))
    L = n * (d + 1)
    print(f"n={n} d={d} m={op.m} L={L} m/L={op.m / L:.6g} (lengthscales: {source})")
    write_metrics(args.out, {
        "command": "sparsity",
        "dataset": {"n": n, "d": d},
        "lengthscales": spec.lengthscales,
        "m": op.m,
        "L": L,
        "m_over_L": op.m / L,
    })
    return 0


def cmd_stencil(args, cfg) -> int:
    prof = profile(cfg["kernel"]["family"])
    st = build_stencil(prof, int(cfg["kernel"]["order"]), tol=float(args.tol), binomial=bool(args.binomial))
    print(f"{st.spacing:.12g}")
    for c in st.coefficients:
        print(f"{c:.12g}")
    return 0


def cmd_compare_ard(args, cfg) -> int:
    from scipy.stats import spearmanr

    ds = _load_dataset(cfg, args.synthetic, seed=int(cfg["split"]["seed"]))
    split = data_mod.SplitSpec(seed=int(cfg["split"]["seed"]))
    train, val, _ = data_mod.split_standardize(ds, split)

    cap = int(args.max_points)
    rng = np.random.default_rng(int(cfg["split"]["seed"]))
    tr_idx = rng.choice(train.n, size=min(cap, train.n), replace=False)
    val_idx = rng.choice(val.n, size=min(cap // 2, val.n), replace=False)
    Xt, yt = train.X[tr_idx], train.y[tr_idx]
    Xv, yv = val.X[val_idx], val.y[val_idx]

    tcfg = _train_config(cfg)
    model, _ = trainer.fit(Xt, yt, Xv, yv, cfg["kernel"]["family"], tcfg, stats=train.stats)
    exact_spec, _ = trainer.fit_exact(Xt, yt, Xv, yv, cfg["kernel"]["family"], tcfg)

    ls_lattice = model.spec.lengthscales
    ls_exact = exact_spec.lengthscales
    rho = float(spearmanr(ls_lattice, ls_exact).statistic) if ds.dim > 1 else 1.0

    print(f"{'dim':>6} {'lattice':>12} {'exact':>12}")
    for i in range(ds.dim):
        print(f"  l_{i:<3} {ls_lattice[i]:>12.5g} {ls_exact[i]:>12.5g}")
    print(f"rank correlation (spearman): {rho:.4f}")
    write_metrics(args.out, {
        "command": "compare-ard",
        "dataset": {"n": ds.n, "d": ds.dim, "subsampled_train": int(tr_idx.size)},
        "config": cfg,
        "lengthscales_lattice": ls_lattice,
        "lengthscales_exact": ls_exact,
        "spearman": rho,
        "labels": [f"l_{i}" for i in range(ds.dim)],
    })
    return 0


def cmd_dump_lattice(args, cfg) -> int:
    ds = _load_dataset(cfg, args.synthetic, seed=int(args.seed))
    n, d = ds.X.shape
    X = (ds.X - ds.X.mean(axis=0)) / np.maximum(ds.X.std(axis=0), 1e-12)
    spec = _bench_spec(cfg, d, args.lengthscales)
    op = LatticeOperator.build(spec, X, order=int(cfg["kernel"]["order"]))
    plan = op.train_plan
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        for i in range(plan.n):
            keys = plan.vertex_keys(i)
            for k in range(d + 1):
                ints = "\t".join(str(int(v)) for v in keys[k])
                sink.write(f"{ints}\t{plan.weights[i, k]!r}\n")
    finally:
        if args.out:
            sink.close()
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="YAML configuration file")
    p.add_argument("--threads", type=int, default=1, help="thread cap (1 = deterministic mode)")
    p.add_argument("--out", "-o", help="metrics JSON output path")
    p.add_argument("--data", "-d", dest="data_path", help="CSV dataset path")
    p.add_argument("--target", help="target column name (default: last column)")
    p.add_argument("--synthetic", help="generate data instead: 'n,d'")
    p.add_argument("--family", help="kernel family: rbf | matern32 | matern52")
    p.add_argument("--order", type=int, help="blur stencil order r")
    p.add_argument("--symmetrize", action="store_const", const=True, default=None,
                   help="average ascending/descending blur direction orders")
    p.add_argument("--seed", type=int, default=0, help="seed for synthetic data and probes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latticegp",
        description="Gaussian-process regression with sparse simplicial-lattice kernel filtering",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and report test metrics")
    _add_common(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--probes", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--noise-floor", type=float)
    p.add_argument("--tol-train", type=float)
    p.add_argument("--tol-eval", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--nll-points", type=int)
    p.add_argument("--model-out", help="save the trained model (npz)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict with a saved model")
    _add_common(p)
    p.add_argument("--model", required=True, help="model npz from train --model-out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("mvm-bench", help="lattice vs exact MVM timing and cosine error")
    _add_common(p)
    p.add_argument("--orders", default="1", help="comma-separated stencil orders")
    p.add_argument("--lengthscales", help="scalar or comma-separated per-dimension values")
    p.add_argument("--exact-cap", default=20000, help="skip the exact oracle above this n")
    p.add_argument("--trials", default=3, help="MVM timing repetitions (best of)")
    p.set_defaults(func=cmd_mvm_bench)

    p = sub.add_parser("sparsity", help="report generated lattice points m and m/L")
    _add_common(p)
    p.add_argument("--lengthscales", help="scalar or comma-separated per-dimension values")
    p.add_argument("--model", help="take lengthscales from a saved model")
    p.set_defaults(func=cmd_sparsity)

    p = sub.add_parser("stencil", help="print stencil spacing and coefficients")
    _add_common(p)
    p.add_argument("--tol", type=float, default=1e-4, help="coverage balance tolerance")
    p.add_argument("--binomial", action="store_true", help="reference [.5, 1, .5] coefficients")
    p.set_defaults(func=cmd_stencil)

    p = sub.add_parser("compare-ard", help="lattice vs dense-oracle learned lengthscales")
    _add_common(p)
    p.add_argument("--max-points", type=int, default=1200, help="subsample cap for the dense oracle")
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--probes", type=int)
    p.add_argument("--patience", type=int)
    p.set_defaults(func=cmd_compare_ard)

    p = sub.add_parser("dump-lattice", help="serialize splat keys and weights as text")
    _add_common(p)
    p.add_argument("--lengthscales", help="scalar or comma-separated per-dimension values")
    p.set_defaults(func=cmd_dump_lattice)

    return parser


_FLAG_MAP = {
    "data_path": "data.path",
    "target": "data.target",
    "family": "kernel.family",
    "order": "kernel.order",
    "noise_floor": "kernel.noise_floor",
    "lr": "train.lr",
    "max_epochs": "train.max_epochs",
    "probes": "train.probes",
    "patience": "train.patience",
    "tol_train": "cg.tol_train",
    "tol_eval": "cg.tol_eval",
    "max_iters": "cg.max_iters",
    "symmetrize": "lattice.symmetrize",
    "split_seed": "split.seed",
    "nll_points": "eval.nll_points",
}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        for attr, dotted in _FLAG_MAP.items():
            if hasattr(args, attr):
                _apply_flag(cfg, dotted, getattr(args, attr))
        _limit_threads(max(1, int(args.threads)))
        return args.func(args, cfg)
    except BrokenPipeError:
        return 0
    except Exception as err:  # one-line diagnostic, nonzero exit
        print(f"latticegp: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
