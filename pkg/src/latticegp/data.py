"""Dataset ingestion, standardization, and splits.

CSV files must carry a header row and numeric cells; the target column is
selected by name and defaults to the last column.  Standardization
statistics always come from the training portion only and are applied to
every split.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .solver import Standardization


class CsvFormatError(ValueError):
    """Malformed CSV content (non-numeric cell, missing column, ...)."""


class ConstantColumnError(ValueError):
    """A feature column is constant on the training portion."""


class SplitSizeError(ValueError):
    """Dataset too small for the requested split."""


@dataclass
class Dataset:
    """Numeric regression data with optional standardization statistics."""

    X: np.ndarray
    y: np.ndarray
    columns: list
    target: str
    stats: Optional[Standardization] = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def load_csv(path: str, target_column: Optional[str] = None) -> Dataset:
    """Parse a headered numeric CSV into a Dataset.

    A non-numeric cell raises :class:`CsvFormatError` naming its row and
    column; non-finite values are rejected.
    """
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise CsvFormatError(f"{path}: empty file") from None
            header = [h.strip() for h in header]
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row or (len(row) == 1 and row[0].strip() == ""):
                    continue
                if len(row) != len(header):
                    raise CsvFormatError(
                        f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}"
                    )
                parsed = []
                for col, cell in zip(header, row):
                    try:
                        value = float(cell)
                    except ValueError:
                        raise CsvFormatError(
                            f"{path}: non-numeric cell at row {lineno}, column '{col}': {cell!r}"
                        ) from None
                    if not np.isfinite(value):
                        raise CsvFormatError(
                            f"{path}: non-finite value at row {lineno}, column '{col}'"
                        )
                    parsed.append(value)
                rows.append(parsed)
    except FileNotFoundError:
        raise

    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)

    if target_column is None:
        target_idx = len(header) - 1
    else:
        if target_column not in header:
            raise CsvFormatError(f"{path}: target column '{target_column}' not found")
        target_idx = header.index(target_column)
    feature_idx = [i for i in range(len(header)) if i != target_idx]
    return Dataset(
        X=data[:, feature_idx],
        y=data[:, target_idx],
        columns=[header[i] for i in feature_idx],
        target=header[target_idx],
    )


def save_csv(path: str, ds: Dataset) -> None:
    """Write a Dataset back to CSV (features then target)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(ds.columns) + [ds.target])
        for i in range(ds.n):
            writer.writerow([repr(float(v)) for v in ds.X[i]] + [repr(float(ds.y[i]))])


@dataclass
class SplitSpec:
    """Train/validation/test fractions (largest-remainder rounding) and the
    shuffling seed."""

    fractions: Sequence[float] = (4.0 / 9.0, 2.0 / 9.0, 3.0 / 9.0)
    seed: int = 0

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=float)
        if f.shape != (3,) or np.any(f <= 0) or abs(f.sum() - 1.0) > 1e-9:
            raise ValueError("fractions must be three positive numbers summing to 1")

    def sizes(self, n: int) -> tuple[int, int, int]:
        exact = np.asarray(self.fractions) * n
        base = np.floor(exact).astype(int)
        rem = n - int(base.sum())
        order = np.argsort(-(exact - base), kind="stable")
        for i in range(rem):
            base[order[i]] += 1
        return tuple(int(b) for b in base)


def split_standardize(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint covering split with statistics from the training portion.

    Training feature columns end up with mean 0 and standard deviation 1;
    constant columns are rejected by name.
    """
    if ds.n < 9:
        raise SplitSizeError(f"need at least 9 rows to split, got {ds.n}")
    n_tr, n_val, n_te = spec.sizes(ds.n)
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(ds.n)
    idx_tr = perm[:n_tr]
    idx_val = perm[n_tr : n_tr + n_val]
    idx_te = perm[n_tr + n_val :]

    x_mean = ds.X[idx_tr].mean(axis=0)
    x_std = ds.X[idx_tr].std(axis=0)
    bad = np.where(x_std < 1e-12)[0]
    if bad.size:
        names = ", ".join(str(ds.columns[i]) for i in bad)
        raise ConstantColumnError(f"constant feature column(s) on the training split: {names}")
    y_mean = float(ds.y[idx_tr].mean())
    y_std = float(ds.y[idx_tr].std())
    if y_std < 1e-12:
        raise ConstantColumnError(f"constant target column '{ds.target}' on the training split")
    stats = Standardization(x_mean=x_mean, x_std=x_std, y_mean=y_mean, y_std=y_std)

    def piece(idx):
        return Dataset(
            X=(ds.X[idx] - x_mean) / x_std,
            y=(ds.y[idx] - y_mean) / y_std,
            columns=ds.columns,
            target=ds.target,
            stats=stats,
        )

    return piece(idx_tr), piece(idx_val), piece(idx_te)


# ---------------------------------------------------------------------------
# synthetic generators for benchmarks and tests
# ---------------------------------------------------------------------------


def synthetic_inputs(n: int, dim: int, seed: int = 0, clusters: int = 0, cluster_scale: float = 0.05) -> np.ndarray:
    """Standard-normal inputs, optionally drawn around a few tight clusters."""
    rng = np.random.default_rng(seed)
    if clusters <= 0:
        return rng.standard_normal((n, dim))
    centers = rng.standard_normal((clusters, dim))
    assign = rng.integers(0, clusters, size=n)
    return centers[assign] + cluster_scale * rng.standard_normal((n, dim))


def synthetic_regression(n: int, dim: int, seed: int = 0, noise: float = 0.1) -> Dataset:
    """Smooth nonlinear synthetic regression data in Dataset form."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dim))
    w = rng.standard_normal(dim)
    y = np.sin(X @ w) + 0.5 * np.cos(X[:, 0] * 2.0) + noise * rng.standard_normal(n)
    return Dataset(
        X=X,
        y=y,
        columns=[f"x{i}" for i in range(dim)],
        target="y",
    )
