"""Dataset loading, splitting, standardization, and the synthetic wavelet task.

Standardization always uses training-split statistics, for features and
targets alike. Metrics are reported on the standardized scale unless a caller
de-standardizes explicitly.
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateColumnWarning, DimensionMismatch, EmptyFile, ParseError


@dataclass
class Standardization:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    stats: Standardization | None = None
    split: str = "raw"

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x))
        self.y = np.asarray(self.y).ravel()
        if self.x.dtype.kind != "f":
            self.x = self.x.astype(float)
        if self.y.dtype.kind != "f":
            self.y = self.y.astype(float)
        if self.x.shape[0] != self.y.shape[0]:
            raise DimensionMismatch(
                f"{self.x.shape[0]} feature rows but {self.y.shape[0]} targets"
            )

    def __len__(self):
        return self.y.shape[0]


def load_csv(path, header: bool = False, target_column: int = -1) -> Dataset:
    """Read a numeric CSV into a raw (unstandardized) Dataset.

    target_column: -1 takes the last column as the target, otherwise a
    0-based column index. Raises ParseError with the 1-based physical row and
    column of the first bad cell, EmptyFile when no data rows exist.
    """
    rows = []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, cells in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not cells or (len(cells) == 1 and cells[0].strip() == ""):
                continue  # blank line
            if width is None:
                width = len(cells)
            if len(cells) != width:
                raise ParseError(lineno, min(len(cells), width) + 1,
                                 f"expected {width} fields, got {len(cells)}")
            parsed = np.empty(width)
            for col, cell in enumerate(cells):
                try:
                    parsed[col] = float(cell)
                except ValueError:
                    raise ParseError(lineno, col + 1, cell) from None
            rows.append(parsed)
    if not rows:
        raise EmptyFile(f"{path} has no data rows")
    table = np.vstack(rows)
    tcol = table.shape[1] - 1 if target_column == -1 else target_column
    if not 0 <= tcol < table.shape[1]:
        raise DimensionMismatch(f"target column {target_column} out of range")
    y = table[:, tcol]
    x = np.delete(table, tcol, axis=1)
    if x.shape[1] == 0:
        raise DimensionMismatch("csv needs at least one feature column")
    return Dataset(x=x, y=y, stats=None, split="raw")


def _train_stats(x: np.ndarray, y: np.ndarray) -> Standardization:
    x_mean = x.mean(axis=0)
    x_std = x.std(axis=0)
    zero = x_std == 0
    if np.any(zero):
        warnings.warn(
            f"{int(zero.sum())} training column(s) have zero variance; std forced to 1",
            DegenerateColumnWarning,
        )
        x_std = np.where(zero, 1.0, x_std)
    y_mean = float(y.mean())
    y_std = float(y.std())
    if y_std == 0:
        warnings.warn("training targets have zero variance; std forced to 1",
                      DegenerateColumnWarning)
        y_std = 1.0
    return Standardization(x_mean=x_mean, x_std=x_std, y_mean=y_mean, y_std=y_std)


def apply_stats(x: np.ndarray, y: np.ndarray, stats: Standardization):
    xs = (x - stats.x_mean) / stats.x_std
    ys = (y - stats.y_mean) / stats.y_std
    return xs, ys


def identity_stats(d: int) -> Standardization:
    """Statistics under which apply_stats is the identity map."""
    return Standardization(x_mean=np.zeros(d), x_std=np.ones(d),
                           y_mean=0.0, y_std=1.0)


def split_raw(data: Dataset, train_fraction: float = 0.9, seed: int = 0):
    """Shuffle and split without standardizing; the permutation is seeded."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must be in (0, 1]")
    n = len(data)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = max(1, min(n, int(round(train_fraction * n))))
    tr, te = perm[:n_train], perm[n_train:]
    return (
        Dataset(x=data.x[tr], y=data.y[tr], stats=None, split="train"),
        Dataset(x=data.x[te], y=data.y[te], stats=None, split="test"),
    )


def split_standardize(data: Dataset, train_fraction: float = 0.9, seed: int = 0):
    """Shuffle, split, and standardize with training-split statistics only."""
    raw_tr, raw_te = split_raw(data, train_fraction, seed)
    stats = _train_stats(raw_tr.x, raw_tr.y)
    xs_tr, ys_tr = apply_stats(raw_tr.x, raw_tr.y, stats)
    xs_te, ys_te = apply_stats(raw_te.x, raw_te.y, stats)
    train = Dataset(x=xs_tr, y=ys_tr, stats=stats, split="train")
    test = Dataset(x=xs_te, y=ys_te, stats=stats, split="test")
    return train, test


def ricker(x: np.ndarray, width: float = 1.0, amplitude: float = 1.0) -> np.ndarray:
    """Radial wavelet a (1 - r^2/s^2) exp(-r^2 / (2 s^2)) over rows of x."""
    r2 = np.sum(np.atleast_2d(x) ** 2, axis=1)
    s2 = width * width
    return amplitude * (1.0 - r2 / s2) * np.exp(-r2 / (2.0 * s2))


def ricker_raw(
    n_train: int = 3000,
    n_test: int = 200,
    width: float = 1.0,
    amplitude: float = 1.0,
    radius: float = 4.0,
    noise: float = 0.0,
    seed: int = 0,
):
    """Raw (unstandardized) train/test splits of the synthetic wavelet task.

    Inputs are uniform on [-radius, radius]^2; Gaussian noise (std ``noise``)
    is added to training targets only.
    """
    rng = np.random.default_rng(seed)
    x_tr = rng.uniform(-radius, radius, size=(n_train, 2))
    x_te = rng.uniform(-radius, radius, size=(n_test, 2))
    y_tr = ricker(x_tr, width, amplitude)
    y_te = ricker(x_te, width, amplitude)
    if noise > 0:
        y_tr = y_tr + noise * rng.standard_normal(n_train)
    return (
        Dataset(x=x_tr, y=y_tr, stats=None, split="train"),
        Dataset(x=x_te, y=y_te, stats=None, split="test"),
    )


def ricker_dataset(
    n_train: int = 3000,
    n_test: int = 200,
    width: float = 1.0,
    amplitude: float = 1.0,
    radius: float = 4.0,
    noise: float = 0.0,
    seed: int = 0,
):
    """Synthetic 2-D wavelet regression task, standardized with train stats."""
    raw_tr, raw_te = ricker_raw(n_train, n_test, width, amplitude, radius, noise, seed)
    stats = _train_stats(raw_tr.x, raw_tr.y)
    xs_tr, ys_tr = apply_stats(raw_tr.x, raw_tr.y, stats)
    xs_te, ys_te = apply_stats(raw_te.x, raw_te.y, stats)
    return (
        Dataset(x=xs_tr, y=ys_tr, stats=stats, split="train"),
        Dataset(x=xs_te, y=ys_te, stats=stats, split="test"),
    )
