"""Synthetic generators, CSV ingestion, standardization and OOD augmentation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError, ShapeError
from .nn import as_rng

DEFAULT_GMM_MEANS = ((0.0, 2.0), (-math.sqrt(3.0), -1.0), (math.sqrt(3.0), -1.0))


@dataclass(frozen=True)
class HeldOut:
    """Rows excluded from training, keyed by their original label."""

    x: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class LabeledDataset:
    """Inputs ``x`` (N, D), labels ``y`` and OOD flags ``b``.

    ``class_count`` counts the label values in use; when boundary points are
    appended the OOD class takes index ``class_count - 1``.
    """

    x: np.ndarray
    y: np.ndarray
    b: np.ndarray
    class_count: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    warnings: tuple = ()
    label_values: tuple | None = None  # original label for each class index (CSV)
    heldout: HeldOut | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError("x must be a matrix")
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        b = np.asarray(self.b, dtype=np.int64).reshape(-1)
        if len(y) != x.shape[0] or len(b) != x.shape[0]:
            raise ShapeError("x, y and b must have the same number of rows")
        if len(y) and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")
        if not np.all(np.isfinite(x)):
            raise ValueError("x contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "b", b)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def has_ood(self):
        return bool(np.any(self.b == 1))

    def subset(self, idx):
        return replace(self, x=self.x[idx], y=self.y[idx], b=self.b[idx])

    def class_counts(self):
        return np.bincount(self.y, minlength=self.class_count)


@dataclass(frozen=True)
class GmmSpec:
    means: tuple = DEFAULT_GMM_MEANS
    sigma: float = 3.0
    points_per_cluster: int = 500

    def __post_init__(self):
        if len(self.means) == 0:
            raise ValueError("GMM needs at least one mean")
        if len({len(m) for m in self.means}) != 1:
            raise ValueError("all means must have the same dimension")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.points_per_cluster < 1:
            raise ValueError("points_per_cluster must be positive")


@dataclass(frozen=True)
class MoonsSpec:
    points_per_class: int = 2000
    noise: float = 0.05

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.points_per_class < 1:
            raise ValueError("points_per_class must be positive")


def generate_gmm(spec, seed):
    """Isotropic Gaussian clusters, one class per mean, rows grouped by class."""
    rng = as_rng(seed)
    means = np.asarray(spec.means, dtype=np.float64)
    k, d = means.shape
    n = spec.points_per_cluster
    x = np.repeat(means, n, axis=0) + spec.sigma * rng.standard_normal((k * n, d))
    y = np.repeat(np.arange(k), n)
    return LabeledDataset(x=x, y=y, b=np.zeros(k * n, dtype=np.int64), class_count=k)


def generate_moons(spec, seed):
    """Two interleaving half circles.

    Class 0 lies on ``(cos t, sin t)``, class 1 on ``(1 - cos t, 0.5 - sin t)``,
    with ``t`` equally spaced over ``[0, pi]`` and isotropic noise added.
    """
    rng = as_rng(seed)
    n = spec.points_per_class
    t = np.linspace(0.0, np.pi, n)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    x = np.vstack([upper, lower])
    if spec.noise > 0:
        x = x + spec.noise * rng.standard_normal(x.shape)
    y = np.repeat([0, 1], n)
    return LabeledDataset(x=x, y=y, b=np.zeros(2 * n, dtype=np.int64), class_count=2)


def _parse_float(text, line, column):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r} in column {column!r}", line) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {text!r} in column {column!r}", line)
    return v


def load_csv(path, label_column, positive_classes):
    """Read a headered numeric CSV.

    Rows whose label is in ``positive_classes`` become classes ``0..K-1`` in sorted
    label order; every other row goes to ``dataset.heldout`` with its original label.
    """
    path = Path(path)
    positive = sorted({float(c) for c in positive_classes})
    if not positive:
        raise ValueError("positive_classes must be nonempty")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if label_column not in header:
            raise SchemaError(f"label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != li]
        xs, labels = [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            vals = [_parse_float(c.strip(), line, header[i]) for i, c in enumerate(row)]
            labels.append(vals[li])
            xs.append([v for i, v in enumerate(vals) if i != li])
    x = np.asarray(xs, dtype=np.float64).reshape(-1, len(feature_names))
    labels = np.asarray(labels)
    mapping = {v: i for i, v in enumerate(positive)}
    keep = np.isin(labels, positive)
    y = np.array([mapping[v] for v in labels[keep]], dtype=np.int64)
    return LabeledDataset(
        x=x[keep],
        y=y,
        b=np.zeros(int(keep.sum()), dtype=np.int64),
        class_count=len(positive),
        label_values=tuple(_tidy_label(v) for v in positive),
        heldout=HeldOut(x=x[~keep], labels=labels[~keep]),
    )


def _tidy_label(v):
    return int(v) if float(v).is_integer() else v


def standardize(dataset):
    """Fit per-feature mean and population std on ``dataset`` and apply them.

    Zero-variance columns are centred only (std stored as 1) and listed in
    ``warnings``.
    """
    mean = dataset.x.mean(axis=0)
    std = dataset.x.std(axis=0)
    warnings = list(dataset.warnings)
    flat = std == 0
    for j in np.flatnonzero(flat):
        warnings.append(f"column {j} has zero variance; centred only")
    std = np.where(flat, 1.0, std)
    heldout = dataset.heldout
    if heldout is not None and len(heldout.x):
        heldout = HeldOut(x=apply_standardization(heldout.x, mean, std), labels=heldout.labels)
    return replace(
        dataset,
        x=apply_standardization(dataset.x, mean, std),
        mean=mean,
        std=std,
        warnings=tuple(warnings),
        heldout=heldout,
    )


def apply_standardization(x, mean, std):
    return (np.asarray(x, dtype=np.float64) - mean) / std


def unstandardize(x, mean, std):
    return np.asarray(x, dtype=np.float64) * std + mean


def inflate_ood(dataset, dim_index, mean, std, n, seed):
    """Copies of random in-distribution rows with one coordinate replaced by N(mean, std^2)."""
    if not 0 <= dim_index < dataset.dim:
        raise ValueError(f"dim_index {dim_index} outside [0, {dataset.dim})")
    rng = as_rng(seed)
    if n == 0:
        return np.empty((0, dataset.dim))
    rows = dataset.x[rng.integers(0, dataset.n, size=n)].copy()
    rows[:, dim_index] = mean + std * rng.standard_normal(n)
    return rows


def augment_with_ood(dataset, boundary_points):
    """Append boundary points as class ``K`` with ``b = 1``."""
    pts = np.asarray(boundary_points, dtype=np.float64)
    if pts.size == 0:
        pts = pts.reshape(0, dataset.dim)
    if pts.ndim != 2 or pts.shape[1] != dataset.dim:
        raise ShapeError(f"boundary points must have {dataset.dim} columns, got {pts.shape}")
    k = dataset.class_count
    return replace(
        dataset,
        x=np.vstack([dataset.x, pts]),
        y=np.concatenate([dataset.y, np.full(len(pts), k, dtype=np.int64)]),
        b=np.concatenate([dataset.b, np.ones(len(pts), dtype=np.int64)]),
        class_count=k + 1,
    )


def train_test_split(dataset, test_fraction, seed):
    """Stratified-free random split; returns ``(train, test)``."""
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    rng = as_rng(seed)
    perm = rng.permutation(dataset.n)
    n_test = int(round(test_fraction * dataset.n))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


# CSV export -----------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def write_points_csv(path, x):
    x = np.asarray(x, dtype=np.float64)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(x.shape[1])])
        for row in x:
            w.writerow([_fmt(v) for v in row])


def read_points_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[_parse_float(c, line, header[i]) for i, c in enumerate(r)]
                for line, r in enumerate(reader, start=2) if r]
    return np.asarray(rows, dtype=np.float64).reshape(-1, len(header))


def write_dataset_csv(path, dataset):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(dataset.dim)] + ["y", "b"])
        for row, y, b in zip(dataset.x, dataset.y, dataset.b):
            w.writerow([_fmt(v) for v in row] + [int(y), int(b)])


def read_dataset_csv(path, class_count=None):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["y", "b"]:
            raise SchemaError(f"{path}: expected trailing columns y,b")
        xs, ys, bs = [], [], []
        for line, r in enumerate(reader, start=2):
            if not r:
                continue
            xs.append([_parse_float(c, line, header[i]) for i, c in enumerate(r[:-2])])
            ys.append(int(r[-2]))
            bs.append(int(r[-1]))
    d = len(header) - 2
    y = np.asarray(ys, dtype=np.int64)
    k = class_count if class_count is not None else (int(y.max()) + 1 if len(y) else 0)
    return LabeledDataset(x=np.asarray(xs).reshape(-1, d), y=y, b=np.asarray(bs), class_count=k)
