"""Expression/coordinate containers, file IO and the preprocessing chain.

Preprocessing runs library-size normalization, ``log1p``, highly variable
gene selection and densification, in that order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import io as spio
from scipy import sparse

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed, misaligned or out-of-domain input data."""


def _check_ids(ids: Sequence[str], what: str, expected: int) -> tuple[str, ...]:
    ids = tuple(str(i) for i in ids)
    if len(ids) != expected:
        raise DataError(f"{what}: expected {expected} ids, got {len(ids)}")
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise DataError(f"{what}: duplicate id {dup!r}")
    return ids


@dataclass(frozen=True)
class ExpressionMatrix:
    """Spots x genes matrix of nonnegative expression values.

    ``values`` is either a dense ``ndarray`` or a CSR matrix; ``is_sparse``
    reports which.
    """

    values: np.ndarray | sparse.csr_matrix
    spot_ids: tuple[str, ...]
    gene_ids: tuple[str, ...]

    def __post_init__(self):
        values = self.values
        if sparse.issparse(values):
            values = sparse.csr_matrix(values, dtype=np.float64)
            data = values.data
        else:
            values = np.asarray(values)
            if values.ndim != 2:
                raise DataError(f"expression matrix must be 2-D, got shape {values.shape}")
            if not np.issubdtype(values.dtype, np.floating):
                values = values.astype(np.float64)
            data = values
        if not np.all(np.isfinite(data)):
            raise DataError("expression matrix contains NaN or Inf")
        if data.size and data.min() < 0:
            raise DataError("expression matrix contains negative values")
        n, g = values.shape
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spot_ids", _check_ids(self.spot_ids, "spot_ids", n))
        object.__setattr__(self, "gene_ids", _check_ids(self.gene_ids, "gene_ids", g))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def is_sparse(self) -> bool:
        return sparse.issparse(self.values)

    def dense(self) -> np.ndarray:
        return self.values.toarray() if self.is_sparse else self.values

    def with_values(self, values, gene_ids=None) -> "ExpressionMatrix":
        return ExpressionMatrix(values, self.spot_ids, self.gene_ids if gene_ids is None else gene_ids)


@dataclass(frozen=True)
class SpatialCoords:
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2:
            raise DataError(f"coordinates must be n x 2, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise DataError("coordinates contain non-finite values")
        object.__setattr__(self, "coords", c)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def standardize(self, mean=None, scale=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(standardized, mean, scale)``; zero-variance axes keep scale 1."""
        if mean is None:
            mean = self.coords.mean(axis=0)
        if scale is None:
            scale = self.coords.std(axis=0)
            scale = np.where(scale > 0, scale, 1.0)
        return (self.coords - mean) / scale, np.asarray(mean), np.asarray(scale)


@dataclass(frozen=True)
class Dataset:
    expression: ExpressionMatrix
    coords: SpatialCoords
    labels: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        n = self.expression.shape[0]
        if len(self.coords) != n:
            raise DataError(f"coordinates have {len(self.coords)} rows, expression has {n} spots")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n,):
                raise DataError(f"labels have shape {labels.shape}, expected ({n},)")
            if not np.issubdtype(labels.dtype, np.integer):
                raise DataError("labels must be integers")
            object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def n_spots(self) -> int:
        return self.expression.shape[0]

    def subset(self, rows: np.ndarray) -> "Dataset":
        expr = self.expression
        ids = [expr.spot_ids[i] for i in rows]
        return Dataset(
            ExpressionMatrix(expr.values[rows], ids, expr.gene_ids),
            SpatialCoords(self.coords.coords[rows]),
            None if self.labels is None else self.labels[rows],
        )


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def _require(path: Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _read_id_list(path: Path) -> list[str]:
    with open(_require(path)) as fh:
        return [line.strip() for line in fh if line.strip()]


def read_expression(path, format: Optional[str] = None) -> ExpressionMatrix:
    """Read an expression matrix from MatrixMarket or CSV.

    MatrixMarket files hold spots as rows and need ``spots.txt`` and
    ``genes.txt`` next to them. CSV files carry gene ids in the header row
    and spot ids in the first column.
    """
    path = _require(Path(path))
    if format is None:
        format = "matrix-market" if path.suffix == ".mtx" else "csv"
    if format == "matrix-market":
        try:
            values = spio.mmread(str(path))
        except ValueError as exc:
            raise DataError(f"{path}: cannot parse MatrixMarket file: {exc}") from exc
        values = sparse.csr_matrix(values, dtype=np.float64)
        spots = _read_id_list(path.parent / "spots.txt")
        genes = _read_id_list(path.parent / "genes.txt")
        return ExpressionMatrix(values, spots, genes)
    if format == "csv":
        frame = pd.read_csv(path, index_col=0, converters={0: str})
        try:
            values = frame.to_numpy(dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric expression entries") from exc
        return ExpressionMatrix(values, frame.index.astype(str), frame.columns.astype(str))
    raise DataError(f"unknown expression format {format!r}")


def _read_keyed_csv(path, columns: list[str]) -> pd.DataFrame:
    frame = pd.read_csv(_require(Path(path)), dtype={columns[0]: str})
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    frame = frame.set_index(columns[0])
    if frame.index.has_duplicates:
        raise DataError(f"{path}: duplicate spot ids")
    return frame


def _align(frame: pd.DataFrame, spot_ids: Sequence[str], path) -> pd.DataFrame:
    missing = [s for s in spot_ids if s not in frame.index]
    if missing:
        raise DataError(f"{path}: missing {len(missing)} spot ids, e.g. {missing[0]!r}")
    if len(frame.index) != len(spot_ids):
        raise DataError(f"{path}: has {len(frame.index)} spots, expression has {len(spot_ids)}")
    return frame.loc[list(spot_ids)]


def load_dataset(expr_path, coords_path, labels_path=None, format: Optional[str] = None) -> Dataset:
    """Load expression, coordinates and optional labels aligned to expression spot order.

    Spots with zero total expression are dropped with a warning.
    """
    expr = read_expression(expr_path, format)
    coords = _align(_read_keyed_csv(coords_path, ["spot_id", "x", "y"]), expr.spot_ids, coords_path)
    try:
        xy = coords[["x", "y"]].to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{coords_path}: non-numeric coordinates") from exc
    labels = None
    if labels_path is not None:
        lab = _align(_read_keyed_csv(labels_path, ["spot_id", "label"]), expr.spot_ids, labels_path)
        raw = lab["label"].to_numpy()
        if not np.issubdtype(raw.dtype, np.integer):
            raise DataError(f"{labels_path}: labels must be integers")
        labels = raw.astype(np.int64)
    ds = Dataset(expr, SpatialCoords(xy), labels)

    totals = np.asarray(expr.values.sum(axis=1)).ravel()
    empty = np.flatnonzero(totals <= 0)
    if empty.size:
        logger.warning("dropping %d spots with zero total expression", empty.size)
        ds = ds.subset(np.flatnonzero(totals > 0))
    return ds


def write_expression_csv(expr: ExpressionMatrix, path) -> None:
    frame = pd.DataFrame(expr.dense(), index=pd.Index(expr.spot_ids, name="spot_id"), columns=expr.gene_ids)
    frame.to_csv(path, float_format="%.17g")


def write_expression_mtx(expr: ExpressionMatrix, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / "matrix.mtx"
    spio.mmwrite(str(out), sparse.csr_matrix(expr.values), precision=17)
    (directory / "spots.txt").write_text("\n".join(expr.spot_ids) + "\n")
    (directory / "genes.txt").write_text("\n".join(expr.gene_ids) + "\n")
    return out


def write_coords_csv(spot_ids: Sequence[str], coords: SpatialCoords, path) -> None:
    frame = pd.DataFrame({"spot_id": list(spot_ids), "x": coords.coords[:, 0], "y": coords.coords[:, 1]})
    frame.to_csv(path, index=False, float_format="%.17g")


def write_labels_csv(spot_ids: Sequence[str], labels: np.ndarray, path) -> None:
    pd.DataFrame({"spot_id": list(spot_ids), "label": np.asarray(labels, dtype=np.int64)}).to_csv(path, index=False)


def read_labels_csv(path, spot_ids: Sequence[str]) -> np.ndarray:
    lab = _align(_read_keyed_csv(path, ["spot_id", "label"]), spot_ids, path)
    raw = lab["label"].to_numpy()
    if not np.issubdtype(raw.dtype, np.integer):
        raise DataError(f"{path}: labels must be integers")
    return raw.astype(np.int64)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _row_sums(X: ExpressionMatrix) -> np.ndarray:
    sums = np.asarray(X.values.sum(axis=1)).ravel()
    bad = np.flatnonzero(sums <= 0)
    if bad.size:
        raise DataError(f"spot {X.spot_ids[bad[0]]!r} has zero total expression")
    return sums


def normalization_target(X: ExpressionMatrix) -> float:
    """Median spot total, the default library-size target."""
    return float(np.median(_row_sums(X)))


def library_size_normalize(X: ExpressionMatrix, target: Optional[float] = None) -> ExpressionMatrix:
    """Scale every spot to the same total (median row sum unless ``target`` is given)."""
    sums = _row_sums(X)
    if target is None:
        target = float(np.median(sums))
    scale = target / sums
    if X.is_sparse:
        values = sparse.diags(scale) @ X.values
    else:
        values = X.values * scale[:, None]
    return X.with_values(values)


def log1p_transform(X: ExpressionMatrix) -> ExpressionMatrix:
    values = X.values.log1p() if X.is_sparse else np.log1p(X.values)
    return X.with_values(values)


def gene_variances(X: ExpressionMatrix) -> np.ndarray:
    """Population variance of every gene across spots."""
    if X.is_sparse:
        n = X.shape[0]
        mean = np.asarray(X.values.mean(axis=0)).ravel()
        sq = np.asarray(X.values.multiply(X.values).sum(axis=0)).ravel() / n
        return np.maximum(sq - mean**2, 0.0)
    return X.values.var(axis=0)


def select_hvg(X: ExpressionMatrix, k: int = 3000) -> ExpressionMatrix:
    """Keep the ``k`` most variable genes, ordered by decreasing variance.

    Ties keep the original column order.
    """
    g = X.shape[1]
    if k < 1 or k > g:
        raise DataError(f"cannot select {k} highly variable genes from {g}")
    var = gene_variances(X)
    order = np.argsort(-var, kind="stable")[:k]
    values = X.values[:, order]
    return X.with_values(values, [X.gene_ids[j] for j in order])


def densify(X: ExpressionMatrix) -> ExpressionMatrix:
    if not X.is_sparse:
        return X
    try:
        values = X.values.toarray()
    except MemoryError as exc:
        raise MemoryError(f"cannot densify a {X.shape[0]} x {X.shape[1]} expression matrix") from exc
    return X.with_values(values)


@dataclass(frozen=True)
class Preprocessed:
    matrix: ExpressionMatrix
    normalization_target: float


def preprocess(X: ExpressionMatrix, hvg_count: int = 3000) -> Preprocessed:
    """Normalize, log-transform, select ``min(hvg_count, g)`` genes and densify."""
    target = normalization_target(X)
    normed = library_size_normalize(X, target)
    logged = log1p_transform(normed)
    hvg = select_hvg(logged, min(hvg_count, X.shape[1]))
    return Preprocessed(densify(hvg), target)
