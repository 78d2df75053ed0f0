"""Dataset ingestion: dense CSV and sparse MatrixMarket."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.io
import scipy.sparse as sp

from .core import WeightedPointSet


class InputError(ValueError):
    """Malformed or inconsistent input file."""


@dataclass(frozen=True)
class DatasetSpec:
    path: Path
    format: str = "auto"  # csv | matrix-market | auto
    weight_column: Optional[Union[int, str]] = None
    subsample: Optional[int] = None
    subsample_seed: int = 0
    normalize: bool = False

    def resolved_format(self) -> str:
        if self.format != "auto":
            return self.format
        return "matrix-market" if Path(self.path).suffix.lower() in (".mtx", ".mm") else "csv"


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_csv(path, weight_column: Optional[Union[int, str]] = None) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Parse a numeric CSV (optional header row) into points and optional weights."""
    path = Path(path)
    rows, header = [], None
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            if header is None and not rows and not all(_is_number(f) for f in rec):
                header = [f.strip() for f in rec]
                continue
            try:
                vals = [float(f) for f in rec]
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: non-numeric field ({exc})") from None
            if rows and len(vals) != len(rows[0]):
                raise InputError(f"{path}:{lineno}: expected {len(rows[0])} fields, got {len(vals)}")
            rows.append(vals)
    if not rows:
        raise InputError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise InputError(f"{path}: non-finite values")
    if weight_column is None:
        return data, None
    if isinstance(weight_column, str) and not weight_column.lstrip("-").isdigit():
        if header is None or weight_column not in header:
            raise InputError(f"{path}: no column named {weight_column!r}")
        col = header.index(weight_column)
    else:
        col = int(weight_column)
    if not -data.shape[1] <= col < data.shape[1]:
        raise InputError(f"{path}: weight column {col} out of range")
    weights = data[:, col]
    return np.delete(data, col % data.shape[1], axis=1), weights


def read_matrix_market(path) -> sp.csr_matrix:
    """Read a coordinate MatrixMarket file, checking shape and entry count against its header."""
    path = Path(path)
    try:
        n, d, nnz, fmt, _, symmetry = scipy.io.mminfo(str(path))
        raw = scipy.io.mmread(str(path))
    except (ValueError, OSError, IndexError) as exc:
        raise InputError(f"{path}: invalid MatrixMarket file ({exc})") from None
    if raw.shape != (n, d):
        raise InputError(f"{path}: header says {n}x{d}, read {raw.shape}")
    if fmt == "coordinate" and symmetry == "general" and sp.coo_matrix(raw).nnz != nnz:
        raise InputError(f"{path}: header says {nnz} entries, read {sp.coo_matrix(raw).nnz}")
    return sp.csr_matrix(raw, dtype=np.float64)


def write_matrix_market(path, matrix) -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix))


def rowspace_coordinates(mat) -> np.ndarray:
    """Dense n x r rows with the same Gram matrix as ``mat``.

    Used for wide sparse inputs: squared distances to any subspace spanned
    inside the row space, and therefore sensitivities and optimal costs, are
    unchanged.
    """
    gram = (mat @ mat.T).toarray() if sp.issparse(mat) else mat @ mat.T
    vals, vecs = np.linalg.eigh(gram)
    keep = vals > vals.max() * gram.shape[0] * np.finfo(float).eps if vals.size and vals.max() > 0 else []
    vals, vecs = vals[keep][::-1], vecs[:, keep][:, ::-1]
    return vecs * np.sqrt(vals)


def subsample_rows(n: int, size: int, seed) -> np.ndarray:
    if size >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=size, replace=False))


def load_dataset(spec: DatasetSpec) -> WeightedPointSet:
    fmt = spec.resolved_format()
    weights = None
    if fmt == "csv":
        pts, weights = read_csv(spec.path, spec.weight_column)
        if spec.subsample is not None:
            sel = subsample_rows(pts.shape[0], spec.subsample, spec.subsample_seed)
            pts = pts[sel]
            weights = None if weights is None else weights[sel]
    elif fmt == "matrix-market":
        if spec.weight_column is not None:
            raise InputError("weight columns are only supported for CSV input")
        mat = read_matrix_market(spec.path)
        if spec.subsample is not None:
            mat = mat[subsample_rows(mat.shape[0], spec.subsample, spec.subsample_seed)]
        if mat.shape[1] > mat.shape[0]:
            pts = rowspace_coordinates(mat)
            if pts.shape[1] == 0:
                raise InputError(f"{spec.path}: matrix is identically zero")
        else:
            pts = mat.toarray()
    else:
        raise InputError(f"unknown format {spec.format!r}")
    if spec.normalize:
        scale = np.sqrt(np.max(np.sum(pts**2, axis=1)))
        if scale > 0:
            pts = pts / scale
    if weights is None:
        weights = np.ones(pts.shape[0])
    try:
        return WeightedPointSet(pts, weights)
    except ValueError as exc:
        raise InputError(f"{spec.path}: {exc}") from None
