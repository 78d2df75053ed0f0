"""Sensitivity sampling and merge-and-reduce streaming."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DegenerateInputError, WeightedPointSet
from .sensitivity import (
    SensitivityVector,
    affine_sensitivities_all,
    baseline_projection_sensitivities,
    nonaffine_sensitivities_all,
    uniform_sensitivities,
)

DEFAULT_LEAF_SIZE = 4096


def default_vc_dim(k: int, d: int) -> int:
    return (k + 1) * (d + 1)


def sample_size(t: float, d_vc: float, eps: float, delta: float = 0.1, c: float = 1.0) -> int:
    """Advisory coreset size ``ceil(c t / eps^2 (d_vc ln t + ln 1/delta))``, at least 1.

    ``ln t`` is clamped at 0 for t <= 1.
    """
    if t <= 0:
        raise ValueError("total sensitivity must be positive")
    if not (0 < eps <= 1 and 0 < delta < 1):
        raise ValueError("eps must lie in (0, 1] and delta in (0, 1)")
    if c < 1 or d_vc < 1:
        raise ValueError("c and d_vc must be at least 1")
    log_t = max(0.0, math.log(t))
    m = c * t / eps**2 * (d_vc * log_t + math.log(1.0 / delta))
    # shave float noise so exact integers do not round up
    return max(1, math.ceil(m - 1e-9 * m))


@dataclass(frozen=True)
class Coreset:
    """Indices into the source set (with repeats) and their resampling weights."""

    source_indices: np.ndarray
    weights: np.ndarray
    method: str = "unknown"
    seed: Optional[int] = None
    t: Optional[float] = None
    k: int = 0
    affine: bool = False
    eps: float = 0.0

    def __post_init__(self):
        idx = np.array(self.source_indices, dtype=np.int64, copy=True)
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if idx.ndim != 1 or idx.shape != w.shape:
            raise ValueError("indices and weights must be 1-D arrays of equal length")
        if idx.size == 0:
            raise ValueError("a coreset holds at least one row")
        if np.any(idx < 0) or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("indices must be non-negative and weights finite and non-negative")
        idx.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "source_indices", idx)
        object.__setattr__(self, "weights", w)

    @property
    def m(self) -> int:
        return self.source_indices.shape[0]

    def points(self, source: WeightedPointSet) -> WeightedPointSet:
        """The coreset as a weighted point set drawn from ``source``."""
        if self.source_indices.max() >= source.n:
            raise IndexError("coreset references rows beyond the source set")
        return WeightedPointSet(source.points[self.source_indices], self.weights)

    def provenance(self) -> dict:
        return {
            "method": self.method,
            "k": self.k,
            "affine": self.affine,
            "eps": self.eps,
            "seed": self.seed,
            "t": self.t,
            "m": self.m,
        }

    def save(self, path, provenance_path=None) -> None:
        """Write ``index,weight`` CSV and a provenance JSON sidecar."""
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "weight"])
            for i, w in zip(self.source_indices.tolist(), self.weights.tolist()):
                writer.writerow([i, repr(w)])
        side = Path(provenance_path) if provenance_path else path.with_suffix(path.suffix + ".json")
        side.write_text(json.dumps(self.provenance(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, provenance_path=None) -> "Coreset":
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["index", "weight"]:
                raise ValueError(f"{path}: expected header 'index,weight', got {header}")
            rows = [(int(a), float(b)) for a, b in reader]
        side = Path(provenance_path) if provenance_path else path.with_suffix(path.suffix + ".json")
        meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
        idx, w = zip(*rows) if rows else ((), ())
        return cls(
            np.array(idx),
            np.array(w),
            method=meta.get("method", "unknown"),
            seed=meta.get("seed"),
            t=meta.get("t"),
            k=meta.get("k", 0),
            affine=meta.get("affine", False),
            eps=meta.get("eps", 0.0),
        )


def sample_coreset(pset: WeightedPointSet, sens: SensitivityVector, m: int, seed) -> Coreset:
    """Draw m rows i.i.d. with probability s(p)/t and weight ``t w(p) / (s(p) m)``."""
    if sens.n != pset.n:
        raise ValueError(f"sensitivities cover {sens.n} rows, point set has {pset.n}")
    if m < 1:
        raise ValueError("coreset size must be at least 1")
    s = np.asarray(sens.values, dtype=np.float64)
    t = float(s.sum())
    if not t > 0:
        raise DegenerateInputError("all sensitivities are zero")
    rng = np.random.default_rng(seed)
    idx = rng.choice(pset.n, size=m, replace=True, p=s / t)
    u = t * pset.weights[idx] / (s[idx] * m)
    return Coreset(idx, u, sens.method, _seed_repr(seed), t, sens.k, sens.affine, sens.eps)


def _seed_repr(seed):
    return int(seed) if isinstance(seed, (int, np.integer)) else None


def compute_sensitivities(
    pset: WeightedPointSet, method: str, k: int, affine: bool, eps: float, parallelism: int = 1
) -> SensitivityVector:
    """Dispatch on the user-facing method names ``tight``, ``uniform`` and ``baseline``."""
    if method == "uniform":
        return uniform_sensitivities(pset)
    if method == "tight":
        if affine:
            return affine_sensitivities_all(pset, k, eps, parallelism)
        return nonaffine_sensitivities_all(pset, k, eps, parallelism)
    if method == "baseline":
        return baseline_projection_sensitivities(pset, k, affine)
    raise ValueError(f"unknown method {method!r}; valid methods: tight, uniform, baseline")


# ---------------------------------------------------------------------------
# merge and reduce


@dataclass
class _Node:
    points: np.ndarray
    weights: np.ndarray
    indices: np.ndarray  # positions in the stream


@dataclass
class StreamTree:
    """Binary merge-and-reduce tree holding at most one coreset per level.

    Rows are buffered until ``leaf_size`` have arrived; each full leaf is
    reduced to ``reduce_size`` rows by sensitivity sampling and carried up
    like a binary counter, merging with any coreset already at its level.
    """

    reduce_size: int
    leaf_size: int = DEFAULT_LEAF_SIZE
    k: int = 1
    affine: bool = False
    eps: float = 1e-3
    method: str = "tight"
    seed: int = 0
    parallelism: int = 1
    levels: dict = field(default_factory=dict)
    consumed: int = 0
    _buffer: list = field(default_factory=list, repr=False)
    _buffered: int = 0
    _reductions: int = 0
    _dim: Optional[int] = None
    max_retained: int = 0

    def __post_init__(self):
        if self.leaf_size < 1 or self.reduce_size < 1:
            raise ValueError("leaf_size and reduce_size must be positive")

    @property
    def retained_rows(self) -> int:
        return self._buffered + sum(node.points.shape[0] for node in self.levels.values())

    def memory_bound(self) -> int:
        leaves = max(1, self.consumed // self.leaf_size)
        return self.reduce_size * (math.ceil(math.log2(leaves)) + 1) + self.leaf_size

    def _reduce(self, node: _Node) -> _Node:
        if node.points.shape[0] <= self.reduce_size:
            return node
        pset = WeightedPointSet(node.points, node.weights)
        sens = compute_sensitivities(pset, self.method, self.k, self.affine, self.eps, self.parallelism)
        seed = np.random.SeedSequence(self.seed, spawn_key=(self._reductions,))
        self._reductions += 1
        cs = sample_coreset(pset, sens, self.reduce_size, seed)
        sel = cs.source_indices
        return _Node(node.points[sel], cs.weights.copy(), node.indices[sel])

    def _insert(self, node: _Node, level: int = 0) -> None:
        while level in self.levels:
            other = self.levels.pop(level)
            merged = _Node(
                np.concatenate([other.points, node.points]),
                np.concatenate([other.weights, node.weights]),
                np.concatenate([other.indices, node.indices]),
            )
            node = self._reduce(merged)
            level += 1
        self.levels[level] = node

    def push(self, rows, weights=None) -> "StreamTree":
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.shape[0] == 0:
            return self
        if self._dim is None:
            self._dim = rows.shape[1]
        elif rows.shape[1] != self._dim:
            raise ValueError(f"chunk has dimension {rows.shape[1]}, stream has {self._dim}")
        w = np.ones(rows.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (rows.shape[0],) or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite, non-negative and one per row")
        idx = np.arange(self.consumed, self.consumed + rows.shape[0])
        self.consumed += rows.shape[0]
        start = 0
        while start < rows.shape[0]:
            take = min(self.leaf_size - self._buffered, rows.shape[0] - start)
            self._buffer.append(_Node(rows[start:start + take], w[start:start + take], idx[start:start + take]))
            self._buffered += take
            start += take
            if self._buffered == self.leaf_size:
                leaf = self._drain()
                self._insert(self._reduce(leaf))
            self.max_retained = max(self.max_retained, self.retained_rows)
        return self

    def _drain(self) -> _Node:
        parts = self._buffer
        self._buffer = []
        self._buffered = 0
        return _Node(
            np.concatenate([p.points for p in parts]),
            np.concatenate([p.weights for p in parts]),
            np.concatenate([p.indices for p in parts]),
        )

    def finalize(self, m_final: int) -> Coreset:
        """Merge every level and the buffer, then reduce once to ``m_final`` rows.

        If the merged rows already number at most ``m_final`` they are returned
        as they stand. Indices refer to positions in the stream.
        """
        parts = [self.levels[lvl] for lvl in sorted(self.levels)]
        if self._buffered:
            parts.append(_Node(
                np.concatenate([p.points for p in self._buffer]),
                np.concatenate([p.weights for p in self._buffer]),
                np.concatenate([p.indices for p in self._buffer]),
            ))
        if not parts:
            raise DegenerateInputError("cannot finalize an empty stream")
        pts = np.concatenate([p.points for p in parts])
        w = np.concatenate([p.weights for p in parts])
        idx = np.concatenate([p.indices for p in parts])
        if pts.shape[0] <= m_final:
            return Coreset(idx, w, self.method, self.seed, None, self.k, self.affine, self.eps)
        pset = WeightedPointSet(pts, w)
        sens = compute_sensitivities(pset, self.method, self.k, self.affine, self.eps, self.parallelism)
        cs = sample_coreset(pset, sens, m_final, self.seed)
        sel = cs.source_indices
        return Coreset(idx[sel], cs.weights, cs.method, self.seed, cs.t, self.k, self.affine, self.eps)


def stream_push(tree: StreamTree, rows, weights=None) -> StreamTree:
    return tree.push(rows, weights)


def stream_finalize(tree: StreamTree, m_final: int) -> Coreset:
    return tree.finalize(m_final)
