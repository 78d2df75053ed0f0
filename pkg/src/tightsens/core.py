"""Weighted point sets and the dense linear-algebra primitives used throughout."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg.lapack import dgejsv

EPS = np.finfo(np.float64).eps


class DegenerateInputError(ValueError):
    """Input that admits no meaningful sensitivity (all-zero weights, empty set, ...)."""


class RankZeroError(DegenerateInputError):
    """The scaled matrix is identically zero."""


class NumericalError(RuntimeError):
    """Non-convergence or loss of conditioning inside an iterative routine."""


class NonConvergenceError(NumericalError):
    """An iteration hit its cap. ``best`` holds the best value reached so far."""

    def __init__(self, message: str, best: Optional[float] = None, row: Optional[int] = None):
        super().__init__(message)
        self.best = best
        self.row = row


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WeightedPointSet:
    """Ordered points in R^d with non-negative weights.

    Arrays are copied and made read-only on construction.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(1, -1)
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise DegenerateInputError(f"points must be a non-empty n x d array, got shape {pts.shape}")
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise DegenerateInputError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise DegenerateInputError("points and weights must be finite")
        if np.any(w < 0):
            raise DegenerateInputError("weights must be non-negative")
        if not np.any(w > 0):
            raise DegenerateInputError("at least one weight must be positive")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def unweighted(cls, points) -> "WeightedPointSet":
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return cls(pts, np.ones(pts.shape[0]))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def subset(self, indices, weights=None) -> "WeightedPointSet":
        idx = np.asarray(indices, dtype=np.intp)
        w = self.weights[idx] if weights is None else weights
        return WeightedPointSet(self.points[idx], w)

    def weighted_mean(self) -> np.ndarray:
        return self.weights @ self.points / self.weights.sum()


@dataclass(frozen=True)
class ThinSvd:
    U: np.ndarray
    D: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.D.shape[0]

    def leverage(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.U, self.U)


@dataclass(frozen=True)
class ScaledMatrix:
    """Rows sqrt(w_i) * p_i of a weighted point set, with numerical rank."""

    rows: np.ndarray
    rank: int
    rowspace_basis: Optional[np.ndarray] = None
    svd: Optional[ThinSvd] = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class SubspaceQuery:
    """A (possibly affine) subspace given by an orthonormal basis.

    ``role="span"`` means ``basis`` spans the subspace itself; ``role="complement"``
    means it spans the orthogonal complement. ``offset`` translates the subspace.
    """

    basis: np.ndarray
    offset: Optional[np.ndarray] = None
    role: str = "span"

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=np.float64)
        if b.ndim == 1:
            b = b.reshape(-1, 1)
        if self.role not in ("span", "complement"):
            raise ValueError(f"role must be 'span' or 'complement', got {self.role!r}")
        if b.shape[1]:
            gram = b.T @ b
            if not np.allclose(gram, np.eye(b.shape[1]), atol=1e-10, rtol=0):
                raise ValueError("basis columns must be orthonormal")
        object.__setattr__(self, "basis", _frozen(b))
        if self.offset is not None:
            off = np.asarray(self.offset, dtype=np.float64).reshape(-1)
            if off.shape[0] != b.shape[0]:
                raise ValueError("offset dimension does not match basis")
            object.__setattr__(self, "offset", _frozen(off))

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        """Dimension of the subspace (not of the stored basis)."""
        if self.role == "span":
            return self.basis.shape[1]
        return self.ambient_dim - self.basis.shape[1]

    @property
    def affine(self) -> bool:
        return self.offset is not None

    def complement(self) -> "SubspaceQuery":
        """Same subspace, stored through the other role."""
        d, c = self.basis.shape
        if c == 0:
            other = np.eye(d)
        elif c == d:
            other = np.zeros((d, 0))
        else:
            q, _ = np.linalg.qr(self.basis, mode="complete")
            other = q[:, c:]
        role = "complement" if self.role == "span" else "span"
        return SubspaceQuery(other, self.offset, role)

    def sq_distances(self, points: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if x.shape[1] != self.ambient_dim:
            raise ValueError(f"points have dimension {x.shape[1]}, query has {self.ambient_dim}")
        if self.offset is not None:
            x = x - self.offset
        if self.role == "complement":
            c = x @ self.basis
            return np.einsum("ij,ij->i", c, c)
        resid = x - (x @ self.basis) @ self.basis.T
        return np.einsum("ij,ij->i", resid, resid)


def thin_svd(M) -> ThinSvd:
    """Thin SVD truncated at the numerical rank.

    Singular values below ``sigma_1 * max(n, d) * eps`` are discarded.
    """
    a = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if a.size == 0 or not np.any(a):
        raise RankZeroError("matrix is identically zero")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = s[0] * max(a.shape) * EPS
    r = int(np.count_nonzero(s > cutoff))
    return ThinSvd(_frozen(u[:, :r]), _frozen(s[:r]), _frozen(vt[:r].T))


def build_scaled_matrix(pset: WeightedPointSet) -> ScaledMatrix:
    rows = np.sqrt(pset.weights)[:, None] * pset.points
    svd = thin_svd(rows)
    return ScaledMatrix(_frozen(rows), svd.rank, svd.V, svd)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry positive; argmax picks the lowest index on ties
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def sym_eig_desc(M) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues in descending order with sign-normalised eigenvectors (columns)."""
    a = np.asarray(M, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > 1e-10 * max(scale, np.finfo(float).tiny):
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return vals[::-1].copy(), _fix_signs(vecs[:, ::-1].copy())


def subspace_cost(pset: WeightedPointSet, q: SubspaceQuery, z: float = 2.0) -> tuple[np.ndarray, float]:
    """Per-point costs ``w(p) * dist(p, S)**z`` and their sum."""
    if z < 1:
        raise ValueError("z must be >= 1")
    sq = np.maximum(q.sq_distances(pset.points), 0.0)
    dist_z = sq if z == 2 else sq ** (z / 2.0)
    costs = pset.weights * dist_z
    return costs, float(costs.sum())


def jacobi_svd(A) -> tuple[np.ndarray, np.ndarray]:
    """Right singular vectors and singular values via LAPACK's preconditioned Jacobi (dgejsv).

    Returns ``(J, sigma)`` with ``A @ J = Q * sigma`` for orthonormal ``Q``,
    sigma descending. Singular values carry high relative accuracy when ``A``
    is a well-conditioned matrix with badly scaled columns, which plain
    bidiagonalisation does not provide.
    """
    a = np.array(A, dtype=np.float64, copy=True)
    m, n = a.shape
    if m < n:  # dgejsv needs at least as many rows as columns; zero rows change nothing
        a = np.vstack([a, np.zeros((n - m, n))])
    # joba=0 ('C'): high relative accuracy for column-scaled matrices
    sva, _, v, work, _, info = dgejsv(a, joba=0)
    if info != 0:
        raise NumericalError(f"dgejsv failed with info={info}")
    sigma = sva * (work[0] / work[1])
    order = np.argsort(-sigma, kind="stable")
    return v[:, order], sigma[order]
