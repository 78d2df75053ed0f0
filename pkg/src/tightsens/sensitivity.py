"""Per-row sensitivities for k-subspace (k-SVD) and affine k-subspace (k-PCA) costs.

The sensitivity of row p is the largest share of the total cost that p can take
over all queries::

    s(p) = sup_Y |p_row Y|^2 / |P Y|_F^2

where row i of P is sqrt(w_i) * p_i and Y ranges over orthonormal d x (d-k)
complement bases. For k = d-1 this is the leverage score. Otherwise it is a
trace-ratio problem, solved here by the Newton-type iteration
``X <- top eigenvectors of (p^T p - s P^T P)`` with an additive-eps stopping
rule. Affine queries are reduced to linear (k+1)-subspace queries in one more
dimension by appending a large constant coordinate to every point.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._secular import secular_top_batch
from .core import (
    EPS,
    DegenerateInputError,
    NonConvergenceError,
    RankZeroError,
    WeightedPointSet,
    jacobi_svd,
    thin_svd,
)

log = logging.getLogger(__name__)

AFFINE_EPS_MAX = 1.0 / 12.0
AFFINE_EPS_MIN = 1e-3
# below this condition number of the reduced Gram, a dense symmetric eigensolver is accurate enough
DENSE_COND_LIMIT = 1e8
STALL_TOL = 1e-14

METHODS = ("leverage", "trace_ratio", "affine_lift", "uniform", "baseline_projection")


class ConditioningWarning(UserWarning):
    """Affine eps outside the range where the lift is well conditioned."""


@dataclass(frozen=True)
class TraceRatioState:
    """Diagnostics of one trace-ratio run (the final state of the iteration).

    ``history`` holds the attained ratios in order; they are non-decreasing.
    ``exit_reason`` is one of ``leverage``, ``zero_row``, ``tolerance``,
    ``certified`` or ``isotropic``.
    """

    ell: int
    gamma: float
    iterations: int
    history: tuple
    exit_reason: str
    s_new: float
    s_old: float
    X: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class LiftConfig:
    z: float
    psi: float
    r: float
    eps: float


@dataclass(frozen=True)
class SensitivityVector:
    values: np.ndarray
    total: float
    method: str
    eps: float
    k: int
    affine: bool

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def build(cls, values, method, eps, k, affine) -> "SensitivityVector":
        v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
        return cls(v, float(v.sum()), method, float(eps), int(k), bool(affine))

    @property
    def n(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# reduced problem


@dataclass(frozen=True)
class _Reduced:
    """Row-space coordinates: rows R (n x r) with R^T R = diag(lam)."""

    R: np.ndarray
    lam: np.ndarray
    leverage: np.ndarray  # squared row norms of R diag(lam)^-1/2

    @property
    def rank(self) -> int:
        return self.lam.shape[0]


def _reduce(pset: WeightedPointSet) -> _Reduced:
    rows = np.sqrt(pset.weights)[:, None] * pset.points
    svd = thin_svd(rows)
    zero = ~np.any(rows, axis=1)
    R = svd.U * svd.D
    R[zero] = 0.0  # exact zeros, not rounding noise from U
    lev = svd.leverage()
    lev[zero] = 0.0
    return _Reduced(R, svd.D**2, lev)


def _check_eps(eps: float) -> None:
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")


def _check_k(k: int, d: int) -> None:
    if not 0 <= k <= d - 1:
        raise ValueError(f"k must lie in [0, {d - 1}], got {k}")


def iteration_cap(r: int, eps: float) -> int:
    return 10 * r * max(1, math.ceil(math.log(1.0 / eps)))


def _gamma(lam: np.ndarray, ell: int) -> float:
    srt = np.sort(lam)
    return float(srt[:ell].sum() / srt[-ell:].sum())


def _ratios(M: np.ndarray, X: np.ndarray, lam: np.ndarray) -> np.ndarray:
    proj = np.einsum("ir,irl->il", M, X)
    num = np.einsum("il,il->i", proj, proj)
    den = np.einsum("r,irl->i", lam, X * X)
    return num / den


def _dense_top(M: np.ndarray, lam: np.ndarray, s: np.ndarray, ell: int) -> np.ndarray:
    G = M[:, :, None] * M[:, None, :]
    G[:, np.arange(lam.size), np.arange(lam.size)] -= s[:, None] * lam
    _, vecs = np.linalg.eigh(G)
    return vecs[:, :, ::-1][:, :, :ell]


def _trace_ratio_rows(
    red: _Reduced, rows: np.ndarray, k: int, eps: float, solver: str = "auto"
) -> tuple[np.ndarray, list[TraceRatioState]]:
    """Run the sensitivity iteration for the given rows of a reduced problem.

    Each row keeps its own state; all active rows advance in lockstep so the
    dense path can batch its eigendecompositions.
    """
    lam, r = red.lam, red.rank
    k_eff = min(k, r - 1)
    ell = r - k_eff
    n_rows = rows.shape[0]
    values = np.zeros(n_rows)

    if k_eff == r - 1:
        lev = red.leverage[rows]
        states = [
            TraceRatioState(ell, 1.0, 0, (float(v),), "leverage" if v > 0 else "zero_row", float(v), float(v))
            for v in lev
        ]
        return lev.copy(), states

    gamma = _gamma(lam, ell)
    threshold = eps * gamma / max(1.0 - gamma, EPS)
    cap = iteration_cap(r, eps)
    if solver == "auto":
        solver = "dense" if lam.max() / lam.min() <= DENSE_COND_LIMIT else "secular"
    if solver not in ("dense", "secular"):
        raise ValueError(f"unknown solver {solver!r}")

    M = red.R[rows]
    nonzero = np.einsum("ij,ij->i", M, M) > 0
    # initial iterate: the bottom-ell eigenvectors of diag(lam)
    X0 = np.eye(r)[:, np.argsort(lam, kind="stable")[:ell]]
    X = np.broadcast_to(X0, (n_rows, r, ell)).copy()

    history: list[list[float]] = [[] for _ in range(n_rows)]
    exit_reason = ["zero_row" if not nz else "" for nz in nonzero]
    probe_at = np.full(n_rows, np.nan)
    active = np.flatnonzero(nonzero)

    while active.size:
        s = _ratios(M[active], X[active], lam)
        target = np.empty(active.size)
        keep = np.ones(active.size, dtype=bool)
        for a, i in enumerate(active):
            si = float(s[a])
            hist = history[i]
            if not np.isnan(probe_at[i]):
                # probe step: a ratio at or below the probe point certifies it as an upper bound
                p = probe_at[i]
                probe_at[i] = np.nan
                if si <= p:
                    values[i] = p
                    exit_reason[i] = "certified"
                    keep[a] = False
                    continue
            hist.append(si)
            target[a] = si
            if len(hist) > cap:
                raise NonConvergenceError(
                    f"trace-ratio iteration exceeded {cap} steps", best=min(1.0, max(hist) + eps), row=int(rows[i])
                )
            if len(hist) < 2:
                continue
            inc = si - hist[-2]
            if ell == r:
                values[i] = max(hist) + eps
                exit_reason[i] = "isotropic"
                keep[a] = False
            elif inc < STALL_TOL:
                # rounding stall: probe one eps above the best attained ratio
                p = max(hist) + eps
                if p >= 1.0:
                    values[i] = 1.0
                    exit_reason[i] = "certified"
                    keep[a] = False
                else:
                    probe_at[i] = p
                    target[a] = p
            elif inc < threshold:
                values[i] = max(hist) + eps
                exit_reason[i] = "tolerance"
                keep[a] = False
        active = active[keep]
        target = target[keep]
        if not active.size:
            break
        if solver == "dense":
            X[active] = _dense_top(M[active], lam, target, ell)
        else:
            X[active] = secular_top_batch(lam, M[active], target, ell)

    states = []
    for i in range(n_rows):
        hist = tuple(history[i])
        s_new = hist[-1] if hist else 0.0
        s_old = hist[-2] if len(hist) > 1 else -math.inf
        states.append(TraceRatioState(ell, gamma, len(hist), hist, exit_reason[i], s_new, s_old, X[i].copy()))
    return np.minimum(values, 1.0), states


def _map_rows(red: _Reduced, k: int, eps: float, parallelism: int, solver: str = "auto"):
    n = red.R.shape[0]
    rows = np.arange(n)
    if parallelism <= 1 or n < 2 * parallelism:
        return _trace_ratio_rows(red, rows, k, eps, solver)
    chunks = np.array_split(rows, parallelism)
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        parts = list(pool.map(_trace_ratio_rows, [red] * len(chunks), chunks, [k] * len(chunks),
                              [eps] * len(chunks), [solver] * len(chunks)))
    values = np.concatenate([p[0] for p in parts])
    states = [st for p in parts for st in p[1]]
    return values, states


# ---------------------------------------------------------------------------
# non-affine


def leverage_sensitivities(pset: WeightedPointSet) -> SensitivityVector:
    """Exact sensitivities for hyperplane queries (k = d - 1): the leverage scores."""
    lev = thin_svd(np.sqrt(pset.weights)[:, None] * pset.points).leverage()
    return SensitivityVector.build(lev, "leverage", 0.0, pset.d - 1, False)


def nonaffine_sensitivity(
    pset: WeightedPointSet, index: int, k: int, eps: float, solver: str = "auto"
) -> tuple[float, TraceRatioState]:
    """Additive-eps upper estimate of one row's k-subspace sensitivity.

    Returns ``s'`` with ``s(p) <= s' <= s(p) + eps`` together with the
    iteration diagnostics. When the data rank r is at most k + 1 the query
    dimension is capped at r - 1 and the exact leverage score is returned.
    """
    _check_eps(eps)
    _check_k(k, pset.d)
    if not 0 <= index < pset.n:
        raise IndexError(f"row {index} out of range for {pset.n} points")
    if pset.weights[index] <= 0:
        raise DegenerateInputError(f"row {index} has zero weight")
    if not np.any(pset.points[index]):
        return 0.0, TraceRatioState(pset.d - k, 0.0, 0, (), "zero_row", 0.0, -math.inf)
    red = _reduce(pset)
    values, states = _trace_ratio_rows(red, np.array([index]), k, eps, solver)
    return float(values[0]), states[0]


def nonaffine_sensitivities_all(
    pset: WeightedPointSet,
    k: int,
    eps: float,
    parallelism: int = 1,
    solver: str = "auto",
    return_states: bool = False,
):
    """Sensitivities of every row for linear k-subspace queries.

    The thin SVD, the spectrum and gamma are computed once and shared across
    rows. With ``parallelism > 1`` rows are split across worker processes.
    """
    _check_eps(eps)
    _check_k(k, pset.d)
    red = _reduce(pset)
    values, states = _map_rows(red, k, eps, parallelism, solver)
    method = "leverage" if min(k, red.rank - 1) == red.rank - 1 else "trace_ratio"
    out = SensitivityVector.build(
        values, method, 0.0 if method == "leverage" else eps, k, False
    )
    return (out, states) if return_states else out


# ---------------------------------------------------------------------------
# affine


def lift_config(pset: WeightedPointSet, eps: float, z: float = 2.0) -> LiftConfig:
    psi = (eps / z) ** z
    max_d = float(np.max(np.sum(pset.points**2, axis=1) ** (z / 2.0)))
    return LiftConfig(z=z, psi=psi, r=1.0 + max_d / (psi * eps**2), eps=eps)


def lift_points(pset: WeightedPointSet, eps: float) -> tuple[WeightedPointSet, LiftConfig]:
    """Append the constant coordinate r to every point; weights are unchanged."""
    if not 0 < eps <= AFFINE_EPS_MAX:
        raise ValueError(f"affine eps must lie in (0, 1/12], got {eps}")
    cfg = lift_config(pset, eps)
    lifted = np.column_stack([pset.points, np.full(pset.n, cfg.r)])
    return WeightedPointSet(lifted, pset.weights), cfg


def _normalize(pset: WeightedPointSet) -> WeightedPointSet:
    scale = float(np.sqrt(np.max(np.sum(pset.points**2, axis=1))))
    if scale == 0.0 or scale == 1.0:
        return pset
    return WeightedPointSet(pset.points / scale, pset.weights)


def _reduce_lifted(pset: WeightedPointSet, r: float) -> _Reduced:
    """Row-space coordinates of the lifted set without forming it.

    The lifted matrix mixes entries of size 1 and r ~ 1/eps^4, so a plain SVD
    loses its small singular values. Split it as
    ``[c, U_perp] @ T`` where c is the normalised sqrt-weight vector and
    U_perp spans the weighted-centred data; T is tiny and well conditioned up
    to column scaling, which one-sided Jacobi handles to high relative accuracy.
    """
    w = pset.weights
    W = w.sum()
    mu = w @ pset.points / W
    centred = np.sqrt(w)[:, None] * (pset.points - mu)
    d = pset.d
    try:
        svd = thin_svd(centred)
        U, S, V = svd.U, svd.D, svd.V
    except RankZeroError:
        U, S, V = np.zeros((pset.n, 0)), np.zeros(0), np.zeros((d, 0))
    rk = S.shape[0]
    T = np.zeros((1 + rk, d + 1))
    T[0, :d] = np.sqrt(W) * mu
    T[0, d] = r * np.sqrt(W)
    T[1:, :d] = S[:, None] * V.T
    a = np.column_stack([np.sqrt(w / W), U])
    J, sigma = jacobi_svd(T.T)
    R = (a @ J) * sigma
    leverage = np.einsum("ij,ij->i", a, a)
    return _Reduced(R, sigma**2, leverage)


def _check_affine_eps(eps: float) -> None:
    if not 0 < eps <= AFFINE_EPS_MAX:
        raise ValueError(f"affine eps must lie in (0, 1/12], got {eps}")
    if eps < AFFINE_EPS_MIN:
        warnings.warn(
            f"affine eps={eps:g} is below {AFFINE_EPS_MIN:g}; the lift coordinate is about "
            f"{4 / eps**4:.1e} and results may lose accuracy",
            ConditioningWarning,
            stacklevel=3,
        )


def affine_sensitivities_all(
    pset: WeightedPointSet,
    k: int,
    eps: float,
    parallelism: int = 1,
    solver: str = "auto",
    return_states: bool = False,
):
    """Affine k-subspace sensitivities of every row, each within [s, s + 161 eps].

    Points are rescaled so the largest norm is 1, lifted with the constant
    coordinate r, and the linear (k+1)-subspace sensitivity of the lifted set
    is raised by 80 eps.
    """
    _check_affine_eps(eps)
    _check_k(k, pset.d)
    normed = _normalize(pset)
    cfg = lift_config(normed, eps)
    red = _reduce_lifted(normed, cfg.r)
    values, states = _map_rows(red, k + 1, eps, parallelism, solver)
    values = np.where(pset.weights > 0, values + 80 * eps, 0.0)
    out = SensitivityVector.build(values, "affine_lift", eps, k, True)
    return (out, states) if return_states else out


def affine_sensitivity(pset: WeightedPointSet, index: int, k: int, eps: float, solver: str = "auto") -> float:
    """Affine k-subspace sensitivity estimate of a single row."""
    _check_affine_eps(eps)
    _check_k(k, pset.d)
    if not 0 <= index < pset.n:
        raise IndexError(f"row {index} out of range for {pset.n} points")
    if pset.weights[index] <= 0:
        raise DegenerateInputError(f"row {index} has zero weight")
    normed = _normalize(pset)
    cfg = lift_config(normed, eps)
    red = _reduce_lifted(normed, cfg.r)
    values, _ = _trace_ratio_rows(red, np.array([index]), k + 1, eps, solver)
    return float(min(1.0, values[0] + 80 * eps))


# ---------------------------------------------------------------------------
# baselines


def uniform_sensitivities(pset: WeightedPointSet) -> SensitivityVector:
    n = pset.n
    return SensitivityVector.build(np.full(n, 1.0 / n), "uniform", 0.0, 0, False)


def baseline_projection_sensitivities(pset: WeightedPointSet, k: int, affine: bool = False) -> SensitivityVector:
    """Projection-based sensitivity upper bound used as the comparison baseline.

    Each row gets the leverage score of its projection onto the optimal
    k-subspace (or k-flat) plus its share of the optimal cost.
    """
    from .evaluation import solve_optimal

    _check_k(k, pset.d)
    q = solve_optimal(pset, k, affine)
    sw = np.sqrt(pset.weights)
    pts = pset.points - q.offset if affine else pset.points
    proj = sw[:, None] * (pts @ q.basis)
    if affine:
        proj = np.column_stack([proj, sw])
    try:
        lev = thin_svd(proj).leverage() if proj.shape[1] else np.zeros(pset.n)
    except RankZeroError:
        lev = np.zeros(pset.n)
    resid = pset.weights * q.sq_distances(pset.points)
    total = resid.sum()
    scale = float(pset.weights @ np.sum(pts**2, axis=1))
    # a residual at rounding level means the data lies in the subspace
    share = resid / total if total > 64 * EPS * scale else np.zeros(pset.n)
    return SensitivityVector.build(lev + share, "baseline_projection", 0.0, k, affine)
