"""Optimal subspaces, coreset error, the experiment protocol and brute-force oracles."""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .core import DegenerateInputError, SubspaceQuery, WeightedPointSet, subspace_cost, thin_svd
from .coreset import Coreset, compute_sensitivities, sample_coreset
from .sensitivity import lift_config

REGRET_SLACK = 1e-9


def solve_optimal(pset: WeightedPointSet, k: int, affine: bool = False) -> SubspaceQuery:
    """Optimal k-subspace (or k-flat when ``affine``) for the weighted squared distance."""
    if not 0 <= k < pset.d:
        raise ValueError(f"k must lie in [0, {pset.d - 1}], got {k}")
    w = pset.weights
    offset = None
    pts = pset.points
    if affine:
        offset = pset.weighted_mean()
        pts = pts - offset
    rows = np.sqrt(w)[:, None] * pts
    if k == 0 or not np.any(rows):
        basis = np.zeros((pset.d, 0))
    else:
        _, _, vt = np.linalg.svd(rows, full_matrices=False)
        basis = vt[:k].T
        if basis.shape[1] < k:
            # fewer rows than k: pad with an orthonormal completion
            q, _ = np.linalg.qr(np.column_stack([basis, np.eye(pset.d)]))
            basis = q[:, :k]
    return SubspaceQuery(basis, offset, "span")


def opt_cost(pset: WeightedPointSet, k: int, affine: bool = False) -> float:
    return subspace_cost(pset, solve_optimal(pset, k, affine))[1]


def coreset_error(pset_full: WeightedPointSet, coreset: Coreset | WeightedPointSet, k: int, affine: bool = False,
                  opt: Optional[float] = None) -> float:
    """Relative regret ``cost_full(q) / OPT - 1`` of the subspace q solved on the coreset."""
    cset = coreset.points(pset_full) if isinstance(coreset, Coreset) else coreset
    q = solve_optimal(cset, k, affine)
    cost = subspace_cost(pset_full, q)[1]
    if opt is None:
        opt = opt_cost(pset_full, k, affine)
    if opt <= 0:
        if cost <= 0:
            return 0.0
        raise DegenerateInputError("the full data fit exactly but the coreset solution does not")
    return cost / opt - 1.0


# ---------------------------------------------------------------------------
# experiments

METHOD_NAMES = ("uniform", "baseline", "tight")


def cell_seed(root_seed: int, method_index: int, size_index: int, trial: int) -> int:
    ss = np.random.SeedSequence(root_seed, spawn_key=(method_index, size_index, trial))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class ExperimentReport:
    dataset: str
    k: int
    affine: bool
    methods: list
    sizes: list
    trials: int
    root_seed: int
    rows: list = field(default_factory=list)  # one dict per (method, m, trial)
    timings: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def cells(self) -> dict:
        """Aggregates keyed by ``(method, m)``."""
        out = {}
        for method in self.methods:
            for m in self.sizes:
                rs = [r for r in self.rows if r["method"] == method and r["m"] == m]
                errs = np.array([r["error"] for r in rs if r["error"] is not None], dtype=float)
                out[(method, m)] = {
                    "mean": float(errs.mean()) if errs.size else None,
                    "std": float(errs.std(ddof=1)) if errs.size > 1 else 0.0 if errs.size else None,
                    "trials": int(errs.size),
                    "seeds": [r["seed"] for r in rs],
                }
        return out

    def mean_error(self, method: str, m: int) -> float:
        return self.cells()[(method, m)]["mean"]

    def errors(self, method: str, m: int) -> np.ndarray:
        return np.array([r["error"] for r in self.rows if r["method"] == method and r["m"] == m], dtype=float)

    def write_csv(self, path, timings: bool = True) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["method", "m", "trial", "seed", "error", "solve_ms", "sample_ms"])
            for r in self.rows:
                err = "" if r["error"] is None else repr(r["error"])
                solve = repr(r["solve_ms"]) if timings else ""
                sample = repr(r["sample_ms"]) if timings else ""
                writer.writerow([r["method"], r["m"], r["trial"], r["seed"], err, solve, sample])

    def to_json(self, timings: bool = True) -> dict:
        cells = [
            {"method": method, "m": m, **agg}
            for (method, m), agg in self.cells().items()
        ]
        out = {
            "dataset": self.dataset,
            "k": self.k,
            "affine": self.affine,
            "methods": list(self.methods),
            "sizes": list(self.sizes),
            "trials": self.trials,
            "root_seed": self.root_seed,
            "cells": cells,
            "failures": self.failures,
        }
        if timings:
            out["timings_ms"] = self.timings
        return out

    def write_json(self, path, timings: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_json(timings), indent=2) + "\n", encoding="utf-8")


def _run_cell(pset, sens, m, seed, k, affine, opt):
    t0 = time.perf_counter()
    cs = sample_coreset(pset, sens, m, seed)
    t1 = time.perf_counter()
    err = coreset_error(pset, cs, k, affine, opt)
    t2 = time.perf_counter()
    return err, (t2 - t1) * 1e3, (t1 - t0) * 1e3


def run_experiment(
    pset: WeightedPointSet,
    k: int,
    affine: bool,
    methods: Sequence[str],
    sizes: Sequence[int],
    trials: int,
    root_seed: int = 0,
    eps: float = 1e-3,
    dataset: str = "",
    parallelism: int = 1,
) -> ExperimentReport:
    """Sample ``trials`` coresets per (method, size) and record their relative regret.

    Sensitivities are computed once per method. Per-cell seeds are derived
    from ``root_seed`` and the cell coordinates, so results do not depend on
    execution order. Cell failures are recorded, not raised.
    """
    for method in methods:
        if method not in METHOD_NAMES:
            raise ValueError(f"unknown method {method!r}; valid methods: {', '.join(METHOD_NAMES)}")
    report = ExperimentReport(dataset, k, affine, list(methods), [int(m) for m in sizes], trials, root_seed)
    t0 = time.perf_counter()
    opt = opt_cost(pset, k, affine)
    report.timings["opt"] = (time.perf_counter() - t0) * 1e3

    jobs = []
    for mi, method in enumerate(methods):
        t0 = time.perf_counter()
        sens = compute_sensitivities(pset, method, k, affine, eps, parallelism)
        report.timings[f"sensitivity_{method}"] = (time.perf_counter() - t0) * 1e3
        for si, m in enumerate(report.sizes):
            for trial in range(trials):
                jobs.append((method, m, trial, cell_seed(root_seed, mi, si, trial), sens))

    def args(job):
        method, m, trial, seed, sens = job
        return pset, sens, m, seed, k, affine, opt

    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(_run_cell, *args(job)) for job in jobs]
            results = []
            for fut in futures:
                try:
                    results.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    results.append(exc)
    else:
        results = []
        for job in jobs:
            try:
                results.append(_run_cell(*args(job)))
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                results.append(exc)

    for (method, m, trial, seed, _), res in zip(jobs, results):
        if isinstance(res, Exception):
            report.failures.append({"method": method, "m": m, "trial": trial, "seed": seed, "error": str(res)})
            report.rows.append({"method": method, "m": m, "trial": trial, "seed": seed,
                                "error": None, "solve_ms": 0.0, "sample_ms": 0.0})
        else:
            err, solve_ms, sample_ms = res
            report.rows.append({"method": method, "m": m, "trial": trial, "seed": seed,
                                "error": err, "solve_ms": solve_ms, "sample_ms": sample_ms})
    return report


# ---------------------------------------------------------------------------
# oracles


def _reduced_rows(pset: WeightedPointSet):
    svd = thin_svd(np.sqrt(pset.weights)[:, None] * pset.points)
    return svd.U * svd.D, svd.D**2


def _orth(Z: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(Z)
    return q


def _sphere_grid(dim: int, resolution: int) -> np.ndarray:
    """Unit vectors on a hyperspherical-angle grid, one hemisphere."""
    if dim == 1:
        return np.ones((1, 1))
    n_ang = dim - 1
    axes = [np.linspace(0.0, np.pi, resolution, endpoint=False) for _ in range(n_ang)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n_ang)
    out = np.ones((grid.shape[0], dim))
    for j in range(n_ang):
        out[:, j] *= np.cos(grid[:, j])
        out[:, j + 1:] *= np.sin(grid[:, j])[:, None]
    return out


def _ascend(Q, m, lam, direct, total_m, total_lam, iters: int = 120):
    """Batched Riemannian gradient ascent of the ratio over orthonormal frames Q (b, r, c).

    Per-frame step sizes grow on success and shrink on failure; frames are
    re-orthonormalised after each step. Stops once no frame has improved for
    a while.
    """
    def retract(Z):
        if Z.shape[2] == 1:
            return Z / np.linalg.norm(Z, axis=1, keepdims=True)
        return np.linalg.qr(Z)[0]

    def value_and_grad(Q):
        mq = np.einsum("r,brc->bc", m, Q)
        num = np.sum(mq**2, axis=1)
        den = np.einsum("r,brc->b", lam, Q * Q)
        d_num = 2 * m[None, :, None] * mq[:, None, :]
        d_den = 2 * lam[None, :, None] * Q
        if direct:
            f = num / den
            g = (d_num - f[:, None, None] * d_den) / den[:, None, None]
        else:
            top, bot = total_m - num, total_lam - den
            f = top / bot
            g = (-d_num + f[:, None, None] * d_den) / bot[:, None, None]
        g -= Q @ (np.swapaxes(Q, 1, 2) @ g)
        return f, g

    with np.errstate(divide="ignore", invalid="ignore"):
        f, g = value_and_grad(Q)
        step = np.full(Q.shape[0], 0.1 / max(float(lam.max()), 1e-300) * max(float(lam.sum()), 1e-300))
        idle = 0
        for _ in range(iters):
            trial = retract(Q + step[:, None, None] * g)
            f_new, g_new = value_and_grad(trial)
            ok = f_new > f
            idle = 0 if np.any(f_new > f * (1 + 1e-15)) else idle + 1
            if idle >= 30:
                break
            Q = np.where(ok[:, None, None], trial, Q)
            f = np.where(ok, f_new, f)
            g = np.where(ok[:, None, None], g_new, g)
            step = np.where(ok, step * 1.5, step * 0.5)
    return Q


def _polish(Q0, m, lam, direct, total_m, total_lam):
    """BFGS on an unconstrained frame V; the ratio depends only on span(V).

    With P = V (V^T V)^-1 V^T the gradient is 2 (I - P) G V (V^T V)^-1, where
    G is the derivative of the ratio with respect to P.
    """
    r, c = Q0.shape
    mm = np.outer(m, m)
    L = np.diag(lam)

    def neg(v):
        V = v.reshape(r, c)
        S_inv = np.linalg.inv(V.T @ V)
        P = V @ S_inv @ V.T
        num, den = m @ P @ m, float(np.sum(lam * np.diag(P)))
        if direct:
            f = num / den
            G = (mm - f * L) / den
        else:
            f = (total_m - num) / (total_lam - den)
            G = (f * L - mm) / (total_lam - den)
        grad = 2 * (np.eye(r) - P) @ G @ V @ S_inv
        return -f, -grad.ravel()

    with np.errstate(divide="ignore", invalid="ignore"):
        f0 = -neg(Q0.ravel())[0]
        try:
            res = minimize(neg, Q0.ravel(), jac=True, method="BFGS", options={"gtol": 1e-13})
        except np.linalg.LinAlgError:
            return Q0.ravel(), f0
    if np.isfinite(res.fun) and -res.fun > f0:
        return res.x, float(-res.fun)
    return Q0.ravel(), f0


def oracle_nonaffine_sensitivity(
    pset: WeightedPointSet, index: int, k: int, resolution: int = 24, restarts: int = 4, seed: int = 0
) -> tuple[float, np.ndarray]:
    """Brute-force lower bound on a row's k-subspace sensitivity.

    Works in row-space coordinates (rank r <= 4 in practice). The query is
    parameterised by whichever of the subspace or its complement has smaller
    dimension: a hyperspherical grid for single vectors, random frames
    otherwise. The best grid points are improved by batched gradient ascent
    and the top ``restarts`` of those are polished by BFGS. Returns
    the best ratio and the complement basis (r x ell) that attains it.
    """
    R, lam = _reduced_rows(pset)
    r = lam.size
    m = R[index]
    if not np.any(m):
        return 0.0, np.zeros((r, 0))
    ell = max(1, r - k)
    kk = r - ell
    total_m = m @ m
    total_lam = lam.sum()

    # Y parameterised directly when ell <= kk, otherwise through its complement X
    direct = ell <= kk
    cols = ell if direct else kk
    if cols == 0:
        return float(total_m / total_lam), np.eye(r)

    def ratios(Q):
        num = np.sum(np.einsum("r,brc->bc", m, Q) ** 2, axis=1)
        den = np.einsum("r,brc->b", lam, Q * Q)
        if direct:
            return num / den
        return (total_m - num) / (total_lam - den)

    def ratio(v):
        return float(ratios(_orth(v.reshape(r, cols))[None])[0])

    rng = np.random.default_rng(seed)
    if cols == 1:
        starts = _sphere_grid(r, resolution)[:, :, None]
    else:
        starts = rng.normal(size=(resolution**2 * 4, r, cols))
    Q = np.linalg.qr(starts)[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.nan_to_num(ratios(Q), nan=-np.inf)
    top = np.argsort(-scores, kind="stable")[: max(restarts, 32)]
    Q = _ascend(Q[top], m, lam, direct, total_m, total_lam)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.nan_to_num(ratios(Q), nan=-np.inf)
    best_val, best_v = -np.inf, None
    for i in np.argsort(-scores, kind="stable")[:restarts]:
        v, val = _polish(Q[i], m, lam, direct, total_m, total_lam)
        if val > best_val:
            best_val, best_v = val, v
    Q = _orth(best_v.reshape(r, cols))
    if direct:
        Y = Q
    else:
        full, _ = np.linalg.qr(np.column_stack([Q, np.eye(r)]))
        Y = full[:, cols:]
    return float(best_val), Y


def oracle_affine_sensitivity(
    pset: WeightedPointSet, index: int, k: int = 0, restarts: int = 8, seed: int = 0
) -> tuple[float, np.ndarray]:
    """Brute-force lower bound on a row's 1-mean (k = 0) affine sensitivity.

    Maximises ``w_p |p - c|^2 / sum_q w_q |q - c|^2`` over centres c with
    local searches started from every other data point, the weighted mean and
    ``restarts`` random centres.
    """
    if k != 0:
        raise ValueError("the centre oracle covers k = 0 only")
    pts, w = pset.points, pset.weights
    p, wp = pts[index], w[index]
    W, mu = w.sum(), pset.weighted_mean()

    def value_and_grad(C):
        a = np.sum((p - C) ** 2, axis=1)
        den = np.sum((pts[None] - C[:, None]) ** 2, axis=2) @ w
        f = wp * a / den
        grad = (-2 * wp * (p - C) + 2 * W * (mu - C) * f[:, None]) / den[:, None]
        return f, grad

    def neg_ratio(c):
        f, g = value_and_grad(c[None])
        return -float(f[0]), -g[0]

    rng = np.random.default_rng(seed)
    scale = np.max(np.abs(pts)) + 1.0
    others = np.delete(pts, index, axis=0)
    C = np.vstack([
        others + 1e-6 * scale * rng.normal(size=others.shape),
        mu[None],
        rng.normal(size=(restarts, pset.d)) * scale,
    ])
    # batched ascent with per-start step control, then BFGS on the best few
    with np.errstate(divide="ignore", invalid="ignore"):
        f, g = value_and_grad(C)
        step = np.full(C.shape[0], 0.1 * scale**2)
        for _ in range(300):
            trial = C + step[:, None] * g
            f_new, g_new = value_and_grad(trial)
            ok = f_new > f
            C = np.where(ok[:, None], trial, C)
            f = np.where(ok, f_new, f)
            g = np.where(ok[:, None], g_new, g)
            step = np.where(ok, step * 1.5, step * 0.5)
    f = np.nan_to_num(f, nan=-np.inf)
    best, best_c = -math.inf, None
    for i in np.argsort(-f, kind="stable")[:3]:
        res = minimize(neg_ratio, C[i], jac=True, method="BFGS", options={"gtol": 1e-12})
        for c in (res.x, C[i]):
            val = -neg_ratio(c)[0]
            if val > best:
                best, best_c = val, c
    # far-away centres approach w_p / W
    far = wp / w.sum()
    if far > best:
        best, best_c = far, None
    return float(best), best_c


def affine_sensitivity_closed_form(pset: WeightedPointSet) -> np.ndarray:
    """Exact 1-mean sensitivities ``w/W + w |p - mu|^2 / sum_q w_q |q - mu|^2``."""
    w = pset.weights
    mu = pset.weighted_mean()
    sq = np.sum((pset.points - mu) ** 2, axis=1)
    var = w @ sq
    if var == 0:
        return w / w.sum()
    return w / w.sum() + w * sq / var


@dataclass
class LiftCheckReport:
    trials: int
    z: float
    eps: float
    checks: dict  # claim -> number of (trial, point) pairs checked
    violations: dict  # claim -> number of violations
    worst: dict  # claim -> largest observed lhs / rhs

    @property
    def passed(self) -> bool:
        return not any(self.violations.values())


def check_lift_inequalities(
    pset: WeightedPointSet,
    eps: float,
    z: float = 2.0,
    trials: int = 1000,
    seed: int = 0,
    regime: Optional[str] = None,
    rel_slack: float = 1e-9,
) -> LiftCheckReport:
    """Numerically check the distance sandwich behind the affine-to-linear lift.

    For random affine k-subspaces S of R^d and the linear (k+1)-subspace S' of
    R^{d+1} spanned by ``{(x | r) : x in S}``:

    * if ``D(0, S) >= eps r``: ``|D(0,S) - D(p,S)| <= 2 eps D(0,S)`` and
      ``|D(r e, S') - D(p', S')| <= (2^z + 1) eps D(r e, S')``;
    * otherwise ``D(p', S') <= D(p, S) <= (1 + 6 z eps) D(p', S')``.

    ``regime`` restricts sampling to ``"far"`` (first case) or ``"near"``;
    by default trials alternate.
    """
    if z < 1:
        raise ValueError("z must be >= 1")
    cfg = lift_config(pset, eps, z)
    r = cfg.r
    d = pset.d
    rng = np.random.default_rng(seed)
    pts = pset.points
    lifted = np.column_stack([pts, np.full(pset.n, r)])
    e_last = np.zeros(d + 1)
    e_last[-1] = r
    claims = ("i_origin", "i_lifted", "ii_lower", "ii_upper")
    checks = dict.fromkeys(claims, 0)
    violations = dict.fromkeys(claims, 0)
    worst = dict.fromkeys(claims, 0.0)

    def dz(sq):
        return np.maximum(sq, 0.0) ** (z / 2.0)

    def record(name, lhs, rhs):
        checks[name] += lhs.size
        bad = lhs > rhs * (1 + rel_slack) + 1e-300
        violations[name] += int(np.count_nonzero(bad))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
        worst[name] = max(worst[name], float(np.max(ratio)))

    for trial in range(trials):
        far = (trial % 2 == 0) if regime is None else regime == "far"
        k = int(rng.integers(0, d))
        X = _orth(rng.normal(size=(d, k))) if k else np.zeros((d, 0))
        direction = rng.normal(size=d)
        direction -= X @ (X.T @ direction)
        nd = np.linalg.norm(direction)
        if nd == 0:  # k = d has no normal direction; cannot happen for k <= d - 1
            continue
        direction /= nd
        if far:
            target = eps * r * 10 ** rng.uniform(0, 3)
        else:
            target = eps * r * (0.0 if rng.random() < 0.1 else 10 ** rng.uniform(-6, 0) * (1 - 1e-9))
        l_perp = direction * target ** (1.0 / z)
        offset = l_perp + (X @ rng.normal(size=k) if k else 0.0)
        S = SubspaceQuery(X, offset, "span")
        v = np.append(l_perp, r)
        basis = np.column_stack([np.vstack([X, np.zeros((1, k))]), v / np.linalg.norm(v)])
        S_lift = SubspaceQuery(basis, None, "span")

        d_origin = float(dz(S.sq_distances(np.zeros((1, d))))[0])
        d_p = dz(S.sq_distances(pts))
        d_lift = dz(S_lift.sq_distances(lifted))
        if d_origin >= eps * r:
            d_top = float(dz(S_lift.sq_distances(e_last[None, :]))[0])
            record("i_origin", np.abs(d_origin - d_p), np.full(pset.n, 2 * eps * d_origin))
            record("i_lifted", np.abs(d_top - d_lift), np.full(pset.n, (2**z + 1) * eps * d_top))
        else:
            record("ii_lower", d_lift, d_p)
            record("ii_upper", d_p, (1 + 6 * z * eps) * d_lift)
    return LiftCheckReport(trials, z, eps, checks, violations, worst)
