"""Top eigenvectors of ``m m^T - s diag(lam)`` by the secular equation.

With ``lam`` spanning many orders of magnitude (the lifted affine problem puts
one eigenvalue near r**2 and the rest near 1), a dense eigensolver resolves the
small eigenvalues only to an absolute accuracy of about ``eps * s * lam.max()``,
which loses the ratio entirely. Rewriting the matrix as ``D + z z^T`` with
``D = -s diag(lam)`` and solving the secular equation relative to the nearest
pole keeps every eigenvalue and eigenvector accurate relative to its own pole
gap.
"""
from __future__ import annotations

import numpy as np

from .core import EPS

_TIE_RTOL = 8 * EPS
_DEFLATE_RTOL = 64 * EPS
_LOG_SPAN = 200.0
_BISECT_STEPS = 72


def _unit(i: int, r: int) -> np.ndarray:
    v = np.zeros(r)
    v[i] = 1.0
    return v


def _zero_shift_top(lam: np.ndarray, m: np.ndarray, ell: int) -> np.ndarray:
    # G = m m^T: the top vector is m, the rest of the zero eigenspace is arbitrary;
    # fill it with the smallest-lam coordinates
    r = lam.size
    order = np.argsort(lam, kind="stable")
    cols = [m / np.linalg.norm(m)] + [_unit(i, r) for i in order]
    q, _ = np.linalg.qr(np.column_stack(cols))
    return q[:, :ell]


def _solve(lr: np.ndarray, Z: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of ``diag(-s_b * lr) + z_b z_b^T`` for a batch of rows b.

    ``lr`` is strictly increasing and shared; every entry of ``Z`` is assumed
    non-negligible (no deflation needed). Returns eigenvalues ``(b, q)``,
    descending, and eigenvectors ``(b, q, q)`` as columns.
    """
    q = lr.size
    b = Z.shape[0]
    z2 = Z * Z
    idx = np.arange(q)
    s3 = s[:, None, None]
    # poles delta_i = -s*lr[i], descending in i; root j lies in
    # (delta_j, delta_{j-1}), root 0 in (delta_0, delta_0 + |z|^2].
    # Each root is stored as (origin pole K, signed offset tau).
    diff = lr[None, :] - lr[:, None]  # [K, i] = lr_i - lr_K

    def secular(K, tau):
        gaps = -s3 * diff[K]
        return 1.0 + np.sum(z2[:, None, :] / (gaps - tau[:, :, None]), axis=2)

    K = np.broadcast_to(idx, (b, q)).copy()
    sign = np.ones((b, q))
    span = np.empty((b, q))
    span[:, 0] = z2.sum(axis=1)
    if q > 1:
        half = 0.5 * s[:, None] * (lr[1:] - lr[:-1])[None, :]
        f_half = secular(K, np.column_stack([span[:, :1], half]))[:, 1:]
        lower = f_half >= 0
        K[:, 1:] = np.where(lower, idx[1:], idx[1:] - 1)
        sign[:, 1:] = np.where(lower, 1.0, -1.0)
        span[:, 1:] = half
    hi = np.log(span)
    lo = hi - _LOG_SPAN
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        f = secular(K, sign * np.exp(mid))
        # f increases with the eigenvalue; with sign < 0 the eigenvalue falls as mid grows
        shrink = np.where(sign > 0, f >= 0, f < 0)
        hi = np.where(shrink, mid, hi)
        lo = np.where(shrink, lo, mid)
    tau = sign * np.exp(0.5 * (lo + hi))

    # [b, j, i] = mu_j - delta_i, without forming mu_j
    mu_minus = s3 * diff[K] + tau[:, :, None]
    pole_gap = -s3 * diff[None, :, :]  # [b, i, j] = delta_j - delta_i
    pole_gap[:, idx, idx] = 1.0
    # Gu-Eisenstat: recompute z so the eigenvectors are numerically orthogonal
    log_num = np.sum(np.log(np.abs(mu_minus)), axis=1)
    log_den = np.sum(np.log(np.abs(pole_gap)), axis=2)
    zhat = np.copysign(np.exp(0.5 * (log_num - log_den)), Z)
    V = zhat[:, None, :] / (-mu_minus)
    V /= np.linalg.norm(V, axis=2, keepdims=True)
    mus = -s[:, None] * lr[K] + tau
    # roots come out descending already; return eigenvectors as columns
    return mus, np.transpose(V, (0, 2, 1))


def secular_top_batch(lam: np.ndarray, M: np.ndarray, s: np.ndarray, ell: int) -> np.ndarray:
    """Batched :func:`secular_top` over the rows of ``M`` with shifts ``s``.

    Rows that need deflation (ties in ``lam``, tiny entries, zero shift) go
    through the per-row solver; the rest are solved together.
    """
    b, r = M.shape
    out = np.empty((b, r, ell))
    order = np.argsort(lam, kind="stable")
    L = lam[order]
    Z = M[:, order]
    generic = s > 0
    if r > 1 and np.any(np.diff(L) <= _TIE_RTOL * L[1:]):
        generic[:] = False
    U = np.abs(Z) / np.sqrt(L)
    u_norm = np.linalg.norm(U, axis=1)
    generic &= np.all(U > _DEFLATE_RTOL * u_norm[:, None], axis=1)
    rows = np.flatnonzero(generic)
    if rows.size:
        _, V = _solve(L, Z[rows], s[rows])
        X = np.empty((rows.size, r, ell))
        X[:, order, :] = V[:, :, :ell]
        out[rows] = X
    for i in np.flatnonzero(~generic):
        out[i] = secular_top(lam, M[i], float(s[i]), ell)
    return out


def secular_top(lam: np.ndarray, m: np.ndarray, s: float, ell: int) -> np.ndarray:
    """Orthonormal ``r x ell`` basis of the top eigenvectors of ``m m^T - s diag(lam)``.

    Parameters
    ----------
    lam : (r,) array
        Strictly positive diagonal.
    m : (r,) array
        Rank-one vector.
    s : float
        Non-negative shift.
    ell : int
        Number of leading eigenvectors to return.
    """
    r = lam.size
    if s <= 0:
        return _zero_shift_top(lam, m, ell)

    order = np.argsort(lam, kind="stable")
    L = lam[order]
    z = m[order].astype(np.float64)
    u_norm = np.sqrt(np.sum(z * z / L))

    # group numerically equal poles; inside a group, rotate z onto one coordinate
    reps_lam, reps_z, reps_vec = [], [], []
    deflated = []  # (lam, vector in sorted coordinates)
    i = 0
    while i < r:
        j = i + 1
        while j < r and L[j] - L[j - 1] <= _TIE_RTOL * L[j]:
            j += 1
        zg = z[i:j]
        nz = np.linalg.norm(zg)
        lam_g = L[i]
        if nz / np.sqrt(lam_g) <= _DEFLATE_RTOL * u_norm:
            deflated.extend((lam_g, _unit(t, r)) for t in range(i, j))
        elif j - i == 1:
            reps_lam.append(lam_g)
            reps_z.append(zg[0])
            reps_vec.append(_unit(i, r))
        else:
            g = zg / nz
            basis, _ = np.linalg.qr(np.column_stack([g, np.eye(j - i)]))
            vec = np.zeros(r)
            vec[i:j] = g
            reps_lam.append(lam_g)
            reps_z.append(nz)
            reps_vec.append(vec)
            for t in range(1, j - i):
                vec = np.zeros(r)
                vec[i:j] = basis[:, t]
                deflated.append((lam_g, vec))
        i = j

    pairs = [(-s * lam_d, vec) for lam_d, vec in deflated]
    if reps_lam:
        B = np.column_stack(reps_vec)
        mus, V = _solve(np.array(reps_lam), np.array(reps_z)[None, :], np.array([s]))
        vecs = B @ V[0]
        pairs.extend((mus[0, j], vecs[:, j]) for j in range(len(reps_lam)))

    pairs.sort(key=lambda p: -p[0])
    X = np.column_stack([v for _, v in pairs[:ell]])
    out = np.empty_like(X)
    out[order] = X
    return out
