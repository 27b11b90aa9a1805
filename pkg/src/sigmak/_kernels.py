"""Batched scalar kernels with an optional numba backend.

Set ``SIGMAK_NO_NUMBA=1`` to force the pure-numpy path. Both paths run the
same recurrences in the same order, so results agree to rounding.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("SIGMAK_NO_NUMBA", "").strip() not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError("numba disabled by SIGMAK_NO_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path


def _esym_numpy(lam: np.ndarray, kmax: int) -> np.ndarray:
    n_batch, n = lam.shape
    e = np.zeros((n_batch, kmax + 1))
    e[:, 0] = 1.0
    for i in range(n):
        li = lam[:, i]
        for j in range(min(i + 1, kmax), 0, -1):
            e[:, j] += li * e[:, j - 1]
    return e


def _newton_diag_numpy(lam: np.ndarray, e: np.ndarray, k: int) -> np.ndarray:
    # t_j = e_j - lambda_i t_{j-1}, t_0 = 1 (diagonal of T_j in the eigenbasis)
    t = np.ones_like(lam)
    for j in range(1, k + 1):
        t = e[:, j : j + 1] - lam * t
    return t


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _esym_numba(lam, kmax):
        n_batch, n = lam.shape
        e = np.zeros((n_batch, kmax + 1))
        for b in range(n_batch):
            e[b, 0] = 1.0
            for i in range(n):
                li = lam[b, i]
                top = i + 1 if i + 1 < kmax else kmax
                for j in range(top, 0, -1):
                    e[b, j] += li * e[b, j - 1]
        return e

    @njit(cache=True)
    def _newton_diag_numba(lam, e, k):
        n_batch, n = lam.shape
        t = np.ones((n_batch, n))
        for b in range(n_batch):
            for i in range(n):
                ti = 1.0
                for j in range(1, k + 1):
                    ti = e[b, j] - lam[b, i] * ti
                t[b, i] = ti
        return t

    @njit(cache=True)
    def _stencil_coo_numba(coef2, coef1, coef0, flat_index, strides, inv_dx, inv_dx2, is_interior):
        # coef2: (N, n, n) second-order coefficients, coef1: (N, n), coef0: (N,)
        # returns COO triplets of the central-difference operator
        N, n = coef1.shape
        nnz_max = N * (1 + 2 * n + 4 * n * (n - 1) // 2)
        rows = np.empty(nnz_max, np.int64)
        cols = np.empty(nnz_max, np.int64)
        vals = np.empty(nnz_max)
        c = 0
        for p in range(N):
            r = flat_index[p]
            if not is_interior[p]:
                rows[c] = r
                cols[c] = r
                vals[c] = 1.0
                c += 1
                continue
            diag = coef0[p]
            for a in range(n):
                s = strides[a]
                w2 = coef2[p, a, a] * inv_dx2[a]
                w1 = coef1[p, a] * 0.5 * inv_dx[a]
                diag -= 2.0 * w2
                rows[c] = r
                cols[c] = r + s
                vals[c] = w2 + w1
                c += 1
                rows[c] = r
                cols[c] = r - s
                vals[c] = w2 - w1
                c += 1
            for a in range(n):
                for b in range(a + 1, n):
                    w = 2.0 * coef2[p, a, b] * 0.25 * inv_dx[a] * inv_dx[b]
                    sa = strides[a]
                    sb = strides[b]
                    rows[c] = r
                    cols[c] = r + sa + sb
                    vals[c] = w
                    c += 1
                    rows[c] = r
                    cols[c] = r - sa - sb
                    vals[c] = w
                    c += 1
                    rows[c] = r
                    cols[c] = r + sa - sb
                    vals[c] = -w
                    c += 1
                    rows[c] = r
                    cols[c] = r - sa + sb
                    vals[c] = -w
                    c += 1
            rows[c] = r
            cols[c] = r
            vals[c] = diag
            c += 1
        return rows[:c], cols[:c], vals[:c]


def _stencil_coo_numpy(coef2, coef1, coef0, flat_index, strides, inv_dx, inv_dx2, is_interior):
    N, n = coef1.shape
    rows, cols, vals = [], [], []
    bnd = ~is_interior
    rb = flat_index[bnd]
    rows.append(rb)
    cols.append(rb)
    vals.append(np.ones(rb.size))
    idx = flat_index[is_interior]
    c2 = coef2[is_interior]
    c1 = coef1[is_interior]
    diag = coef0[is_interior].copy()
    for a in range(n):
        s = strides[a]
        w2 = c2[:, a, a] * inv_dx2[a]
        w1 = c1[:, a] * 0.5 * inv_dx[a]
        diag = diag - 2.0 * w2
        rows += [idx, idx]
        cols += [idx + s, idx - s]
        vals += [w2 + w1, w2 - w1]
    for a in range(n):
        for b in range(a + 1, n):
            w = 2.0 * c2[:, a, b] * 0.25 * inv_dx[a] * inv_dx[b]
            sa, sb = strides[a], strides[b]
            rows += [idx] * 4
            cols += [idx + sa + sb, idx - sa - sb, idx + sa - sb, idx - sa + sb]
            vals += [w, w, -w, -w]
    rows.append(idx)
    cols.append(idx)
    vals.append(diag)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


# ---------------------------------------------------------------- dispatch


def esym(lam: np.ndarray, kmax: int) -> np.ndarray:
    """Elementary symmetric polynomials e_0..e_kmax of each row of ``lam``."""
    lam = np.ascontiguousarray(lam, dtype=float)
    if HAS_NUMBA:
        return _esym_numba(lam, int(kmax))
    return _esym_numpy(lam, int(kmax))


def newton_diag(lam: np.ndarray, e: np.ndarray, k: int) -> np.ndarray:
    """Eigenbasis diagonal of T_k for each row of ``lam`` given its e_j."""
    lam = np.ascontiguousarray(lam, dtype=float)
    e = np.ascontiguousarray(e, dtype=float)
    if HAS_NUMBA:
        return _newton_diag_numba(lam, e, int(k))
    return _newton_diag_numpy(lam, e, int(k))


def stencil_coo(coef2, coef1, coef0, flat_index, strides, inv_dx, inv_dx2, is_interior):
    """COO triplets for ``coef2 : D^2 + coef1 . D + coef0`` on central stencils.

    Rows flagged as non-interior become identity rows.
    """
    args = (
        np.ascontiguousarray(coef2, dtype=float),
        np.ascontiguousarray(coef1, dtype=float),
        np.ascontiguousarray(coef0, dtype=float),
        np.ascontiguousarray(flat_index, dtype=np.int64),
        np.ascontiguousarray(strides, dtype=np.int64),
        np.ascontiguousarray(inv_dx, dtype=float),
        np.ascontiguousarray(inv_dx2, dtype=float),
        np.ascontiguousarray(is_interior, dtype=np.bool_),
    )
    if HAS_NUMBA:
        return _stencil_coo_numba(*args)
    return _stencil_coo_numpy(*args)
