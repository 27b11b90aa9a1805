"""Elementary symmetric functions of eigenvalues, Garding cones, Newton tensors.

Every function accepts a single ``(n, n)`` symmetric matrix or a stack of
shape ``(..., n, n)`` and broadcasts over the leading axes. Matrices are
assumed symmetric; only eigenvalue-based quantities are formed, so the
lower triangle is never read independently (``numpy.linalg.eigh`` uses one
triangle).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from . import _kernels
from .errors import ConeViolation, DimensionError

__all__ = [
    "SymMat",
    "sym_from_upper",
    "upper_entries",
    "eigh",
    "sigmas",
    "sigma",
    "sigma_root",
    "in_gamma_k",
    "cone_margin",
    "newton_tensor",
    "newton_tensor_eig",
    "grad_sigma",
    "grad_sigma_k1k",
    "quotient_chain_gap",
    "concavity_probe",
    "newton_complement_identity",
    "trace_identity_residual",
    "euler_identity_residual",
    "matrix_power",
    "sample_symmetric",
    "sample_gamma",
]


@dataclass(frozen=True)
class SymMat:
    """A symmetric matrix stored by its upper triangle (row-major)."""

    dim: int
    entries: tuple

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError("dim must be positive")
        if len(self.entries) != self.dim * (self.dim + 1) // 2:
            raise DimensionError(
                f"expected {self.dim * (self.dim + 1) // 2} upper-triangle entries, got {len(self.entries)}"
            )

    @classmethod
    def from_array(cls, A) -> "SymMat":
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError("expected a square matrix")
        return cls(A.shape[0], tuple(float(v) for v in upper_entries(A)))

    @property
    def array(self) -> np.ndarray:
        return sym_from_upper(np.asarray(self.entries), self.dim)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.array)


def sym_from_upper(entries, n: int) -> np.ndarray:
    """Build symmetric matrices from upper-triangle entries ``(..., n(n+1)/2)``."""
    entries = np.asarray(entries, dtype=float)
    m = n * (n + 1) // 2
    if entries.shape[-1] != m:
        raise DimensionError(f"expected last axis of length {m}")
    iu = np.triu_indices(n)
    out = np.zeros(entries.shape[:-1] + (n, n))
    out[..., iu[0], iu[1]] = entries
    out[..., iu[1], iu[0]] = entries
    return out


def upper_entries(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    n = A.shape[-1]
    iu = np.triu_indices(n)
    return A[..., iu[0], iu[1]]


def _as_stack(A):
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"expected (..., n, n) matrices, got shape {A.shape}")
    return A


def _check_k(k: int, n: int, lo: int, hi: int):
    if not (lo <= k <= hi):
        raise DimensionError(f"cone level k={k} outside [{lo}, {hi}] for n={n}")


def eigh(A):
    """Eigenvalues (ascending) and eigenvectors of symmetric matrices."""
    return np.linalg.eigh(_as_stack(A))


def _esym_lam(lam: np.ndarray, kmax: int) -> np.ndarray:
    lead = lam.shape[:-1]
    n = lam.shape[-1]
    e = _kernels.esym(lam.reshape(-1, n), kmax)
    return e.reshape(lead + (kmax + 1,))


def sigmas(A, kmax: int | None = None, lam=None) -> np.ndarray:
    """All of sigma_0..sigma_kmax, stacked on a new last axis."""
    A = _as_stack(A)
    n = A.shape[-1]
    kmax = n if kmax is None else kmax
    _check_k(kmax, n, 0, n)
    if lam is None:
        lam = np.linalg.eigvalsh(A)
    return _esym_lam(lam, kmax)


def sigma(k: int, A) -> np.ndarray | float:
    """k-th elementary symmetric polynomial of the eigenvalues of A."""
    A = _as_stack(A)
    _check_k(k, A.shape[-1], 0, A.shape[-1])
    out = sigmas(A, k)[..., k]
    return float(out) if out.ndim == 0 else out


def in_gamma_k(k: int, A) -> np.ndarray | bool:
    """True where sigma_j(A) > 0 for every j = 1..k (strict, no tolerance)."""
    A = _as_stack(A)
    _check_k(k, A.shape[-1], 1, A.shape[-1])
    s = sigmas(A, k)
    out = np.all(s[..., 1:] > 0.0, axis=-1)
    return bool(out) if out.ndim == 0 else out


def _margin_from_sigmas(s: np.ndarray) -> np.ndarray:
    k = s.shape[-1] - 1
    j = np.arange(1, k + 1)
    roots = np.sign(s[..., 1:]) * np.abs(s[..., 1:]) ** (1.0 / j)
    return roots.min(axis=-1)


def cone_margin(k: int, A) -> np.ndarray | float:
    """min over j <= k of sign(sigma_j)|sigma_j|^(1/j).

    Positive exactly on the cone and homogeneous of degree one.
    """
    A = _as_stack(A)
    _check_k(k, A.shape[-1], 1, A.shape[-1])
    out = _margin_from_sigmas(sigmas(A, k))
    return float(out) if out.ndim == 0 else out


def sigma_root(k: int, A, strict: bool = True) -> np.ndarray | float:
    """sigma_k^(1/k) on the cone.

    With ``strict`` a cone violation raises; otherwise those entries are NaN.
    """
    A = _as_stack(A)
    _check_k(k, A.shape[-1], 1, A.shape[-1])
    s = sigmas(A, k)
    inside = np.all(s[..., 1:] > 0.0, axis=-1)
    if strict and not np.all(inside):
        raise ConeViolation(f"matrix outside Gamma_{k}")
    out = np.where(inside, np.abs(s[..., k]) ** (1.0 / k), np.nan)
    return float(out) if out.ndim == 0 else out


def newton_tensor_eig(k: int, lam: np.ndarray, e: np.ndarray | None = None) -> np.ndarray:
    """Eigenbasis diagonal of T_k given eigenvalues ``lam`` of shape (..., n)."""
    lam = np.asarray(lam, dtype=float)
    n = lam.shape[-1]
    if e is None:
        e = _esym_lam(lam, max(k, 0))
    lead = lam.shape[:-1]
    t = _kernels.newton_diag(lam.reshape(-1, n), e.reshape(-1, e.shape[-1]), k)
    return t.reshape(lead + (n,))


def _from_eig(Q: np.ndarray, d: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j,...kj->...ik", Q, d, Q)


def newton_tensor(k: int, A) -> np.ndarray:
    """T_k(A) by T_k = sigma_k I - T_{k-1} A, T_0 = I, in the eigenbasis of A."""
    A = _as_stack(A)
    n = A.shape[-1]
    _check_k(k, n, 0, n)
    if k == 0:
        return np.broadcast_to(np.eye(n), A.shape).copy()
    lam, Q = np.linalg.eigh(A)
    return _from_eig(Q, newton_tensor_eig(k, lam))


def grad_sigma(k: int, A) -> np.ndarray:
    """Derivative of sigma_k with respect to the matrix entries: T_{k-1}(A)."""
    A = _as_stack(A)
    _check_k(k, A.shape[-1], 1, A.shape[-1])
    return newton_tensor(k - 1, A)


def grad_sigma_k1k(k: int, A) -> np.ndarray:
    """Derivative of sigma_k^(1/k): k^-1 sigma_k^((1-k)/k) T_{k-1}(A)."""
    A = _as_stack(A)
    n = A.shape[-1]
    _check_k(k, n, 1, n)
    lam, Q = np.linalg.eigh(A)
    e = _esym_lam(lam, k)
    if not np.all(e[..., 1:] > 0.0):
        raise ConeViolation(f"grad of sigma_{k}^(1/{k}) requested outside Gamma_{k}")
    t = newton_tensor_eig(k - 1, lam, e)
    scale = e[..., k] ** ((1.0 - k) / k) / k
    return _from_eig(Q, t * scale[..., None])


def quotient_chain_gap(k: int, A) -> np.ndarray | float:
    """Smallest eigenvalue of T_{j-1}/sigma_j - T_{j-2}/sigma_{j-1} over j = 2..k.

    Nonnegative (up to rounding) on Gamma_k.
    """
    A = _as_stack(A)
    n = A.shape[-1]
    _check_k(k, n, 2, n)
    lam = np.linalg.eigvalsh(A)
    e = _esym_lam(lam, k)
    if not np.all(e[..., 1:] > 0.0):
        raise ConeViolation(f"quotient chain requested outside Gamma_{k}")
    gaps = []
    prev = newton_tensor_eig(0, lam, e) / e[..., 1:2]
    for j in range(2, k + 1):
        cur = newton_tensor_eig(j - 1, lam, e) / e[..., j : j + 1]
        gaps.append((cur - prev).min(axis=-1))
        prev = cur
    out = np.min(np.stack(gaps, axis=-1), axis=-1)
    return float(out) if out.ndim == 0 else out


def concavity_probe(k: int, A, B, t: float) -> np.ndarray | float:
    """sigma_k^(1/k) along the segment minus the chord; >= 0 on the cone."""
    A = _as_stack(A)
    B = _as_stack(B)
    if A.shape != B.shape:
        raise DimensionError("A and B must have equal shapes")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    fa = sigma_root(k, A)
    fb = sigma_root(k, B)
    # A + t(B - A) reproduces A bitwise at t = 0 and when A == B
    fm = sigma_root(k, A + t * (B - A))
    return fm - (1.0 - t) * fa - t * fb


def newton_complement_identity(k: int, A) -> np.ndarray | float:
    """max-entry residual of T_{k-2}A + T_{k-1} - tr(T_{k-1})/(n-k+1) I."""
    A = _as_stack(A)
    n = A.shape[-1]
    _check_k(k, n, 2, n)
    T2 = newton_tensor(k - 2, A)
    T1 = newton_tensor(k - 1, A)
    tr = np.trace(T1, axis1=-2, axis2=-1)
    R = T2 @ A + T1 - (tr / (n - k + 1))[..., None, None] * np.eye(n)
    out = np.abs(R).max(axis=(-2, -1))
    return float(out) if out.ndim == 0 else out


def trace_identity_residual(k: int, A) -> np.ndarray | float:
    """|tr T_k(A) - (n-k) sigma_k(A)|."""
    A = _as_stack(A)
    n = A.shape[-1]
    _check_k(k, n, 0, n - 1)
    out = np.abs(np.trace(newton_tensor(k, A), axis1=-2, axis2=-1) - (n - k) * sigma(k, A))
    return float(out) if np.ndim(out) == 0 else out


def euler_identity_residual(k: int, A) -> np.ndarray | float:
    """|T_{k-1}(A) : A - k sigma_k(A)|."""
    A = _as_stack(A)
    n = A.shape[-1]
    _check_k(k, n, 1, n)
    contr = np.einsum("...ij,...ij->...", grad_sigma(k, A), A)
    out = np.abs(contr - k * sigma(k, A))
    return float(out) if np.ndim(out) == 0 else out


def identity_scale(k: int, A) -> np.ndarray:
    """Natural magnitude C(n,k) |lambda|_max^k used to normalise residuals."""
    A = _as_stack(A)
    n = A.shape[-1]
    lam = np.abs(np.linalg.eigvalsh(A)).max(axis=-1)
    return np.maximum(comb(n, k) * lam**k, np.finfo(float).tiny)


def matrix_power(A, p: int) -> np.ndarray:
    """A^p for symmetric A via the eigenbasis (p >= 0)."""
    A = _as_stack(A)
    if p == 0:
        return np.broadcast_to(np.eye(A.shape[-1]), A.shape).copy()
    lam, Q = np.linalg.eigh(A)
    return _from_eig(Q, lam**p)


def sample_symmetric(rng: np.random.Generator, n: int, size: int, scale: float = 1.0) -> np.ndarray:
    """Symmetrised Gaussian matrices."""
    X = rng.standard_normal((size, n, n)) * scale
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def sample_gamma(
    rng: np.random.Generator,
    n: int,
    k: int,
    size: int,
    *,
    boundary: bool = False,
    scale: float = 1.0,
    max_rounds: int = 1000,
) -> np.ndarray:
    """Random matrices in Gamma_k (or in Gamma_k minus Gamma_{k+1} if ``boundary``).

    Symmetrised Gaussian matrices are shifted by a random multiple of I and
    kept by rejection. For k = n the shift places the smallest eigenvalue at
    0.1 or above directly.
    """
    _check_k(k, n, 1, n)
    if boundary and k == n:
        raise DimensionError("Gamma_n has no higher cone to exclude")
    out = []
    have = 0
    for _ in range(max_rounds):
        G = sample_symmetric(rng, n, max(size, 64), scale)
        if k == n and not boundary:
            lmin = np.linalg.eigvalsh(G)[:, 0]
            shift = 0.1 * scale - lmin + rng.exponential(scale, size=lmin.shape)
            A = G + shift[:, None, None] * np.eye(n)
            keep = np.ones(len(A), dtype=bool)
        else:
            shift = rng.uniform(-0.5, 2.5, size=len(G)) * scale * np.sqrt(n)
            A = G + shift[:, None, None] * np.eye(n)
            s = sigmas(A, min(k + 1, n))
            keep = np.all(s[..., 1 : k + 1] > 0.0, axis=-1)
            if boundary:
                keep &= s[..., k + 1] <= 0.0
        A = A[keep]
        out.append(A)
        have += len(A)
        if have >= size:
            break
    else:
        raise RuntimeError("cone sampling did not produce enough matrices")
    return np.concatenate(out)[:size]
