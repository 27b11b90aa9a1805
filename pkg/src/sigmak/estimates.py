"""Pointwise inequalities, exact discrete identities and integral probes for the
interior second-derivative estimate, plus Moser exponent bookkeeping.

Every function works on the positive form of the problem (``w = -u`` in the
negative sign case). Solutions may be passed as a ``ScalarField`` (stencil
derivatives) or as ``NodeData`` with exact derivatives.

Checks assert inequalities with explicit constants. Probes (``kind="probe"``)
record implied constants whose true values are only known to exist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import symfun
from .augmented import (
    EvalBox,
    ProblemSpec,
    ScalarQuadratic,
    PositiveYamabe,
    NegativeYamabe,
    Zero,
    compute_c1,
    compute_c_sigma,
    positive_nodes,
)
from .divstruct import v_field
from .errors import ConfigError, DimensionError, DomainError, GridError, ThresholdError
from .expr import ScalarFunction
from .gridcalc import (
    Box,
    ScalarField,
    _window,
    ball_mask,
    grid_offset,
    gradient,
    hessian,
    interior_margin,
    trapezoid_weights,
    v_h,
)
from .reports import CheckReport

EPS = np.finfo(float).eps
# rounding allowance for identities that are exact in the discrete variables
ROUND = 1e3 * EPS
MAX_EXCLUDED = 1e-3


# ------------------------------------------------------------------ config


def cutoff_profile(r, R: float, rho: float) -> np.ndarray:
    """eta(r): 1 on [0, R+rho], (1 - s^2)^3 with s = (r-R-rho)/rho up to R+2rho, then 0."""
    s = np.clip((np.asarray(r, dtype=float) - R - rho) / rho, 0.0, 1.0)
    return (1.0 - s * s) ** 3


def cutoff_bounds(rho: float, samples: int = 200001) -> dict:
    """Sup of |eta'| and |eta''| on the transition layer, closed form and sampled.

    With s in [0, 1]: eta' = -6 s (1-s^2)^2 / rho, maximal at s^2 = 1/5;
    eta'' = (1-s^2)(30 s^2 - 6) / rho^2, maximal in size at s = 0.
    The Hessian of the radial cutoff also has the tangential part eta'/r,
    which is smaller than eta'/rho on the layer since r >= R + rho > rho.
    """
    s = np.linspace(0.0, 1.0, samples)
    d1 = np.abs(-6.0 * s * (1 - s * s) ** 2).max() / rho
    d2 = np.abs((1 - s * s) * (30 * s * s - 6)).max() / rho**2
    c1 = 6.0 / math.sqrt(5.0) * (4.0 / 5.0) ** 2
    return {"grad": c1 / rho, "hess": 6.0 / rho**2, "grad_sampled": float(d1), "hess_sampled": float(d2)}


@dataclass(frozen=True)
class EstimateConfig:
    """Radii, exponent and increment for the localized estimates.

    Balls are centred at ``center`` (the box centre when None). ``delta`` is
    an optional smoothing of the positive part; 0 computes with v~+ itself.
    """

    R: float
    rho: float
    q: float
    h: float
    delta: float = 0.0
    center: tuple | None = None

    def __post_init__(self):
        if not self.R > 0:
            raise ConfigError("R must be positive")
        if not 0 < self.rho <= self.R / 3 * (1 + 1e-12):
            raise ConfigError(f"rho must lie in (0, R/3], got rho={self.rho}, R={self.R}")
        if not self.q > 1:
            raise ConfigError(f"q must exceed 1, got {self.q}")
        if not self.h > 0:
            raise ConfigError("h must be positive")
        if self.delta < 0:
            raise ConfigError("delta must be >= 0")

    def ball_center(self, box: Box) -> np.ndarray:
        return box.center if self.center is None else np.asarray(self.center, dtype=float)

    def radii(self) -> dict:
        R, r = self.R, self.rho
        return {"R": R, "R+rho": R + r, "R+2rho": R + 2 * r, "R+3rho": R + 3 * r, "2R": 2 * R}

    def validate(self, box: Box) -> None:
        c = self.ball_center(box)
        if c.shape != (box.dim,):
            raise DimensionError("center dimension differs from the box")
        lo, hi = np.array(box.lo), np.array(box.hi)
        reach = 2 * self.R
        if np.any(c - reach < lo - 1e-12) or np.any(c + reach > hi + 1e-12):
            raise DomainError(f"ball B_2R (radius {reach}) around {c.tolist()} does not fit the box")

    def eta(self, X) -> np.ndarray:
        c = np.asarray(self.center, dtype=float) if self.center is not None else None
        X = np.asarray(X, dtype=float)
        r = np.linalg.norm(X - (0.0 if c is None else c), axis=-1)
        return cutoff_profile(r, self.R, self.rho)

    def to_dict(self) -> dict:
        return {"R": self.R, "rho": self.rho, "q": self.q, "h": self.h, "delta": self.delta, "center": self.center}


def _offsets(u: ScalarField, h: float) -> list[int]:
    return [grid_offset(h, d) for d in u.spacing]


# --------------------------------------------------------------- v tilde


@dataclass(frozen=True, eq=False)
class TildeV:
    """v~ = v_h + C1 on the sub-grid where every second quotient is defined."""

    field: ScalarField
    c1: float
    margin: tuple
    h: float

    @classmethod
    def from_solution(cls, u, spec: ProblemSpec, h: float, c1: float | None = None) -> "TildeV":
        nd, sp_ = positive_nodes(u, spec)
        if c1 is None:
            c1 = compute_c1(nd, sp_).c1
        margin = interior_margin(nd.grid, h)
        vh = v_h(nd.grid, h, margin)
        return cls(vh.with_values(vh.values + c1), float(c1), margin, float(h))

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    def positive_part(self) -> np.ndarray:
        return np.maximum(self.field.values, 0.0)

    def q_delta(self, delta: float) -> np.ndarray:
        """((v~+)^2 + delta^2)^(1/2); at least delta, tends to v~+ as delta -> 0."""
        if delta < 0:
            raise ConfigError("delta must be >= 0")
        return np.hypot(self.positive_part(), delta)


# ------------------------------------------------------------ node helpers


def _prepare(u, spec: ProblemSpec):
    nd, sp_ = positive_nodes(u, spec)
    A = nd.hess - sp_.h.H(nd.x, nd.z, nd.p)
    return nd, sp_, A


def _sigma_parts(k: int, A: np.ndarray):
    """sigmas, cone mask, sigma_k^(1/k) (NaN off the cone), F = T_{k-1}, G."""
    lam, Q = np.linalg.eigh(A)
    e = symfun._esym_lam(lam, k)
    inside = np.all(e[..., 1:] > 0.0, axis=-1)
    sk = e[..., k]
    root = np.where(inside, np.abs(sk) ** (1.0 / k), np.nan)
    F = symfun._from_eig(Q, symfun.newton_tensor_eig(k - 1, lam, e))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(inside, np.abs(sk) ** ((1.0 - k) / k) / k, np.nan)
    G = F * scale[..., None, None]
    return e, inside, root, F, G


def _contract(M, N) -> np.ndarray:
    return np.einsum("...ij,...ij->...", M, N)


def _excluded_ok(n_excluded: int, n_total: int) -> bool:
    return n_excluded <= MAX_EXCLUDED * n_total


# -------------------------------------------------------- concavity check


def concavity_dq_check(u, spec: ProblemSpec, cfg: EstimateConfig) -> CheckReport:
    """Second-quotient concavity inequality at every admissible node.

    With f := sigma_k^(1/k)(A_H[u]) evaluated at the nodes, concavity gives

        sum_l k f^(k-1) D_ll f <= F : D^2 v - sum_l F : D_ll H[u]

    where D_ll is the second difference quotient with increment h along
    axis l and D^2 v = sum_l D_ll D^2 u. Both sides use the same node data,
    so the inequality holds up to rounding; the tolerance is a multiple of
    machine precision times the size of the summed terms. The two-sided
    ingredient f(A(x +- h e_l)) - f(A(x)) <= G(x) : (A(x +- h e_l) - A(x)) is
    checked separately. The gap between the node value of
    sigma_k^(1/k)(A_H) and the prescribed right-hand side f[u] is reported.

    Nodes where A_H leaves the cone at x or at any x +- h e_l are skipped and
    counted; the check fails when more than 0.1% are skipped.
    """
    nd, sp_, A = _prepare(u, spec)
    k, n = sp_.k, sp_.n
    grid = nd.grid
    offs = _offsets(grid, cfg.h)
    m = max(abs(o) for o in offs)
    margin = (m + 1,) * n
    shape = grid.shape
    _, inside, root, _, _ = _sigma_parts(k, A)
    Hf = sp_.h.H(nd.x, nd.z, nd.p)
    fmodel = sp_.f.value(nd.x, nd.z, nd.p)

    w0 = _window(shape, margin)
    A0 = A[w0]
    e0, in0, f0, F, G = _sigma_parts(k, A0)
    ok = in0.copy()
    lhs = np.zeros(A0.shape[:-2])
    lhs_scale = np.zeros_like(lhs)
    lhs_model = np.zeros_like(lhs)
    hess_v = np.zeros_like(A0)
    hess_abs = np.zeros_like(A0)
    dH = np.zeros_like(A0)
    dH_abs = np.zeros_like(A0)
    ingredient = np.full(lhs.shape, -np.inf)
    ing_scale = np.zeros_like(lhs)
    for l in range(n):
        h = offs[l] * grid.spacing[l]
        wp = _window(shape, margin, l, offs[l])
        wm = _window(shape, margin, l, -offs[l])
        ok &= inside[wp] & inside[wm]
        fp, fm = root[wp], root[wm]
        with np.errstate(invalid="ignore"):
            lhs += k * f0 ** (k - 1) * (fp - 2 * f0 + fm) / h**2
            lhs_scale += k * np.abs(f0) ** (k - 1) * (np.abs(fp) + 2 * np.abs(f0) + np.abs(fm)) / h**2
            mp, m0, mm = fmodel[wp], fmodel[w0], fmodel[wm]
            lhs_model += k * m0 ** (k - 1) * (mp - 2 * m0 + mm) / h**2
        hp, h0, hm = nd.hess[wp], nd.hess[w0], nd.hess[wm]
        hess_v += (hp - 2 * h0 + hm) / h**2
        hess_abs += (np.abs(hp) + 2 * np.abs(h0) + np.abs(hm)) / h**2
        Hp, H0, Hm = Hf[wp], Hf[w0], Hf[wm]
        dH += (Hp - 2 * H0 + Hm) / h**2
        dH_abs += (np.abs(Hp) + 2 * np.abs(H0) + np.abs(Hm)) / h**2
        for Ash, fsh in ((A[wp], fp), (A[wm], fm)):
            with np.errstate(invalid="ignore"):
                d = fsh - f0 - _contract(G, Ash - A0)
                sc = np.abs(fsh) + np.abs(f0) + _contract(np.abs(G), np.abs(Ash) + np.abs(A0))
            ingredient = np.maximum(ingredient, np.where(ok, d, -np.inf))
            ing_scale = np.maximum(ing_scale, np.where(ok, sc, 0.0))
    rhs = _contract(F, hess_v) - _contract(F, dH)
    rhs_scale = _contract(np.abs(F), hess_abs + dH_abs)
    tol = ROUND * (lhs_scale + rhs_scale)
    gap = rhs - lhs
    n_total = int(ok.size)
    n_skip = int(n_total - ok.sum())
    if ok.any():
        worst = float(np.min((gap + tol)[ok]))
        margin_min = float(np.min(gap[ok]))
        ing_worst = float(np.max((ingredient - ROUND * ing_scale)[ok]))
        ing_max = float(np.max(ingredient[ok]))
        model_gap = float(np.nanmax(np.abs(root[w0] - fmodel[w0])[ok]))
        model_margin = float(np.nanmin((rhs - lhs_model)[ok]))
    else:
        worst = margin_min = ing_worst = ing_max = model_gap = model_margin = float("nan")
    passed = bool(ok.any() and worst >= 0.0 and ing_worst <= 0.0 and _excluded_ok(n_skip, n_total))

    # D^2 v by the stencil Hessian of v_h agrees with the summed quotients of
    # the stencil Hessian wherever both use central stencils
    commute = None
    if isinstance(u, ScalarField):
        vf = v_h(grid, cfg.h, (m,) * n)
        hv = hessian(vf)[_window(vf.shape, (1,) * n)]
        commute = float(np.abs(hv - hess_v).max() / max(1.0, float(np.abs(hess_v).max())))

    row = {
        "h": float(cfg.h),
        "grid_step": float(grid.spacing.max()),
        "nodes": n_total,
        "skipped": n_skip,
        "min_margin": margin_min,
        "ingredient_max": ing_max,
    }
    return CheckReport(
        name="concavity_dq_check",
        paper_ref="pointwise concavity estimate for second difference quotients",
        levels=[row],
        passed=passed,
        details={
            "min_margin": margin_min,
            "min_margin_plus_tol": worst,
            "ingredient_max": ing_max,
            "skipped": n_skip,
            "nodes": n_total,
            "model_f_gap": model_gap,
            "model_f_min_margin": model_margin,
            "stencil_commutation_gap": commute,
            "q": cfg.q,
            "rho": cfg.rho,
            "R": cfg.R,
            "h": cfg.h,
        },
    )


# ------------------------------------------------------------ I1 pointwise


def i1_pointwise_bound(u, spec: ProblemSpec, cfg: EstimateConfig, c1: float | None = None) -> CheckReport:
    """(v~+)^(q-2) F grad v~ . grad v~ >= (4 f^k / q^2) |grad (v~+)^(q/2)|^2 / tr A_H.

    ``grad (v~+)^(q/2)`` is the chain-rule gradient (q/2)(v~+)^(q/2-1) grad v~
    with grad v~ from the stencil, and f^k = sigma_k(A_H) at the node, so the
    inequality reduces to F / sigma_k >= I / tr A. Nodes with v~ <= 0 have
    both sides 0. The stencil gradient of (v~+)^(q/2) and the prescribed f
    are used for a second, reported-only margin.
    """
    q = float(cfg.q)
    nd, sp_, A = _prepare(u, spec)
    tv = TildeV.from_solution(nd, sp_, cfg.h, c1)
    w = _window(nd.grid.shape, tv.margin)
    A0 = A[w]
    k = sp_.k
    e, inside, _, F, _ = _sigma_parts(k, A0)
    sk = e[..., k]
    trA = np.trace(A0, axis1=-2, axis2=-1)
    vt = tv.values
    gv = gradient(tv.field)
    pos = vt > 0.0
    ok = inside
    vp = np.where(pos, vt, 1.0)
    quad = np.einsum("...i,...ij,...j->...", gv, F, gv)
    gn2 = np.sum(gv * gv, axis=-1)
    lhs = np.where(pos, vp ** (q - 2) * quad, 0.0)
    gpow2 = np.where(pos, (0.5 * q) ** 2 * vp ** (q - 2) * gn2, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rhs = np.where(pos & ok, 4.0 * sk / q**2 * gpow2 / trA, 0.0)
    diff = lhs - rhs
    tol = ROUND * (np.abs(lhs) + np.abs(rhs) + vp ** (q - 2) * np.linalg.norm(F, axis=(-2, -1)) * gn2 * pos)

    gs = gradient(tv.field.with_values(np.maximum(vt, 0.0) ** (0.5 * q)))
    fk = sp_.f.value(nd.x[w], nd.z[w], nd.p[w]) ** k
    with np.errstate(divide="ignore", invalid="ignore"):
        rhs_s = np.where(pos & ok, 4.0 * fk / q**2 * np.sum(gs * gs, axis=-1) / trA, 0.0)
    n_total = int(ok.size)
    n_skip = int(n_total - ok.sum())
    sel = ok & pos
    if sel.any():
        worst = float(np.min((diff + tol)[sel]))
        mmin = float(np.min(diff[sel]))
        alt = float(np.min((lhs - rhs_s)[sel]))
    else:
        worst = mmin = alt = 0.0
    # the reduction: the bracket F/sigma_k - I/trA is the last quotient-chain step
    chain = symfun.quotient_chain_gap(k, A0[ok]) if ok.any() else np.array([0.0])
    passed = bool(worst >= 0.0 and _excluded_ok(n_skip, n_total))
    row = {"q": q, "h": float(cfg.h), "nodes": n_total, "positive_nodes": int(sel.sum()), "min_margin": mmin}
    return CheckReport(
        name="i1_pointwise_bound",
        paper_ref="pointwise lower bound for the gradient term with constant 4f^k/q^2",
        levels=[row],
        passed=passed,
        details={
            "min_margin": mmin,
            "min_margin_plus_tol": worst,
            "stencil_power_gradient_min_margin": alt,
            "quotient_chain_min": float(np.min(chain)),
            "skipped": n_skip,
            "c1": tv.c1,
            "q": q,
            "h": cfg.h,
        },
    )


# -------------------------------------------------------- Bochner identity


def _h1_values(H1, x, z) -> np.ndarray:
    if isinstance(H1, ScalarFunction):
        return H1.value(x, z, np.zeros(x.shape))
    return np.broadcast_to(np.asarray(H1(x, z), dtype=float), z.shape)


def bochner_identity_check(u: ScalarField, H1, axis: int, h: float, grad: np.ndarray | None = None, margin=None) -> CheckReport:
    """Residual of the discrete product expansion of D_ll(H1[u] |g|^2).

    ``g`` is one fixed discrete gradient field (the stencil gradient of u by
    default) and H1[u](x) = H1(x, u(x)). With superscripts denoting shifts
    by +-h e_l, and d^{+-h} the forward/backward quotients,

        D_ll(H1 |g|^2) = 2 H1 g . D_ll g + H1^{-h} |d^{-h} g|^2 + H1^{+h} |d^{h} g|^2
                         + (d^{-h} g . g) d^{-h} H1 + (d^{h} g . g) d^{h} H1
                         + d^{h}( g . g^{-h} d^{-h} H1 )

    holds exactly in the node values. ``H1`` is a ``ScalarFunction`` or a
    callable ``(x, z) -> values``. The region keeps 2|h| from the boundary.
    """
    if not 0 <= axis < u.dim:
        raise DimensionError(f"axis {axis} outside 0..{u.dim - 1}")
    off = grid_offset(h, u.spacing[axis])
    mo = abs(off)
    need = 2 * mo
    margin = (need,) * u.dim if margin is None else tuple(margin) if not np.isscalar(margin) else (int(margin),) * u.dim
    if min(margin) < need:
        raise GridError(f"margin {min(margin)} is below 2|h| = {need} nodes")
    hs = off * u.spacing[axis]
    X = u.coords()
    a = _h1_values(H1, X, u.values)
    g = gradient(u) if grad is None else np.asarray(grad, dtype=float)
    if g.shape != u.shape + (u.dim,):
        raise DimensionError("gradient field has the wrong shape")
    shape = u.shape
    W = lambda s: _window(shape, margin, axis, s)  # noqa: E731
    a0, ap, am = a[W(0)], a[W(off)], a[W(-off)]
    g0, gp, gm = g[W(0)], g[W(off)], g[W(-off)]
    b = a * np.sum(g * g, axis=-1)
    lhs = (b[W(off)] - 2 * b[W(0)] + b[W(-off)]) / hs**2

    dpg = (gp - g0) / hs
    dmg = (g0 - gm) / hs
    dpa = (ap - a0) / hs
    dma = (a0 - am) / hs
    # Phi(y) = g(y) . g(y - h) (H1(y) - H1(y - h)) / h at y = x and y = x + h
    phi0 = np.sum(g0 * gm, axis=-1) * dma
    phip = np.sum(gp * g0, axis=-1) * dpa
    terms = [
        2 * a0 * np.sum(g0 * (gp - 2 * g0 + gm), axis=-1) / hs**2,
        am * np.sum(dmg * dmg, axis=-1),
        ap * np.sum(dpg * dpg, axis=-1),
        np.sum(dmg * g0, axis=-1) * dma,
        np.sum(dpg * g0, axis=-1) * dpa,
        (phip - phi0) / hs,
    ]
    rhs = sum(terms)
    res = float(np.abs(lhs - rhs).max())
    gmax = float(np.abs(g).max()) if g.size else 0.0
    scale = max(float(np.abs(a).max()) * gmax**2 / hs**2, float(np.max(sum(np.abs(t) for t in terms))), 1e-300)
    passed = res <= 1e-11 * scale
    row = {"axis": axis, "h": float(hs), "residual": res, "scale": scale}
    return CheckReport(
        name="bochner_identity_check",
        paper_ref="discrete Bochner identity",
        levels=[row],
        passed=bool(passed),
        details={"residual": res, "scale": scale, "relative_residual": res / scale, "lhs_max": float(np.abs(lhs).max())},
    )


# ---------------------------------------------------- cancellation identities


def cancellation_residuals(k: int, A, f: np.ndarray | None = None) -> dict:
    """Relative residuals of F : A = k sigma_k(A) and of
    T_{k-2}(A) A = -F + tr(F)/(n-k+1) I, with F = T_{k-1}(A).

    Both products are formed as matrix products, not in the eigenbasis.
    With ``f`` given, |F : A - k f^k| relative to the same scale is also
    returned (it measures how well f matches the node data).
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[-1]
    F = symfun.newton_tensor(k - 1, A)
    T2 = symfun.newton_tensor(k - 2, A)
    sk = symfun.sigmas(A, k)[..., k]
    lam = np.abs(np.linalg.eigvalsh(A)).max(axis=-1)
    s1 = math.comb(n, k) * np.maximum(lam, 1e-300) ** k
    s2 = math.comb(n, k - 1) * np.maximum(lam, 1e-300) ** (k - 1)
    fa = _contract(F, A)
    r1 = np.abs(fa - k * sk) / (k * s1)
    comp = T2 @ A + F - (np.trace(F, axis1=-2, axis2=-1) / (n - k + 1))[..., None, None] * np.eye(n)
    r2 = np.abs(comp).max(axis=(-2, -1)) / s2
    out = {"euler": r1, "complement": r2}
    if f is not None:
        out["model_f"] = np.abs(fa - k * np.asarray(f) ** k) / (k * s1)
    return out


def cancellation_identity_checks(u, spec: ProblemSpec, rtol: float = 1e-10) -> CheckReport:
    """F : A_H = k sigma_k(A_H) and the Newton-tensor complement identity at
    every admissible node; the gap to k f[u]^k is reported."""
    nd, sp_, A = _prepare(u, spec)
    inside = symfun.in_gamma_k(sp_.k, A)
    inside = np.atleast_1d(inside)
    if not np.any(inside):
        return CheckReport(
            name="cancellation_identity_checks",
            paper_ref="contraction and complement identities for the Newton tensors",
            passed=False,
            details={"admissible_nodes": 0},
        )
    f = sp_.f.value(nd.x, nd.z, nd.p)[inside]
    r = cancellation_residuals(sp_.k, A[inside], f)
    e1, e2 = float(r["euler"].max()), float(r["complement"].max())
    passed = e1 <= rtol and e2 <= rtol
    return CheckReport(
        name="cancellation_identity_checks",
        paper_ref="contraction and complement identities for the Newton tensors",
        levels=[{"nodes": int(inside.sum()), "euler": e1, "complement": e2, "model_f": float(r["model_f"].max())}],
        passed=bool(passed),
        details={
            "euler_max": e1,
            "complement_max": e2,
            "model_f_gap": float(r["model_f"].max()),
            "admissible_nodes": int(inside.sum()),
            "skipped": int(inside.size - inside.sum()),
        },
    )


# ------------------------------------------------------------ I1, I2, I3


CANCELLATION_CASES = {
    # case name -> (exponent offset s - q, power of rho)
    "case1": (lambda k: k - 1, 1),
    "case2": (lambda k: k, 1),
    "k2-general": (lambda k: 2, 2),
}


def default_case(spec: ProblemSpec) -> str:
    h = spec.positive_form().h
    if isinstance(h, (Zero, ScalarQuadratic, PositiveYamabe, NegativeYamabe)):
        return "case1"
    if h.scalar is not None:
        return "case2"
    if spec.k == 2:
        return "k2-general"
    return "k>=3-general"


def _integral(weights: np.ndarray, vals: np.ndarray, mask: np.ndarray) -> float:
    return float(np.sum(np.where(mask, weights * vals, 0.0)))


def _log_integral(weights: np.ndarray, base: np.ndarray, power: float, mask: np.ndarray) -> float:
    """log of sum(w * base^power) over mask for base > 0, by logsumexp."""
    sel = mask & (base > 0) & (weights > 0)
    if not sel.any():
        return -math.inf
    return float(logsumexp(power * np.log(base[sel]), b=weights[sel]))


def j_ledger(tv: TildeV, lap_c1: ScalarField, cfg: EstimateConfig, s: float) -> dict:
    """J^(s) = int_{B_{R+2rho}} (v~+)^s + int_{B_{R+3rho}} (Lap u + C1)^s."""
    c = cfg.ball_center(lap_c1.box)
    m1 = ball_mask(tv.field, c, cfg.R + 2 * cfg.rho)
    m2 = ball_mask(lap_c1, c, cfg.R + 3 * cfg.rho)
    a = _integral(trapezoid_weights(tv.field), tv.positive_part() ** s, m1)
    b = _integral(trapezoid_weights(lap_c1), np.maximum(lap_c1.values, 0.0) ** s, m2)
    return {"s": s, "vtilde": a, "lap": b, "J": a + b}


def _inner_ball_fits(tv: TildeV, cfg: EstimateConfig) -> None:
    b = tv.field.box
    c = cfg.ball_center(b)
    r = cfg.R + 2 * cfg.rho
    if np.any(c - r < np.array(b.lo) - 1e-12) or np.any(c + r > np.array(b.hi) + 1e-12):
        raise DomainError("B_{R+2rho} does not fit inside the region where v_h is defined")


def estimate_probe_I123(u, spec: ProblemSpec, cfg: EstimateConfig, case: str | None = None, c1: float | None = None) -> CheckReport:
    """Values of I1, I2, I3 and implied constants of the cancellation bounds.

    I1 = (q-1) int eta (v~+)^(q-2) F grad v~ . grad v~
    I2 = int eta (v~+)^(q-1) V . grad v~          (V = div F, closed form)
    I3 = sum_l int eta (v~+)^(q-1) F : D_ll H[u]

    For each cancellation case the implied constant is
    max(0, -(I2 + I3)) rho^a / J^(s) with (s, a) = (q+k-1, 1), (q+k, 1) and
    (q+2, 2). ``signed_ratio`` drops the max(0, .) so it stays informative
    when I2 + I3 > 0. The probe asserts only I1 >= 0.
    """
    q = float(cfg.q)
    nd, sp_, A = _prepare(u, spec)
    cfg.validate(nd.grid.box)
    case = case or default_case(spec)
    tv = TildeV.from_solution(nd, sp_, cfg.h, c1)
    _inner_ball_fits(tv, cfg)
    grid = nd.grid
    k, n = sp_.k, sp_.n
    w = _window(grid.shape, tv.margin)
    A0 = A[w]
    _, inside, _, F, _ = _sigma_parts(k, A0)
    X = nd.x[w]
    eta = cfg.eta(X)
    vt = tv.values
    gv = gradient(tv.field)
    pos = vt > 0.0
    vp = np.where(pos, vt, 0.0)
    if cfg.delta > 0:
        vq = tv.q_delta(cfg.delta)
    else:
        vq = vp
    wts = trapezoid_weights(tv.field)
    supp = eta > 0
    sel = supp & pos

    quad = np.einsum("...i,...ij,...j->...", gv, F, gv)
    with np.errstate(divide="ignore", invalid="ignore"):
        p2 = np.where(sel, np.where(vq > 0, vq, 1.0) ** (q - 2), 0.0)
    I1 = (q - 1) * _integral(wts, eta * p2 * quad, sel)
    V = v_field(nd, sp_)[w]
    p1 = np.where(sel, vq ** (q - 1), 0.0)
    I2 = _integral(wts, eta * p1 * np.sum(V * gv, axis=-1), sel)
    Hf = sp_.h.H(nd.x, nd.z, nd.p)
    offs = _offsets(grid, cfg.h)
    dH = np.zeros_like(A0)
    for l in range(n):
        hl = offs[l] * grid.spacing[l]
        dH += (Hf[_window(grid.shape, tv.margin, l, offs[l])] - 2 * Hf[w] + Hf[_window(grid.shape, tv.margin, l, -offs[l])]) / hl**2
    I3 = _integral(wts, eta * p1 * _contract(F, dH), sel)
    I1_abs = (q - 1) * _integral(wts, eta * p2 * np.abs(quad), sel)

    lap = grid.with_values(np.trace(nd.hess, axis1=-2, axis2=-1) + tv.c1)
    ledgers = {}
    implied = {}
    signed = {}
    for name, (off, a) in CANCELLATION_CASES.items():
        s = q + off(k)
        J = j_ledger(tv, lap, cfg, s)
        ledgers[name] = J
        scale = cfg.rho**a / J["J"] if J["J"] > 0 else math.inf
        implied[name] = max(0.0, -(I2 + I3)) * scale
        signed[name] = -(I2 + I3) * scale
    tol = ROUND * max(I1_abs, 1e-300)
    skipped = int(np.sum(supp & ~inside))
    passed = I1 >= -tol and skipped == 0
    ic = implied.get(case)
    row = {"q": q, "h": float(cfg.h), "grid_step": float(grid.spacing.max()), "I1": I1, "I2": I2, "I3": I3}
    if case in implied:
        row["implied_constant"] = implied[case]
        row["signed_ratio"] = signed[case]
    return CheckReport(
        name="estimate_probe_I123",
        paper_ref="integrals I1, I2, I3 and the cancellation bound for I2 + I3",
        kind="probe",
        levels=[row],
        implied_constant=ic,
        passed=bool(passed),
        details={
            "I1": I1,
            "I2": I2,
            "I3": I3,
            "schedule_case": case,
            "implied_constants": implied,
            "signed_ratios": signed,
            "J": ledgers,
            "c1": tv.c1,
            "skipped": skipped,
            "q": q,
            "rho": cfg.rho,
            "R": cfg.R,
            "h": cfg.h,
            "cutoff_bounds": cutoff_bounds(cfg.rho, 2001),
        },
    )


# ----------------------------------------------------------- reverse Hoelder


@dataclass(frozen=True)
class CaseExponents:
    """beta, theta, the offset c in q_j = beta q_{j-1} - c, and the q-threshold."""

    case: str
    k: int
    n: int
    theta: Fraction
    beta: Fraction
    offset: int

    @property
    def q_threshold(self) -> Fraction:
        # beta q > q + c  <=>  q > c / (beta - 1)
        return self.offset / (self.beta - 1)

    def sobolev_beta(self) -> Fraction:
        """(2 - theta)^* / 2 with (2 - theta)^* = n (2 - theta) / (n - 2 + theta)."""
        t = self.theta
        return Fraction(self.n) * (2 - t) / (self.n - 2 + t) / 2


CASES = ("case1", "case2", "k2-general", "k>=3-general")


def case_exponents(case: str, k: int, n: int) -> CaseExponents:
    if case not in CASES:
        raise ConfigError(f"unknown schedule case {case!r}; expected one of {CASES}")
    k, n = int(k), int(n)
    if n < 3:
        raise DimensionError("the estimates are stated for n >= 3")
    if not 2 <= k <= n:
        raise DimensionError(f"need 2 <= k <= n, got k={k}, n={n}")
    if case == "case1":
        return CaseExponents(case, k, n, Fraction(4, k * n + 2), Fraction(k * n, k * n + 2 - 2 * k), k - 1)
    if case in ("case2", "k2-general"):
        if case == "k2-general" and k != 2:
            raise ConfigError("k2-general requires k = 2")
        kk = k + 1
        return CaseExponents(case, k, n, Fraction(4, kk * n + 2), Fraction(kk * n, kk * n + 2 - 2 * kk), k)
    if k < 3:
        raise ConfigError("k>=3-general requires 3 <= k <= n")
    return CaseExponents(case, k, n, Fraction(2, k * n + 1), Fraction(k * n, k * n + 1 - 2 * k), 2 * k - 1)


def q_threshold_text(case: str, k: int, n: int) -> str:
    return {
        "case1": f"q > kn/2 - k + 1 = {Fraction(k * n, 2) - k + 1}",
        "case2": f"q > (k+1)n/2 - k = {Fraction((k + 1) * n, 2) - k}",
        "k2-general": f"q > 3n/2 - 2 = {Fraction(3 * n, 2) - 2}",
        "k>=3-general": f"q > kn + 1 - 2k = {k * n + 1 - 2 * k}",
    }[case]


def reverse_holder_probe(
    u,
    spec: ProblemSpec,
    cfg: EstimateConfig,
    case: str | None = None,
    c1: float | None = None,
) -> CheckReport:
    """Implied constant of (int_{B_{R+rho}} w^{beta q})^{1/beta} <= C (q/rho^2) int_{B_{R+3rho}} w^s
    with w = Lap u + C1 and s = q + c (c = k-1, k, 2k-1 by case).

    Raises ThresholdError when q is at or below the case threshold or at or
    below 1; the report names the binding bound. Powers are taken in log-space.
    """
    case = case or default_case(spec)
    nd, sp_ = positive_nodes(u, spec)
    ex = case_exponents(case, sp_.k, sp_.n)
    q = float(cfg.q)
    thr = float(ex.q_threshold)
    if not q > thr:
        raise ThresholdError(f"{case}: reverse Hoelder needs {q_threshold_text(case, sp_.k, sp_.n)}, got q = {q}")
    binding = "q > 1" if thr < 1 else q_threshold_text(case, sp_.k, sp_.n)
    cfg.validate(nd.grid.box)
    if c1 is None:
        c1 = compute_c1(nd, sp_).c1
    wv = np.trace(nd.hess, axis1=-2, axis2=-1) + c1
    if np.any(wv <= 0):
        raise DomainError("Lap u + C1 must be positive")
    grid = nd.grid
    c = cfg.ball_center(grid.box)
    wts = trapezoid_weights(grid)
    beta = float(ex.beta)
    s = q + ex.offset
    inner = ball_mask(grid, c, cfg.R + cfg.rho)
    outer = ball_mask(grid, c, cfg.R + 3 * cfg.rho)
    log_lhs = _log_integral(wts, wv, beta * q, inner) / beta
    log_rhs = math.log(q / cfg.rho**2) + _log_integral(wts, wv, s, outer)
    log_c = log_lhs - log_rhs
    row = {"q": q, "h": float(grid.spacing.max()), "log_lhs": log_lhs, "log_rhs_core": log_rhs, "implied_constant": math.exp(log_c)}
    return CheckReport(
        name="reverse_holder_probe",
        paper_ref="reverse Hoelder inequality for Lap u + C1",
        kind="probe",
        levels=[row],
        implied_constant=math.exp(log_c),
        passed=True,
        details={
            "schedule_case": case,
            "beta": str(ex.beta),
            "rhs_exponent": s,
            "q_threshold": str(ex.q_threshold),
            "binding_bound": binding,
            "log_implied_constant": log_c,
            "c1": float(c1),
            "q": q,
            "rho": cfg.rho,
            "R": cfg.R,
            "h": cfg.h,
        },
    )


def stability(values: Sequence[float]) -> float:
    """max / min - 1 of positive values (0 means perfectly stable)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0 or np.any(v <= 0) or not np.all(np.isfinite(v)):
        return math.inf
    return float(v.max() / v.min() - 1.0)


def within_band(values: Sequence[float], band: float = 0.2) -> bool:
    """Every value within +-band of the first one."""
    v = np.asarray(values, dtype=float)
    if v.size == 0 or not np.all(np.isfinite(v)) or v[0] == 0:
        return False
    return bool(np.all(np.abs(v / v[0] - 1.0) <= band))


def implied_constant_study(
    make_field: Callable[[int], object],
    spec: ProblemSpec,
    cfg: EstimateConfig,
    levels: Sequence[int],
    qs: Sequence[float],
    probe: Callable = None,
    band: float = 0.2,
) -> CheckReport:
    """Implied constants across grid levels (at cfg.q) and across a q-sweep
    (at the finest level); passes when both stay within +-band of their first
    entry. ``make_field(points)`` returns the solution on a grid."""
    probe = probe or reverse_holder_probe
    ref, sweep = [], []
    rows = []
    for m in levels:
        r = probe(make_field(m), spec, cfg)
        ref.append(r.implied_constant)
        rows.append({"axis": "grid", "points": m, "q": cfg.q, "implied_constant": r.implied_constant})
    u = make_field(levels[-1])
    for q in qs:
        r = probe(u, spec, _replace(cfg, q=q))
        sweep.append(r.implied_constant)
        rows.append({"axis": "q", "points": levels[-1], "q": q, "implied_constant": r.implied_constant})
    ok_grid = within_band(ref, band)
    ok_q = within_band(sweep, band)
    return CheckReport(
        name=f"{getattr(probe, '__name__', 'probe')}_stability",
        paper_ref="implied-constant stability under refinement and q-sweep",
        kind="probe",
        levels=rows,
        implied_constant=ref[-1] if ref else None,
        passed=bool(ok_grid and ok_q),
        details={
            "implied_constant_history": ref,
            "q_sweep": sweep,
            "grid_stable": ok_grid,
            "q_stable": ok_q,
            "band": band,
        },
    )


def _replace(cfg: EstimateConfig, **kw) -> EstimateConfig:
    d = cfg.to_dict()
    d.update(kw)
    return EstimateConfig(**d)


# ------------------------------------------------------------ Moser schedule


def _exact(p) -> Fraction:
    if isinstance(p, Fraction):
        return p
    if isinstance(p, (int, np.integer)):
        return Fraction(int(p))
    if isinstance(p, str):
        return Fraction(p)
    if not math.isfinite(float(p)):
        raise ConfigError("p must be finite")
    return Fraction(repr(float(p)))


def p_threshold(case: str, k: int, n: int) -> Fraction:
    return {
        "case1": Fraction(k * n, 2),
        "case2": Fraction((k + 1) * n, 2),
        "k2-general": Fraction(3 * n, 2),
        "k>=3-general": Fraction(k * n),
    }[case]


_P_GATE_TEXT = {
    "case1": "p > kn/2",
    "case2": "p > (k+1)n/2",
    "k2-general": "p > 3n/2",
    "k>=3-general": "p > kn with 3 <= k <= n",
}


@dataclass
class MoserSchedule:
    """Exponents of the Moser iteration, exact in rational arithmetic.

    q_j = beta q_{j-1} - c, so q_j / beta^j = q_0 - c (1 - beta^-j) / (beta - 1)
    decreases to the limit q_0 - c / (beta - 1).
    """

    case: str
    k: int
    n: int
    p: Fraction
    theta: Fraction
    beta: Fraction
    q0: Fraction
    offset: int
    q: list = field(default_factory=list)
    limit: Fraction = Fraction(0)
    limit_positive: bool = True
    sum_i_beta_inv: Fraction = Fraction(0)
    sum_beta_inv: Fraction = Fraction(0)

    def q_at(self, j: int) -> Fraction:
        v = self.q0
        for _ in range(j):
            v = self.beta * v - self.offset
        return v

    def closed_form(self, j: int) -> Fraction:
        """q_j / beta^j from the summed recursion."""
        b = self.beta
        return self.q0 - self.offset * (1 - b ** (-j)) / (b - 1)

    def ratio(self, j: int) -> Fraction:
        return self.q_at(j) / self.beta**j

    def limit_gap(self, j: int) -> float:
        return float(self.ratio(j) - self.limit)

    def rows(self) -> list[dict]:
        return [
            {
                "j": j,
                "q_j": float(qj),
                "beta_q_j": float(self.beta * qj),
                "radius_factor": float(Fraction(1, 3 ** (j + 1))),
            }
            for j, qj in enumerate(self.q)
        ]

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "k": self.k,
            "n": self.n,
            "p": str(self.p),
            "theta": str(self.theta),
            "beta": str(self.beta),
            "q0": str(self.q0),
            "offset": self.offset,
            "limit": str(self.limit),
            "limit_float": float(self.limit),
            "limit_positive": self.limit_positive,
            "sum_i_beta_inv": str(self.sum_i_beta_inv),
            "sum_beta_inv": str(self.sum_beta_inv),
            "terms": len(self.q),
        }


def moser_schedule(k: int, n: int, p, case: str, q_max: float = 1e6, max_terms: int = 400) -> MoserSchedule:
    """Exponent schedule for the given case; ThresholdError below the p gate.

    Terms are generated until q_j exceeds ``q_max`` (or q_j <= 0, which the
    gates rule out, or ``max_terms``). The accumulated constant exponents
    sum_{i>=0} i beta^-i = beta / (beta-1)^2 and sum_{i>=0} beta^-i = beta / (beta-1)
    are exact.
    """
    ex = case_exponents(case, k, n)
    p = _exact(p)
    gate = p_threshold(case, ex.k, ex.n)
    if not p > gate:
        raise ThresholdError(f"{case}: needs {_P_GATE_TEXT[case]} = {gate}, got p = {p}")
    # p - k + 1, p - k, p - 2 and p - 2k + 1 by case
    q0 = p - ex.offset
    b = ex.beta
    qs = [q0]
    while qs[-1] <= q_max and qs[-1] > 0 and len(qs) < max_terms:
        qs.append(b * qs[-1] - ex.offset)
    limit = q0 - ex.offset / (b - 1)
    return MoserSchedule(
        case=case,
        k=ex.k,
        n=ex.n,
        p=p,
        theta=ex.theta,
        beta=b,
        q0=q0,
        offset=ex.offset,
        q=qs,
        limit=limit,
        limit_positive=limit > 0,
        sum_i_beta_inv=b / (b - 1) ** 2,
        sum_beta_inv=b / (b - 1),
    )


def partial_sums(beta: Fraction, terms: int) -> tuple[float, float]:
    """Partial sums of sum i beta^-i and sum beta^-i, i = 0..terms-1."""
    b = float(beta)
    i = np.arange(terms, dtype=float)
    w = b ** (-i)
    return float(np.sum(i * w)), float(np.sum(w))


# ----------------------------------------------------------- sup-norm chain


def _normalized_log_norm(weights, w, p, mask) -> float:
    """log of (sum(wts w^p) / sum(wts))^(1/p) over mask."""
    sel = mask & (weights > 0)
    lw = np.log(weights[sel])
    return float((logsumexp(p * np.log(w[sel]) + lw) - logsumexp(lw)) / p)


def _normalized_direct(weights, w, p, mask) -> float:
    sel = mask & (weights > 0)
    return float((np.sum(weights[sel] * w[sel] ** p) / np.sum(weights[sel])) ** (1.0 / p))


def sup_norm_chain(
    u,
    spec: ProblemSpec,
    schedule: MoserSchedule,
    R: float,
    center=None,
    J: int = 8,
    c1: float | None = None,
    rtol: float = 0.05,
) -> CheckReport:
    """Normalized L^{beta q_j} means of w = Lap u + C1, j = 0..J.

    ``fixed`` uses the ball B_R for every j; these means are nondecreasing
    in the exponent for any w > 0 and are asserted to be so (1e-12 slack)
    and to come within ``rtol`` of max_{B_R} w at j = J. ``nested`` uses the
    shrinking balls B_{(1+3^{-j-1})R} of the iteration, and ``chain`` holds
    the log of (int_{B_j} w^{beta q_j})^{beta^{-j-1}}; both are reported.
    For exponents up to 50 the log-space means are compared with direct
    evaluation.
    """
    nd, sp_ = positive_nodes(u, spec)
    grid = nd.grid
    c = grid.box.center if center is None else np.asarray(center, dtype=float)
    lo, hi = np.array(grid.box.lo), np.array(grid.box.hi)
    if np.any(c - 2 * R < lo - 1e-12) or np.any(c + 2 * R > hi + 1e-12):
        raise DomainError("B_2R does not fit the grid")
    if c1 is None:
        c1 = compute_c1(nd, sp_).c1
    w = np.trace(nd.hess, axis1=-2, axis2=-1) + c1
    if np.any(w <= 0):
        raise DomainError("Lap u + C1 must be positive")
    wts = trapezoid_weights(grid)
    base = ball_mask(grid, c, R)
    wmax = float(w[base].max())
    J = min(J, len(schedule.q) - 1)
    beta = float(schedule.beta)
    rows, fixed, dual = [], [], []
    for j in range(J + 1):
        p = beta * float(schedule.q[j])
        lf = _normalized_log_norm(wts, w, p, base)
        mj = ball_mask(grid, c, (1 + 3.0 ** (-j - 1)) * R)
        ln = _normalized_log_norm(wts, w, p, mj)
        chain = _log_integral(wts, w, p, mj) * beta ** (-j - 1)
        fixed.append(math.exp(lf))
        if p <= 50:
            d = _normalized_direct(wts, w, p, base)
            dual.append(abs(d - math.exp(lf)) / d)
        rows.append({"j": j, "exponent": p, "fixed": math.exp(lf), "nested": math.exp(ln), "log_chain": chain})
    mono = all(b >= a * (1 - 1e-12) for a, b in zip(fixed, fixed[1:]))
    close = fixed[-1] >= (1 - rtol) * wmax
    dual_max = max(dual) if dual else 0.0
    return CheckReport(
        name="sup_norm_chain",
        paper_ref="Moser iteration over shrinking balls",
        kind="probe",
        levels=rows,
        passed=bool(mono and close and dual_max <= 1e-10),
        details={
            "node_max": wmax,
            "monotone": mono,
            "final_ratio": fixed[-1] / wmax,
            "dual_path_max_rel": dual_max,
            "c1": float(c1),
            "schedule_case": schedule.case,
        },
    )


# -------------------------------------------------- xi-dependent right side


def _lipschitz_xz(f: ScalarFunction, x, z, p, step: float = 1e-5) -> np.ndarray:
    """Operator norm of d(f_xi)/d(x, z) at the given points, central differences."""
    n = x.shape[-1]
    cols = []
    for b in range(n):
        e = np.zeros(n)
        e[b] = step
        cols.append((f.d_p(x + e, z, p) - f.d_p(x - e, z, p)) / (2 * step))
    cols.append((f.d_p(x, z + step, p) - f.d_p(x, z - step, p)) / (2 * step))
    Jm = np.stack(cols, axis=-1)  # (..., n, n+1)
    return np.linalg.norm(Jm, ord=2, axis=(-2, -1))


def f_xi_extension_check(
    u,
    spec: ProblemSpec,
    cfg: EstimateConfig,
    c_sigma: float | None = None,
    safety: float = 1.25,
) -> CheckReport:
    """One-sided bound for second quotients of f[u] when f depends on xi.

    With g the node gradient, superscripts the shifts by +-h e_l and
    d^{+-h} g the one-sided quotients of g,

        D_ll f[u] >= f_xi[u] . D_ll g - C_S (|d^h g|^2 + |d^-h g|^2)
                     - C_L (|d^h g| + |d^-h g|)
                     + (f(x+, u+, g) - 2 f[u] + f(x-, u-, g)) / h^2

    where C_S makes xi -> f + C_S |xi|^2 convex on the evaluation set and
    C_L bounds the (x, z)-Lipschitz constant of f_xi times (1 + max |d^{+-h} u|).
    C_S comes from the sampled curvature of f; C_L from sampled derivatives
    (times ``safety``). The smallest C_L that would suffice is reported.
    """
    nd, sp_ = positive_nodes(u, spec)
    f = sp_.f
    grid = nd.grid
    n = sp_.n
    offs = _offsets(grid, cfg.h)
    m = max(abs(o) for o in offs)
    margin = (m,) * n
    shape = grid.shape
    w0 = _window(shape, margin)
    c = cfg.ball_center(grid.box)
    radius = float(np.linalg.norm(np.maximum(np.abs(np.array(grid.box.lo) - c), np.abs(np.array(grid.box.hi) - c))))
    sbox = EvalBox.around(nd, c, radius)
    if c_sigma is None:
        cs = compute_c_sigma(f, sbox).c_sigma if f.depends_on_p else 0.0
    else:
        cs = float(c_sigma)
    x0, z0, g0 = nd.x[w0], nd.z[w0], nd.p[w0]
    f0 = f.value(x0, z0, g0)
    fxi = f.d_p(x0, z0, g0)
    lhs_all, rhs_all, lin_all = [], [], []
    lip = np.zeros(z0.shape)
    dumax = 0.0
    for l in range(n):
        h = offs[l] * grid.spacing[l]
        wp = _window(shape, margin, l, offs[l])
        wm = _window(shape, margin, l, -offs[l])
        xp, zp, gp = nd.x[wp], nd.z[wp], nd.p[wp]
        xm, zm, gm = nd.x[wm], nd.z[wm], nd.p[wm]
        lhs = (f.value(xp, zp, gp) - 2 * f0 + f.value(xm, zm, gm)) / h**2
        dpg = np.linalg.norm(gp - g0, axis=-1) / abs(h)
        dmg = np.linalg.norm(g0 - gm, axis=-1) / abs(h)
        frozen = (f.value(xp, zp, g0) - 2 * f0 + f.value(xm, zm, g0)) / h**2
        rhs = np.sum(fxi * (gp - 2 * g0 + gm), axis=-1) / h**2 - cs * (dpg**2 + dmg**2) + frozen
        lhs_all.append(lhs)
        rhs_all.append(rhs)
        lin_all.append(dpg + dmg)
        if f.depends_on_p:
            lip = np.maximum(lip, np.maximum(_lipschitz_xz(f, xp, zp, g0), _lipschitz_xz(f, xm, zm, g0)))
            lip = np.maximum(lip, _lipschitz_xz(f, x0, z0, g0))
        dumax = max(dumax, float(np.abs(zp - z0).max() / abs(h)), float(np.abs(z0 - zm).max() / abs(h)))
    lhs = np.stack(lhs_all)
    rhs = np.stack(rhs_all)
    lin = np.stack(lin_all)
    c_lin = safety * float(lip.max()) * (1.0 + dumax) if f.depends_on_p else 0.0
    slack = lhs - rhs
    scale = np.abs(lhs) + np.abs(rhs) + 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        need = np.where(slack < 0, -slack / np.where(lin > 0, lin, np.nan), 0.0)
    need = np.where(np.isnan(need), np.where(slack < -1e-9 * scale, np.inf, 0.0), need)
    c_needed = float(need.max())
    margin_v = slack + c_lin * lin
    tol = 1e-9 * scale
    passed = bool(np.all(margin_v >= -tol))
    row = {"h": float(cfg.h), "c_sigma": cs, "c_lin": c_lin, "c_lin_needed": c_needed, "min_margin": float(margin_v.min())}
    return CheckReport(
        name="f_xi_extension_check",
        paper_ref="one-sided second-quotient bound for a gradient-dependent right-hand side",
        levels=[row],
        implied_constant=c_needed,
        passed=passed,
        details={
            "c_sigma": cs,
            "c_lin": c_lin,
            "slack_constant": c_needed,
            "min_margin": float(margin_v.min()),
            "min_slack_without_linear": float(slack.min()),
            "depends_on_xi": bool(f.depends_on_p),
            "h": cfg.h,
        },
    )


__all__ = [
    "EstimateConfig",
    "TildeV",
    "MoserSchedule",
    "CaseExponents",
    "cutoff_profile",
    "cutoff_bounds",
    "concavity_dq_check",
    "i1_pointwise_bound",
    "bochner_identity_check",
    "cancellation_residuals",
    "cancellation_identity_checks",
    "estimate_probe_I123",
    "j_ledger",
    "reverse_holder_probe",
    "implied_constant_study",
    "case_exponents",
    "moser_schedule",
    "partial_sums",
    "sup_norm_chain",
    "f_xi_extension_check",
    "stability",
    "within_band",
    "default_case",
]
