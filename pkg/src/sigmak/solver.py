"""Manufactured exact solutions and a cone-preserving damped Newton solver.

The discrete problem is sigma_k^(1/k)(D_h^2 u - H(x, u, D_h u)) = f(x, u, D_h u)
at interior nodes with Dirichlet values pinned on the boundary, where D_h
and D_h^2 are the central stencils of ``gridcalc``. Negative-case problems
are solved for w = -u in their positive form.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla
import sympy as sp

from . import _kernels, symfun
from .augmented import (
    AnalyticField,
    NodeData,
    PositiveYamabe,
    ProblemSpec,
    Zero,
    a_h_field,
    stencil_nodes,
)
from .errors import (
    ConfigError,
    DomainError,
    InadmissibleInit,
    LinearSolveFailure,
    LineSearchExhausted,
    MaxIterations,
)
from .expr import ExprFunction, ScalarFunction
from .gridcalc import Box, ScalarField
from .reports import CheckReport, observed_orders

NAMES = ("quadratic-khessian", "bubble-positive", "cap-negative", "perturbed-bubble")


# ------------------------------------------------------------ manufactured


@dataclass(frozen=True, eq=False)
class ManufacturedSolution:
    """An exact pair (u, f): f is sigma_k^(1/k) of the augmented Hessian of u.

    ``f_text`` is the expression of f, or of u when f is evaluated numerically.
    """

    name: str
    spec: ProblemSpec
    field: AnalyticField
    f_text: str
    validity_radius: float | None = None
    params: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def k(self) -> int:
        return self.spec.k

    def sample(self, points, box: Box | None = None) -> ScalarField:
        return self.field.sample(box or self.spec.box, points)

    def nodes(self, points, box: Box | None = None) -> NodeData:
        return self.field.nodes(box or self.spec.box, points)

    def exact_residual(self, points) -> float:
        """max |sigma_k^(1/k)(+-A_H) - f| with exact derivatives."""
        nd = self.nodes(points)
        A = self.spec.sign * a_h_field(nd, self.spec)
        f = self.spec.f.value(nd.x, nd.z, nd.p)
        return float(np.abs(symfun.sigma_root(self.k, A) - f).max())

    def min_margin(self, points) -> float:
        nd = self.nodes(points)
        A = self.spec.sign * a_h_field(nd, self.spec)
        return float(np.min(symfun.cone_margin(self.k, A)))


def _sym_x(n):
    return sp.symbols(f"x1:{n + 1}", real=True)


class InducedF(ScalarFunction):
    """f(x) = sigma_k^(1/k)(+-A_H[u](x)) of an analytic u; independent of (z, xi).

    The x-gradient uses central differences with step 1e-5.
    """

    depends_on_p = False

    def __init__(self, fld: AnalyticField, h, k: int, sign: float, label: dict):
        self.fld, self.h, self.k, self.sign = fld, h, k, sign
        self.n = fld.n
        self.label = label

    def _at(self, x):
        x = np.asarray(x, dtype=float)
        z = self.fld.fn(x)
        A = self.fld.hess(x) - self.h.H(x, z, self.fld.grad(x))
        return symfun.sigma_root(self.k, self.sign * A, strict=False)

    def value(self, x, z, p):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(z), np.shape(p)[:-1])
        return np.broadcast_to(self._at(x), shape).copy()

    def d_x(self, x, z, p):
        x = np.asarray(x, dtype=float)
        out = []
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = 1e-5
            out.append((self._at(x + e) - self._at(x - e)) / 2e-5)
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(z), np.shape(p)[:-1])
        return np.broadcast_to(np.stack(out, axis=-1), shape + (self.n,)).copy()

    def d_z(self, x, z, p):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(z), np.shape(p)[:-1])
        return np.zeros(shape)

    def d_p(self, x, z, p):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(z), np.shape(p)[:-1])
        return np.zeros(shape + (self.n,))

    def d2_pp(self, x, z, p):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(z), np.shape(p)[:-1])
        return np.zeros(shape + (self.n, self.n))

    def to_dict(self) -> dict:
        return {"manufactured": dict(self.label)}


def _check_box(box: Box, radius: float | None, name: str):
    if radius is None:
        return
    far = np.maximum(np.abs(np.array(box.lo)), np.abs(np.array(box.hi)))
    if float(np.linalg.norm(far)) > radius * (1 + 1e-12):
        raise DomainError(f"{name}: box leaves the validity ball of radius {radius}")


def manufactured(name: str, n: int, k: int, box: Box | None = None, eps: float | None = None) -> ManufacturedSolution:
    """Built-in exact solutions.

    * ``quadratic-khessian``: u = |x|^2/2, H = 0, f = C(n,k)^(1/k)
    * ``bubble-positive``: u = 1 + |x|^2, Yamabe H = |xi|^2/(2z) I, f = 2 C(n,k)^(1/k) / u
    * ``cap-negative``: u = 1 - |x|^2/4 on the unit ball, negative sign case,
      f = (1/2 + |x|^2/(8u)) C(n,k)^(1/k)
    * ``perturbed-bubble``: bubble + eps sin(c . x), c_i = 1 + i/2 (i from 0);
      eps is halved from 0.2 until the cone margin on the box is at least half
      the bubble's; f is evaluated from the exact derivatives of u.
    """
    if name not in NAMES:
        raise ConfigError(f"unknown manufactured solution {name!r}; expected one of {NAMES}")
    xs = _sym_x(n)
    r2 = sum(x**2 for x in xs)
    C = math.comb(n, k)
    c_root = sp.Integer(C) ** sp.Rational(1, k)
    radius = None
    params: dict = {}
    if name == "quadratic-khessian":
        box = box or Box.cube(n, -1.0, 1.0)
        u = r2 / 2
        h = Zero()
        f_text = str(sp.nsimplify(c_root))
        sign_case = "positive"
    elif name == "bubble-positive":
        box = box or Box.cube(n, -1.0, 1.0)
        u = 1 + r2
        h = PositiveYamabe()
        f_text = str(2 * c_root / u)
        sign_case = "positive"
    elif name == "cap-negative":
        box = box or Box.cube(n, -0.5, 0.5)
        radius = 1.0
        u = 1 - r2 / 4
        h = PositiveYamabe()
        f_text = str((sp.Rational(1, 2) + r2 / (8 * u)) * c_root)
        sign_case = "negative"
    else:
        box = box or Box.cube(n, -1.0, 1.0)
        h = PositiveYamabe()
        sign_case = "positive"
        phase = sum((1 + sp.Rational(i, 2)) * x for i, x in enumerate(xs))
        base = manufactured("bubble-positive", n, k, box)
        target = 0.5 * base.min_margin(9)
        e = 0.2 if eps is None else float(eps)
        while True:
            u = 1 + r2 + sp.Float(e) * sp.sin(phase)
            fld = AnalyticField.from_expression(str(u), n)
            nd = fld.nodes(box, 9)
            A = nd.hess - h.H(nd.x, nd.z, nd.p)
            m = symfun.cone_margin(k, A)
            if eps is not None or (np.min(m) >= target and np.min(nd.z) > 0):
                break
            e *= 0.5
            if e < 1e-8:
                raise DomainError("could not find an admissible perturbation size")
        params = {"eps": e, "frequencies": [1 + i / 2 for i in range(n)]}
        label = {"name": name, "n": n, "k": k, "eps": e}
        spec = ProblemSpec(n, k, box, InducedF(fld, h, k, 1.0, label), h, sign_case)
        return ManufacturedSolution(name, spec, fld, str(u), radius, params)
    _check_box(box, radius, name)
    fld = AnalyticField.from_expression(str(u), n)
    spec = ProblemSpec(n, k, box, ExprFunction(f_text, n), h, sign_case)
    return ManufacturedSolution(name, spec, fld, f_text, radius, params)


# ------------------------------------------------------------------ Newton


@dataclass
class SolveResult:
    """Solution field and per-iterate history (index 0 is the initial guess)."""

    field: ScalarField
    residuals: list
    margins: list
    steps: list
    converged: bool
    tolerance: float

    @property
    def iterations(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residuals": self.residuals,
            "margins": self.margins,
            "steps": self.steps,
            "tolerance": self.tolerance,
            "shape": list(self.field.shape),
        }


def _interior_mask(shape) -> np.ndarray:
    m = np.zeros(shape, bool)
    m[tuple(slice(1, s - 1) for s in shape)] = True
    return m


class _Discrete:
    """Residual and Jacobian of the positive-form discrete operator."""

    def __init__(self, spec: ProblemSpec, grid: ScalarField):
        self.spec = spec
        self.k = spec.k
        self.grid = grid
        self.interior = _interior_mask(grid.shape)
        shape = grid.shape
        self.strides = np.array([int(np.prod(shape[a + 1 :])) for a in range(len(shape))], dtype=np.int64)
        self.flat = np.arange(int(np.prod(shape)), dtype=np.int64)
        self.inv_dx = 1.0 / grid.spacing
        self.inv_dx2 = self.inv_dx**2

    def evaluate(self, values: np.ndarray):
        u = self.grid.with_values(values)
        nd = stencil_nodes(u)
        self.spec.h.check_domain(nd.z[self.interior])
        A = nd.hess - self.spec.h.H(nd.x, nd.z, nd.p)
        s = symfun.sigmas(A, self.k)
        inside = np.all(s[..., 1:] > 0.0, axis=-1)
        margin = symfun._margin_from_sigmas(s)
        with np.errstate(invalid="ignore"):
            root = np.where(inside, np.abs(s[..., self.k]) ** (1.0 / self.k), np.nan)
        res = root - self.spec.f.value(nd.x, nd.z, nd.p)
        return nd, A, inside, margin, res

    def jacobian(self, nd: NodeData, A: np.ndarray) -> sps.csr_matrix:
        spec, k, n = self.spec, self.k, self.spec.n
        mask = self.interior
        G = np.zeros(A.shape)
        G[mask] = symfun.grad_sigma_k1k(k, A[mask])
        x, z, p = nd.x, nd.z, nd.p
        f = spec.f
        c1 = -(np.einsum("...ij,...ija->...a", G, spec.h.dH_dp(x, z, p)) + f.d_p(x, z, p))
        c0 = -(np.einsum("...ij,...ij->...", G, spec.h.dH_dz(x, z, p)) + f.d_z(x, z, p))
        N = self.flat.size
        r, c, v = _kernels.stencil_coo(
            G.reshape(N, n, n),
            c1.reshape(N, n),
            c0.reshape(N),
            self.flat,
            self.strides,
            self.inv_dx,
            self.inv_dx2,
            mask.reshape(N),
        )
        return sps.csr_matrix(sps.coo_matrix((v, (r, c)), shape=(N, N)))


try:
    import pyamg
except ImportError:  # pragma: no cover - optional
    pyamg = None

# above this many unknowns the direct factorisation fill-in dominates the run
AMG_MIN_UNKNOWNS = 15000
LINEAR_SOLVERS = ("auto", "direct", "amg")


def _direct(J: sps.csr_matrix, rhs: np.ndarray) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            return spla.spsolve(J.tocsc(), rhs)
        except (spla.MatrixRankWarning, RuntimeError) as exc:
            raise LinearSolveFailure(f"linearised system could not be solved: {exc}") from None


def linear_solve(J: sps.csr_matrix, rhs: np.ndarray, method: str = "auto", rtol: float = 1e-13) -> np.ndarray:
    """Solve the Newton system.

    ``direct`` is a sparse LU. ``amg`` is GMRES preconditioned by smoothed
    aggregation (pyamg); it falls back to LU when it does not reach ``rtol``.
    ``auto`` picks amg for large systems when pyamg is importable.
    """
    if method not in LINEAR_SOLVERS:
        raise ConfigError(f"linear solver must be one of {LINEAR_SOLVERS}, got {method!r}")
    if method == "auto":
        method = "amg" if pyamg is not None and J.shape[0] >= AMG_MIN_UNKNOWNS else "direct"
    if method == "amg" and pyamg is None:
        raise ConfigError("linear solver 'amg' needs pyamg")
    if method == "direct" or not np.any(rhs):
        return _direct(J, rhs)
    ml = pyamg.smoothed_aggregation_solver(J.tocsr(), symmetry="nonsymmetric")
    x, info = spla.gmres(J, rhs, M=ml.aspreconditioner(), rtol=rtol, atol=0.0, restart=60, maxiter=20)
    if info != 0 or not np.all(np.isfinite(x)):
        return _direct(J, rhs)
    return x


def _sup(res: np.ndarray, mask: np.ndarray) -> float:
    return float(np.abs(res[mask]).max())


def newton_solve(
    spec: ProblemSpec,
    boundary: ScalarField,
    init: ScalarField,
    rtol: float = 1e-9,
    max_iter: int = 50,
    gamma: float = 0.1,
    max_halvings: int = 30,
    linear_solver: str = "auto",
) -> SolveResult:
    """Damped Newton iteration on sigma_k^(1/k)(A_H[u]) - f[u] = 0.

    Boundary nodes take the values of ``boundary``; interior nodes start from
    ``init``. A step t in {1, 1/2, ...} is accepted when the new iterate is
    admissible at every interior node with cone margin >= gamma times the
    current margin there and the residual sup-norm decreases (or already meets
    the tolerance). Stops when the residual sup-norm is at most
    ``rtol * max(1, max|f|)``; at least one Newton step is always taken.
    ``linear_solver`` is passed to :func:`linear_solve`.
    """
    if not (boundary.same_grid(init)):
        raise ConfigError("boundary and init must live on the same grid")
    if spec.sign_case == "negative":
        res = newton_solve(
            spec.positive_form(),
            boundary.with_values(-boundary.values),
            init.with_values(-init.values),
            rtol,
            max_iter,
            gamma,
            max_halvings,
            linear_solver,
        )
        res.field = res.field.with_values(-res.field.values)
        return res
    disc = _Discrete(spec, init)
    mask = disc.interior
    values = np.where(mask, init.values, boundary.values)
    try:
        nd, A, inside, margin, res = disc.evaluate(values)
    except DomainError as exc:
        raise InadmissibleInit(f"initial guess leaves the model's domain: {exc}") from None
    if not np.all(inside[mask]):
        bad = int(np.sum(~inside[mask]))
        raise InadmissibleInit(f"initial guess is outside the cone at {bad} interior nodes")
    scale = max(1.0, float(np.abs(spec.f.value(nd.x, nd.z, nd.p)).max()))
    tol = rtol * scale
    cur = _sup(res, mask)
    residuals, margins, steps = [cur], [float(margin[mask].min())], []
    for _ in range(max_iter):
        J = disc.jacobian(nd, A)
        rhs = np.where(mask, -res, 0.0).ravel()
        delta = linear_solve(J, rhs, linear_solver)
        if not np.all(np.isfinite(delta)):
            raise LinearSolveFailure("linear solve returned non-finite values")
        delta = delta.reshape(values.shape)
        t = 1.0
        for _h in range(max_halvings + 1):
            trial = values + t * delta
            try:
                nd_t, A_t, in_t, m_t, r_t = disc.evaluate(trial)
                ok = bool(np.all(in_t[mask]) and np.all(m_t[mask] >= gamma * margin[mask]))
            except DomainError:
                ok = False
            if ok:
                new = _sup(r_t, mask)
                if new < cur or new <= tol:
                    break
            t *= 0.5
        else:
            raise LineSearchExhausted(f"no admissible decreasing step after {max_halvings} halvings (residual {cur:.3e})")
        values, nd, A, inside, margin, res = trial, nd_t, A_t, in_t, m_t, r_t
        cur = new
        residuals.append(cur)
        margins.append(float(margin[mask].min()))
        steps.append(t)
        if cur <= tol:
            return SolveResult(init.with_values(values), residuals, margins, steps, True, tol)
    raise MaxIterations(f"no convergence in {max_iter} iterations (residual {cur:.3e}, tolerance {tol:.3e})")


def boundary_bump(box: Box, X: np.ndarray) -> np.ndarray:
    """prod_i 4 (x_i - lo_i)(hi_i - x_i) / (hi_i - lo_i)^2: 1 at the centre, 0 on the boundary."""
    out = np.ones(X.shape[:-1])
    for i, (a, b) in enumerate(zip(box.lo, box.hi)):
        out = out * 4.0 * (X[..., i] - a) * (b - X[..., i]) / (b - a) ** 2
    return out


def default_init(ms: ManufacturedSolution, points, amplitude: float = 0.05) -> ScalarField:
    """Exact field plus ``amplitude`` times a bump vanishing on the boundary
    (the exact field itself for the quadratic solution)."""
    u = ms.sample(points)
    if ms.name == "quadratic-khessian":
        return u
    return u.with_values(u.values + amplitude * boundary_bump(ms.spec.box, u.coords()))


def mms_convergence(
    name: str,
    n: int = 3,
    k: int = 2,
    levels: Sequence[int] = (9, 17, 33),
    box: Box | None = None,
    min_order: float = 1.8,
    exact_tol: float = 1e-10,
    estimate_checks: bool = True,
    linear_solver: str = "auto",
) -> CheckReport:
    """Solve on each level from the default initial guess and compare with
    the exact solution in the sup-norm (all nodes and the inner half box).

    Errors at rounding level count as exact (order +inf). With
    ``estimate_checks`` the finest solved field also goes through the
    cancellation identity, concavity and gradient-bound checks.
    """
    if len(levels) < 3:
        raise ConfigError("need at least three refinement levels")
    ms = manufactured(name, n, k, box)
    rows, hs, errs = [], [], []
    admissible = True
    last = None
    for m in levels:
        exact = ms.sample(m)
        res = newton_solve(ms.spec, exact, default_init(ms, m), linear_solver=linear_solver)
        err = np.abs(res.field.values - exact.values)
        X = exact.coords()
        c = ms.spec.box.center
        half = 0.25 * (np.array(ms.spec.box.hi) - np.array(ms.spec.box.lo))
        inner = np.all(np.abs(X - c) <= half + 1e-12, axis=-1)
        admissible &= all(mg > 0 for mg in res.margins)
        h = float(exact.spacing.max())
        rows.append(
            {
                "points": m,
                "h": h,
                "error_sup": float(err.max()),
                "error_inner": float(err[inner].max()),
                "iterations": res.iterations,
                "final_residual": res.residuals[-1],
                "min_margin": min(res.margins),
            }
        )
        hs.append(h)
        errs.append(float(err.max()))
        last = res
    floor = 1e3 * np.finfo(float).eps * max(1.0, float(np.abs(ms.sample(levels[-1]).values).max()))
    orders = observed_orders(hs, errs, floor)
    if name == "quadratic-khessian":
        ok = all(e <= exact_tol for e in errs)
    else:
        ok = all(o >= min_order for o in orders)
    details = {"orders": orders, "name": name, "n": n, "k": k, "all_iterates_admissible": admissible, "floor": floor}
    details.update(ms.params)
    if estimate_checks and last is not None:
        details["estimate_checks"] = _estimate_suite(last.field, ms)
        ok = ok and all(v for v in details["estimate_checks"].values())
    return CheckReport(
        name="mms_convergence",
        paper_ref="manufactured-solution convergence of the Newton solver",
        levels=rows,
        observed_order=min(orders),
        passed=bool(ok and admissible),
        details=details,
    )


def _estimate_suite(u: ScalarField, ms: ManufacturedSolution) -> dict:
    from .estimates import EstimateConfig, cancellation_identity_checks, concavity_dq_check, i1_pointwise_bound

    dx = float(u.spacing.max())
    half = 0.5 * float(min(np.array(ms.spec.box.hi) - np.array(ms.spec.box.lo)))
    R = 0.45 * half
    cfg = EstimateConfig(R=R, rho=R / 3, q=4.0, h=dx)
    return {
        "cancellation": bool(cancellation_identity_checks(u, ms.spec).passed),
        "concavity": bool(concavity_dq_check(u, ms.spec, cfg).passed),
        "gradient_bound": bool(i1_pointwise_bound(u, ms.spec, cfg).passed),
    }


__all__ = [
    "NAMES",
    "ManufacturedSolution",
    "manufactured",
    "SolveResult",
    "newton_solve",
    "default_init",
    "boundary_bump",
    "mms_convergence",
]
