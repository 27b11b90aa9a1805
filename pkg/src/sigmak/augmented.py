"""Lower-order tensors H(x, z, xi), augmented Hessians, admissibility, constants.

An augmented Hessian is ``A_H[u] = D^2 u - H(x, u, Du)``. Every function
here accepts the solution either as a :class:`~sigmak.gridcalc.ScalarField`
(derivatives by second-order stencils) or as :class:`NodeData` carrying
analytic derivatives at the nodes.

Sign cases: for ``sign_case="negative"`` the equation reads
``sigma_k^(1/k)(-A_H[u]) = f`` with ``u > 0``; cone tests use ``-A_H``.
:meth:`ProblemSpec.positive_form` rewrites such a problem for ``w = -u``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import sympy as sp
from scipy.stats import qmc

from . import symfun
from .errors import ConeViolation, ConfigError, DimensionError, DomainError
from .expr import CallableFunction, ExprFunction, Reflected, ScalarFunction, function_from_dict
from .gridcalc import Box, ScalarField, gradient, hessian

SIGN_CASES = ("positive", "negative", "general")


# ------------------------------------------------------------------ node data


@dataclass(frozen=True, eq=False)
class NodeData:
    """Solution data at grid nodes: coordinates, value, gradient, Hessian.

    ``d3`` (third derivatives, ``(..., n, n, n)``) is optional and only used
    by analytic divergence computations. ``grid`` is the sampled field.
    """

    x: np.ndarray
    z: np.ndarray
    p: np.ndarray
    hess: np.ndarray
    grid: ScalarField
    d3: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.x.shape[-1]

    def negated(self) -> "NodeData":
        return NodeData(
            self.x,
            -self.z,
            -self.p,
            -self.hess,
            self.grid.with_values(-self.grid.values),
            None if self.d3 is None else -self.d3,
        )

    def laplacian(self) -> np.ndarray:
        return np.trace(self.hess, axis1=-2, axis2=-1)


def stencil_nodes(u: ScalarField) -> NodeData:
    return NodeData(u.coords(), np.array(u.values), gradient(u), hessian(u), u)


def analytic_nodes(box: Box, points, fn, grad, hess, d3=None) -> NodeData:
    u = ScalarField.from_function(box, points, fn)
    X = u.coords()
    return NodeData(
        X,
        np.array(u.values),
        np.asarray(grad(X), dtype=float),
        np.asarray(hess(X), dtype=float),
        u,
        None if d3 is None else np.asarray(d3(X), dtype=float),
    )


class AnalyticField:
    """A smooth function of x with exact derivatives up to third order.

    Built from an expression over ``x1..xn`` (module ``expr`` grammar) or
    from callables. All callables map ``(..., n)`` coordinates to arrays.
    """

    def __init__(self, n: int, fn, grad, hess, d3=None, lap=None, text: str | None = None):
        self.n = n
        self.fn, self.grad, self.hess, self.d3 = fn, grad, hess, d3
        self.lap = lap if lap is not None else (lambda X: np.trace(hess(X), axis1=-2, axis2=-1))
        self.text = text

    @classmethod
    def from_expression(cls, text: str, n: int) -> "AnalyticField":
        e = ExprFunction(text, n)
        if e.depends_on_p or e.expr.has(e._z):
            raise ConfigError("field expressions may only use x1..xn")
        xs = e._xs
        expr = e.expr
        g = [sp.diff(expr, xi) for xi in xs]
        H = [[sp.diff(gi, xj) for xj in xs] for gi in g]
        T = [[[sp.diff(H[i][j], xs[m]) for m in range(n)] for j in range(n)] for i in range(n)]

        def vec(obj):
            f = sp.lambdify(xs, obj, modules="numpy")

            def call(X):
                X = np.asarray(X, dtype=float)
                out = f(*[X[..., i] for i in range(n)])
                return _stack_nested(out, X.shape[:-1])

            return call

        return cls(n, vec(expr), vec(g), vec(H), vec(T), text=text)

    def nodes(self, box: Box, points) -> NodeData:
        return analytic_nodes(box, points, self.fn, self.grad, self.hess, self.d3)

    def sample(self, box: Box, points) -> ScalarField:
        return ScalarField.from_function(box, points, self.fn)


def _stack_nested(obj, shape):
    if isinstance(obj, (list, tuple)):
        return np.stack([_stack_nested(o, shape) for o in obj], axis=-1)
    return np.broadcast_to(np.asarray(obj, dtype=float), shape)


def as_nodes(u) -> NodeData:
    if isinstance(u, NodeData):
        return u
    if isinstance(u, ScalarField):
        return stencil_nodes(u)
    raise TypeError(f"expected ScalarField or NodeData, got {type(u).__name__}")


# -------------------------------------------------------------------- H models


def _eye_times(s: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(s)[..., None, None] * np.eye(n)


class HModel:
    """Base class. Subclasses with ``scalar`` set have H = h2 I.

    Derivative layouts: ``dH_dx`` and ``dH_dp`` put the differentiation index
    last, ``(..., n, n, a)``; ``d2H_dpp`` is ``(..., n, n, a, b)``.
    """

    variant = "base"
    scalar: ScalarFunction | None = None

    def check_domain(self, z) -> None:
        return None

    def H(self, x, z, p):
        self.check_domain(z)
        n = np.shape(x)[-1]
        return _eye_times(self.scalar.value(x, z, p), n)

    def dH_dx(self, x, z, p):
        n = np.shape(x)[-1]
        return self.scalar.d_x(x, z, p)[..., None, None, :] * np.eye(n)[:, :, None]

    def dH_dz(self, x, z, p):
        n = np.shape(x)[-1]
        return _eye_times(self.scalar.d_z(x, z, p), n)

    def dH_dp(self, x, z, p):
        n = np.shape(x)[-1]
        return self.scalar.d_p(x, z, p)[..., None, None, :] * np.eye(n)[:, :, None]

    def d2H_dpp(self, x, z, p):
        n = np.shape(x)[-1]
        return self.scalar.d2_pp(x, z, p)[..., None, None, :, :] * np.eye(n)[:, :, None, None]

    def params(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"variant": self.variant, "params": self.params()}


class _Zero(ScalarFunction):
    depends_on_p = False

    def __init__(self):
        self.n = -1

    def value(self, x, z, p):
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(z)))

    def d_x(self, x, z, p):
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(z)) + (np.shape(x)[-1],))

    d_z = value

    def d_p(self, x, z, p):
        return self.d_x(x, z, p)

    def d2_pp(self, x, z, p):
        n = np.shape(x)[-1]
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(z)) + (n, n))


class Zero(HModel):
    """H = 0: the k-Hessian equation."""

    variant = "Zero"

    def __init__(self):
        self.scalar = _Zero()


class _YamabeH2(ScalarFunction):
    """|p|^2 / (2 z) with analytic derivatives."""

    def __init__(self):
        self.n = -1

    def value(self, x, z, p):
        return np.sum(np.asarray(p) ** 2, axis=-1) / (2.0 * np.asarray(z))

    def d_x(self, x, z, p):
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(z)) + (np.shape(x)[-1],))

    def d_z(self, x, z, p):
        z = np.asarray(z)
        return -np.sum(np.asarray(p) ** 2, axis=-1) / (2.0 * z * z)

    def d_p(self, x, z, p):
        return np.asarray(p) / np.asarray(z)[..., None]

    def d2_pp(self, x, z, p):
        n = np.shape(p)[-1]
        return _eye_times(1.0 / np.asarray(z), n)


class PositiveYamabe(HModel):
    """H = |xi|^2 / (2z) I, defined for z >= floor > 0."""

    variant = "PositiveYamabe"

    def __init__(self, floor: float = 1e-6):
        if not floor > 0:
            raise ConfigError("PositiveYamabe floor must be positive")
        self.floor = float(floor)
        self.scalar = _YamabeH2()

    def check_domain(self, z):
        if np.any(np.asarray(z) < self.floor):
            raise DomainError(f"PositiveYamabe evaluated at z < {self.floor}")

    def params(self):
        return {"floor": self.floor}


class NegativeYamabe(HModel):
    """H = |xi|^2 / (2z) I, defined for z <= -floor < 0 (the reflected problem)."""

    variant = "NegativeYamabe"

    def __init__(self, floor: float = 1e-6):
        if not floor > 0:
            raise ConfigError("NegativeYamabe floor must be positive")
        self.floor = float(floor)
        self.scalar = _YamabeH2()

    def check_domain(self, z):
        if np.any(np.asarray(z) > -self.floor):
            raise DomainError(f"NegativeYamabe evaluated at z > {-self.floor}")

    def params(self):
        return {"floor": self.floor}


class _QuadH2(ScalarFunction):
    def __init__(self, h1: ScalarFunction):
        self.h1 = h1
        self.n = h1.n

    def value(self, x, z, p):
        return self.h1.value(x, z, p) * np.sum(np.asarray(p) ** 2, axis=-1)

    def d_x(self, x, z, p):
        return self.h1.d_x(x, z, p) * np.sum(np.asarray(p) ** 2, axis=-1)[..., None]

    def d_z(self, x, z, p):
        return self.h1.d_z(x, z, p) * np.sum(np.asarray(p) ** 2, axis=-1)

    def d_p(self, x, z, p):
        return 2.0 * self.h1.value(x, z, p)[..., None] * np.asarray(p)

    def d2_pp(self, x, z, p):
        return _eye_times(2.0 * self.h1.value(x, z, p), np.shape(p)[-1])


class ScalarQuadratic(HModel):
    """H = H1(x, z) |xi|^2 I."""

    variant = "ScalarQuadratic"

    def __init__(self, h1: ScalarFunction):
        if h1.depends_on_p:
            raise ConfigError("H1 must not depend on xi")
        self.h1 = h1
        self.scalar = _QuadH2(h1)

    def params(self):
        return {"H1": self.h1.to_dict()}


class ScalarGeneral(HModel):
    """H = H2(x, z, xi) I."""

    variant = "ScalarGeneral"

    def __init__(self, h2: ScalarFunction):
        self.h2 = h2
        self.scalar = h2

    def params(self):
        return {"H2": self.h2.to_dict()}


class GeneralMatrix(HModel):
    """Symmetric matrix-valued H(x, z, xi).

    Built from an ``n x n`` table of :class:`ScalarFunction` entries (only
    the upper triangle is read) or from a callable returning ``(..., n, n)``.
    Derivatives of a callable use central differences (step ``1e-5*scale``)
    unless ``derivs`` supplies ``dH_dx, dH_dz, dH_dp`` callables.
    """

    variant = "GeneralMatrix"
    scalar = None

    def __init__(self, entries=None, fn=None, n: int | None = None, derivs: dict | None = None):
        if (entries is None) == (fn is None):
            raise ConfigError("GeneralMatrix needs exactly one of entries or fn")
        self.entries = entries
        self.n = len(entries) if entries is not None else int(n)
        if fn is not None:
            self._fn = fn
        else:
            cells = {}
            for i in range(self.n):
                for j in range(i, self.n):
                    cells[i, j] = entries[i][j]
            self._cells = cells
        self.derivs = derivs or {}

    def _table(self, method, x, z, p, extra=()):
        lead = np.broadcast_shapes(np.shape(x)[:-1], np.shape(z), np.shape(p)[:-1])
        out = np.zeros(lead + (self.n, self.n) + extra)
        for (i, j), f in self._cells.items():
            v = getattr(f, method)(x, z, p)
            out[..., i, j] = v
            out[..., j, i] = v
        return out

    def H(self, x, z, p):
        if self.entries is not None:
            return self._table("value", x, z, p)
        M = np.asarray(self._fn(x, z, p), dtype=float)
        return 0.5 * (M + np.swapaxes(M, -1, -2))

    def dH_dx(self, x, z, p):
        if self.entries is not None:
            return self._table("d_x", x, z, p, (self.n,))
        if "dH_dx" in self.derivs:
            return np.asarray(self.derivs["dH_dx"](x, z, p), dtype=float)
        x = np.asarray(x, dtype=float)
        out = []
        for a in range(self.n):
            e = np.zeros(self.n)
            e[a] = 1.0
            h = 1e-5 * np.maximum(1.0, np.abs(x[..., a]))[..., None]
            d = (self.H(x + h * e, z, p) - self.H(x - h * e, z, p)) / (2.0 * h[..., None])
            out.append(d)
        return np.stack(out, axis=-1)

    def dH_dz(self, x, z, p):
        if self.entries is not None:
            return self._table("d_z", x, z, p)
        if "dH_dz" in self.derivs:
            return np.asarray(self.derivs["dH_dz"](x, z, p), dtype=float)
        z = np.asarray(z, dtype=float)
        h = 1e-5 * np.maximum(1.0, np.abs(z))
        return (self.H(x, z + h, p) - self.H(x, z - h, p)) / (2.0 * h[..., None, None])

    def dH_dp(self, x, z, p):
        if self.entries is not None:
            return self._table("d_p", x, z, p, (self.n,))
        if "dH_dp" in self.derivs:
            return np.asarray(self.derivs["dH_dp"](x, z, p), dtype=float)
        p = np.asarray(p, dtype=float)
        out = []
        for a in range(self.n):
            e = np.zeros(self.n)
            e[a] = 1.0
            h = 1e-5 * np.maximum(1.0, np.abs(p[..., a]))[..., None]
            out.append((self.H(x, z, p + h * e) - self.H(x, z, p - h * e)) / (2.0 * h[..., None]))
        return np.stack(out, axis=-1)

    def d2H_dpp(self, x, z, p):
        if self.entries is not None:
            return self._table("d2_pp", x, z, p, (self.n, self.n))
        p = np.asarray(p, dtype=float)
        cols = []
        for b in range(self.n):
            e = np.zeros(self.n)
            e[b] = 1.0
            h = 1e-3 * np.maximum(1.0, np.abs(p[..., b]))[..., None]
            cols.append((self.dH_dp(x, z, p + h * e) - self.dH_dp(x, z, p - h * e)) / (2.0 * h[..., None, None]))
        D = np.stack(cols, axis=-1)
        return 0.5 * (D + np.swapaxes(D, -1, -2))

    def params(self):
        if self.entries is None:
            raise ConfigError("callable GeneralMatrix models are not serialisable")
        return {"entries": [[self.entries[i][j].to_dict()["expression"] for j in range(self.n)] for i in range(self.n)]}


def h_model_from_dict(d: dict, n: int) -> HModel:
    variant = d.get("variant")
    params = d.get("params", {}) or {}

    def fun(v):
        return function_from_dict(v if isinstance(v, dict) else {"expression": v}, n)

    if variant == "Zero":
        return Zero()
    if variant == "PositiveYamabe":
        return PositiveYamabe(**params)
    if variant == "NegativeYamabe":
        return NegativeYamabe(**params)
    if variant == "ScalarQuadratic":
        return ScalarQuadratic(fun(params["H1"]))
    if variant == "ScalarGeneral":
        return ScalarGeneral(fun(params["H2"]))
    if variant == "GeneralMatrix":
        rows = params["entries"]
        if len(rows) != n or any(len(r) != n for r in rows):
            raise ConfigError("GeneralMatrix entries must be an n x n table")
        cells = [[None] * n for _ in range(n)]
        for i in range(n):
            for j in range(n):
                a, b = min(i, j), max(i, j)
                cells[i][j] = fun(rows[a][b])
        return GeneralMatrix(entries=cells)
    raise ConfigError(f"unknown H model variant {variant!r}")


# ----------------------------------------------------------------- problem


@dataclass(frozen=True)
class EvalBox:
    """Closed set of (x, z, xi): a spatial ball, a z-interval and a xi-ball."""

    center: tuple
    radius: float
    z_lo: float
    z_hi: float
    xi_radius: float

    def __post_init__(self):
        if self.radius < 0 or self.xi_radius < 0 or self.z_lo > self.z_hi:
            raise ConfigError("EvalBox needs radius, xi_radius >= 0 and z_lo <= z_hi")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def n(self) -> int:
        return len(self.center)

    def contains(self, x, z, p, rtol: float = 1e-9) -> np.ndarray:
        x = np.asarray(x)
        rx = np.linalg.norm(x - np.asarray(self.center), axis=-1)
        rp = np.linalg.norm(np.asarray(p), axis=-1)
        span = max(1.0, abs(self.z_lo), abs(self.z_hi))
        return (
            (rx <= self.radius * (1 + rtol) + rtol)
            & (rp <= self.xi_radius * (1 + rtol) + rtol)
            & (np.asarray(z) >= self.z_lo - rtol * span)
            & (np.asarray(z) <= self.z_hi + rtol * span)
        )

    @classmethod
    def around(cls, nodes: NodeData, center, radius: float, pad: float = 0.0) -> "EvalBox":
        """Smallest box holding the solution data at the nodes inside the ball."""
        inside = np.linalg.norm(nodes.x - np.asarray(center), axis=-1) <= radius * (1 + 1e-9)
        z = nodes.z[inside]
        pr = np.linalg.norm(nodes.p[inside], axis=-1)
        return cls(tuple(center), radius, float(z.min()) - pad, float(z.max()) + pad, float(pr.max()) + pad)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """One instance of sigma_k^(1/k)(+-A_H[u]) = f(x, u, Du)."""

    n: int
    k: int
    box: Box
    f: ScalarFunction
    h: HModel
    sign_case: str = "positive"

    def __post_init__(self):
        if self.box.dim != self.n:
            raise DimensionError("box dimension differs from n")
        if not 2 <= self.k <= self.n:
            raise DimensionError(f"need 2 <= k <= n, got k={self.k}, n={self.n}")
        if self.sign_case not in SIGN_CASES:
            raise ConfigError(f"sign_case must be one of {SIGN_CASES}")

    @property
    def sign(self) -> float:
        return -1.0 if self.sign_case == "negative" else 1.0

    def positive_form(self) -> "ProblemSpec":
        """The equivalent problem for w = -u when the sign case is negative."""
        if self.sign_case != "negative":
            return self
        if isinstance(self.h, PositiveYamabe):
            h = NegativeYamabe(self.h.floor)
        elif isinstance(self.h, NegativeYamabe):
            h = PositiveYamabe(self.h.floor)
        else:
            h = _ReflectedH(self.h)
        return replace(self, f=Reflected.of(self.f), h=h, sign_case="positive")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "box": {"lo": list(self.box.lo), "hi": list(self.box.hi)},
            "sign_case": self.sign_case,
            "h_model": self.h.to_dict(),
            "f_model": self.f.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSpec":
        try:
            n, k = int(d["n"]), int(d["k"])
            box = Box(tuple(d["box"]["lo"]), tuple(d["box"]["hi"]))
            h = h_model_from_dict(d.get("h_model", {"variant": "Zero"}), n)
            f = function_from_dict(d["f_model"], n)
        except KeyError as exc:
            raise ConfigError(f"problem spec missing field {exc.args[0]!r}") from None
        return cls(n, k, box, f, h, d.get("sign_case", "positive"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ProblemSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


class _ReflectedH(HModel):
    """-H(x, -z, -xi): the tensor seen by w = -u when -A_H[u] = A_{H~}[w]."""

    variant = "Reflected"

    def __init__(self, inner: HModel):
        self.inner = inner
        self.scalar = None

    def H(self, x, z, p):
        return -self.inner.H(x, -np.asarray(z), -np.asarray(p))

    def dH_dx(self, x, z, p):
        return -self.inner.dH_dx(x, -np.asarray(z), -np.asarray(p))

    def dH_dz(self, x, z, p):
        return self.inner.dH_dz(x, -np.asarray(z), -np.asarray(p))

    def dH_dp(self, x, z, p):
        return self.inner.dH_dp(x, -np.asarray(z), -np.asarray(p))

    def d2H_dpp(self, x, z, p):
        return -self.inner.d2H_dpp(x, -np.asarray(z), -np.asarray(p))

    def to_dict(self):
        raise ConfigError("reflected H models are derived, not serialised")


# ------------------------------------------------------------------ fields


def h_field(u, spec: ProblemSpec) -> np.ndarray:
    nd = as_nodes(u)
    return spec.h.H(nd.x, nd.z, nd.p)


def a_h_field(u, spec: ProblemSpec, sigma_box: EvalBox | None = None) -> np.ndarray:
    """D^2 u - H(x, u, Du) at every node, shape ``(*grid, n, n)``."""
    nd = as_nodes(u)
    if nd.n != spec.n:
        raise DimensionError("field dimension differs from the problem's n")
    if sigma_box is not None and not np.all(sigma_box.contains(nd.x, nd.z, nd.p)):
        raise DomainError("solution data leaves the evaluation set")
    return nd.hess - spec.h.H(nd.x, nd.z, nd.p)


def oriented_a_h(u, spec: ProblemSpec) -> np.ndarray:
    """A_H with the sign case applied: the matrix that must lie in the cone."""
    return spec.sign * a_h_field(u, spec)


def f_field(u, spec: ProblemSpec) -> np.ndarray:
    nd = as_nodes(u)
    return spec.f.value(nd.x, nd.z, nd.p)


def residual_field(u, spec: ProblemSpec) -> np.ndarray:
    """sigma_k^(1/k)(A) - f at each node; NaN where A leaves the cone."""
    A = oriented_a_h(u, spec)
    return symfun.sigma_root(spec.k, A, strict=False) - f_field(u, spec)


class Admissibility(NamedTuple):
    admissible: np.ndarray
    margin: np.ndarray


def admissibility_map(u, spec: ProblemSpec) -> Admissibility:
    """Cone membership of the oriented augmented Hessian and its margin.

    The margin is min_j sign(sigma_j)|sigma_j|^(1/j) over j <= k.
    """
    A = oriented_a_h(u, spec)
    s = symfun.sigmas(A, spec.k)
    return Admissibility(np.all(s[..., 1:] > 0.0, axis=-1), symfun._margin_from_sigmas(s))


# --------------------------------------------------------------- constants


class C1Result(NamedTuple):
    c1: float
    argmax: tuple
    lap_min: float
    excess_max: float


def compute_c1(u, spec: ProblemSpec, region=None, rtol: float = 1e-12) -> C1Result:
    """Smallest C1 >= 0 with Lap w + C1 >= 1 and |D^2 w|_op <= Lap w + C1 on the region.

    ``w`` is the solution of the positive form (``-u`` in the negative case).
    """
    if spec.n < 3:
        raise DimensionError("C1 is defined for n >= 3")
    nd = as_nodes(u)
    if spec.sign_case == "negative":
        nd = nd.negated()
        sp_ = spec.positive_form()
    else:
        sp_ = spec
    mask = np.ones(nd.z.shape, bool) if region is None else np.asarray(region, bool)
    A = a_h_field(nd, sp_)[mask]
    if not np.all(symfun.in_gamma_k(2, A)):
        raise ConeViolation("augmented Hessian leaves Gamma_2 on the region; input not admissible")
    hess = nd.hess[mask]
    lap = np.trace(hess, axis1=-2, axis2=-1)
    op = np.abs(np.linalg.eigvalsh(hess)).max(axis=-1)
    need = np.maximum(np.maximum(1.0 - lap, op - lap), 0.0)
    i = int(np.argmax(need))
    c1 = float(need[i])
    scale = max(1.0, float(np.abs(lap).max()), float(op.max()))
    if not (np.all(lap + c1 >= 1.0 - rtol * scale) and np.all(op <= lap + c1 + rtol * scale)):
        raise ConeViolation("C1 verification failed")
    idx = tuple(int(v) for v in np.argwhere(mask)[i])
    return C1Result(c1, idx, float(lap.min()), float((op - lap).max()))


def _sample_sigma(sigma_box: EvalBox, points_per_axis: int, max_points: int, seed: int):
    n = sigma_box.n
    dim = 2 * n + 1
    if points_per_axis**dim <= max_points:
        t = np.linspace(-1.0, 1.0, points_per_axis)
        U = np.stack(np.meshgrid(*([t] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    else:
        sob = qmc.Sobol(dim, scramble=True, seed=seed)
        U = 2.0 * sob.random_base2(int(np.floor(np.log2(max_points)))) - 1.0
        U = np.vstack([np.zeros(dim), U])
    ux, uz, up = U[:, :n], U[:, n], U[:, n + 1 :]
    # project cube points onto the balls radially so the balls are filled
    def to_ball(V):
        r_inf = np.abs(V).max(axis=-1, keepdims=True)
        r2 = np.linalg.norm(V, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(r2 > 0, r_inf / r2, 0.0)
        return V * s

    x = np.asarray(sigma_box.center) + sigma_box.radius * to_ball(ux)
    z = sigma_box.z_lo + 0.5 * (uz + 1.0) * (sigma_box.z_hi - sigma_box.z_lo)
    p = sigma_box.xi_radius * to_ball(up)
    return x, z, p


class CSigmaResult(NamedTuple):
    c_sigma: float
    min_curvature: float
    samples: int
    varied: bool


def _min_curvature(model, x, z, p) -> np.ndarray:
    if isinstance(model, ScalarFunction):
        return np.linalg.eigvalsh(model.d2_pp(x, z, p))[..., 0]
    if model.scalar is not None:
        return np.linalg.eigvalsh(model.scalar.d2_pp(x, z, p))[..., 0]
    D = model.d2H_dpp(x, z, p)
    n = D.shape[-1]
    # M[(i,a),(j,b)] = d2 H_ij / dxi_a dxi_b; its smallest eigenvalue bounds the
    # biquadratic form v_i v_j w_a w_b from below
    M = np.moveaxis(D, -2, -3).reshape(D.shape[:-4] + (n * n, n * n))
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    return np.linalg.eigvalsh(M)[..., 0]


def compute_c_sigma(
    model: HModel | ScalarFunction,
    sigma_box: EvalBox,
    points_per_axis: int = 9,
    max_points: int = 20000,
    safety: float = 1.25,
    seed: int = 0,
) -> CSigmaResult:
    """C_Sigma = max(0, -min sampled xi-curvature / 2), so H + C|xi|^2 I is convex.

    Sampling uses 9 points per axis over (x, z, xi) when that grid has at
    most ``max_points`` points, else a scrambled Sobol set of that size plus
    the centre. ``safety`` multiplies the result only when the sampled
    curvature is not constant over the samples (a constant curvature is
    captured exactly by any sample).
    """
    if isinstance(model, Zero):
        return CSigmaResult(0.0, 0.0, 0, False)
    x, z, p = _sample_sigma(sigma_box, points_per_axis, max_points, seed)
    if not isinstance(model, ScalarFunction):
        try:
            model.check_domain(z)
        except DomainError as exc:
            raise DomainError(f"evaluation set leaves the model's domain: {exc}") from None
    curv = _min_curvature(model, x, z, p)
    if not np.all(np.isfinite(curv)):
        raise DomainError("curvature sampling produced non-finite values")
    lo = float(curv.min())
    varied = bool(np.ptp(curv) > 1e-12 * max(1.0, abs(lo)))
    c = max(0.0, -0.5 * lo)
    if varied:
        c *= safety
    return CSigmaResult(c, lo, int(len(curv)), varied)


def convexity_defect(
    model: HModel | ScalarFunction,
    sigma_box: EvalBox,
    c_sigma: float,
    n_pairs: int = 2000,
    seed: int = 0,
) -> float:
    """Smallest eigenvalue of H(xi) - H(zeta) - dH(zeta)(xi - zeta) + C|xi - zeta|^2 I.

    Over random (x, z) in the evaluation set and random xi, zeta in the
    xi-ball; nonnegative when ``c_sigma`` makes H + C|xi|^2 I convex.
    """
    rng = np.random.default_rng(seed)
    n = sigma_box.n

    def ball(m, r):
        v = rng.standard_normal((m, n))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        return r * v * rng.uniform(0, 1, (m, 1)) ** (1.0 / n)

    x = np.asarray(sigma_box.center) + ball(n_pairs, sigma_box.radius)
    z = rng.uniform(sigma_box.z_lo, sigma_box.z_hi, n_pairs)
    xi = ball(n_pairs, sigma_box.xi_radius)
    ze = ball(n_pairs, sigma_box.xi_radius)
    d = xi - ze
    if isinstance(model, ScalarFunction):
        gap = model.value(x, z, xi) - model.value(x, z, ze) - np.sum(model.d_p(x, z, ze) * d, axis=-1)
        return float(np.min(gap + c_sigma * np.sum(d * d, axis=-1)))
    M = (
        model.H(x, z, xi)
        - model.H(x, z, ze)
        - np.einsum("...ija,...a->...ij", model.dH_dp(x, z, ze), d)
        + _eye_times(c_sigma * np.sum(d * d, axis=-1), n)
    )
    return float(np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, -1, -2)))[..., 0].min())


# ---------------------------------------------------------- sign transform


def reflect(u: ScalarField, f: ScalarFunction | None = None):
    """(-u, f(x, -z, -xi)); an involution."""
    w = u.with_values(-u.values)
    return w if f is None else (w, Reflected.of(f))


def negative_to_positive(u: ScalarField, f: ScalarFunction):
    """w = -u and f~(x, z, xi) = f(x, -z, -xi) for a positive solution u."""
    if not np.all(u.values > 0.0):
        raise DomainError("negative_to_positive requires u > 0 at every node")
    return reflect(u, f)


def positive_to_negative(w: ScalarField, f: ScalarFunction):
    """Inverse of :func:`negative_to_positive`; requires w < 0."""
    if not np.all(w.values < 0.0):
        raise DomainError("positive_to_negative requires w < 0 at every node")
    return reflect(w, f)


def positive_nodes(u, spec: ProblemSpec) -> tuple[NodeData, ProblemSpec]:
    """Node data and problem in positive form (negated in the negative case)."""
    nd = as_nodes(u)
    if spec.sign_case == "negative":
        return nd.negated(), spec.positive_form()
    return nd, spec


__all__ = [
    "NodeData",
    "AnalyticField",
    "stencil_nodes",
    "analytic_nodes",
    "as_nodes",
    "HModel",
    "Zero",
    "PositiveYamabe",
    "NegativeYamabe",
    "ScalarQuadratic",
    "ScalarGeneral",
    "GeneralMatrix",
    "h_model_from_dict",
    "EvalBox",
    "ProblemSpec",
    "h_field",
    "a_h_field",
    "oriented_a_h",
    "f_field",
    "residual_field",
    "admissibility_map",
    "compute_c1",
    "compute_c_sigma",
    "convexity_defect",
    "reflect",
    "negative_to_positive",
    "positive_to_negative",
    "positive_nodes",
    "CallableFunction",
    "ExprFunction",
]
