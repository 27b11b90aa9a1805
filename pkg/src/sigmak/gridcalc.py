"""Scalar fields on uniform tensor grids, difference quotients, stencils, quadrature.

Grid conventions: a field over an ``n``-dimensional box stores its node
values in an array of shape ``points_per_axis`` (``ij`` indexing). Axes are
numbered from 0. Difference-quotient increments must be integer multiples
of the grid spacing on their axis so every quotient lands on nodes.

Quotients are returned on an interior sub-grid: ``margin`` nodes are dropped
from both ends of every axis. By default the margin is the smallest one that
keeps every node at distance >= |h| from the boundary on all axes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, GridError
from .reports import observed_orders

MIN_POINTS = 5


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or not lo:
            raise DimensionError("lo and hi must be nonempty and of equal length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise GridError("box requires lo < hi on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, n: int, a: float, b: float) -> "Box":
        return cls((a,) * n, (b,) * n)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

    @property
    def volume(self) -> float:
        return float(np.prod(np.array(self.hi) - np.array(self.lo)))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Node values of a scalar function on a uniform grid over ``box``.

    The value array is copied and made read-only.
    """

    box: Box
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != self.box.dim:
            raise DimensionError(f"values have {v.ndim} axes but the box has {self.box.dim}")
        if any(s < 2 for s in v.shape):
            raise GridError("every axis needs at least 2 nodes")
        if not np.all(np.isfinite(v)):
            raise GridError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, box: Box, points: int | Sequence[int], fn: Callable) -> "ScalarField":
        """Sample ``fn(x)`` where ``x`` has shape ``(*points, n)``."""
        shape = _shape(box, points)
        if any(s < MIN_POINTS for s in shape):
            raise GridError(f"need at least {MIN_POINTS} points per axis")
        X = grid_coords(box, shape)
        vals = np.broadcast_to(np.asarray(fn(X), dtype=float), shape)
        return cls(box, vals)

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.box.hi) - np.array(self.box.lo)) / (np.array(self.shape) - 1)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, s) for a, b, s in zip(self.box.lo, self.box.hi, self.shape)]

    def coords(self) -> np.ndarray:
        return grid_coords(self.box, self.shape)

    def with_values(self, values) -> "ScalarField":
        return ScalarField(self.box, np.asarray(values, dtype=float).reshape(self.shape))

    def crop(self, margin: Sequence[int]) -> "ScalarField":
        margin = _margin_tuple(margin, self.dim)
        return ScalarField(_sub_box(self, margin), self.values[_window(self.shape, margin)])

    def same_grid(self, other: "ScalarField") -> bool:
        return self.shape == other.shape and self.box == other.box


def _shape(box: Box, points) -> tuple:
    if np.isscalar(points):
        return (int(points),) * box.dim
    shape = tuple(int(p) for p in points)
    if len(shape) != box.dim:
        raise DimensionError("points_per_axis length must equal box dimension")
    return shape


def grid_coords(box: Box, shape: Sequence[int]) -> np.ndarray:
    axes = [np.linspace(a, b, s) for a, b, s in zip(box.lo, box.hi, shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _margin_tuple(margin, n) -> tuple:
    if np.isscalar(margin):
        return (int(margin),) * n
    margin = tuple(int(m) for m in margin)
    if len(margin) != n:
        raise DimensionError("margin length must equal dimension")
    return margin


def _window(shape, margin, axis: int | None = None, shift: int = 0) -> tuple:
    sl = []
    for a, (s, m) in enumerate(zip(shape, margin)):
        d = shift if a == axis else 0
        if s - 2 * m < 1:
            raise GridError("interior region is empty")
        sl.append(slice(m + d, s - m + d))
    return tuple(sl)


def _sub_box(u: ScalarField, margin) -> Box:
    dx = u.spacing
    lo = [a + m * d for a, m, d in zip(u.box.lo, margin, dx)]
    hi = [b - m * d for b, m, d in zip(u.box.hi, margin, dx)]
    if any(l >= h for l, h in zip(lo, hi)):
        raise GridError("interior region is too thin")
    return Box(tuple(lo), tuple(hi))


@dataclass(frozen=True)
class Increment:
    """Difference-quotient increment ``h`` along ``axis`` (0-based)."""

    axis: int
    h: float

    def __post_init__(self):
        if self.h == 0.0 or not math.isfinite(self.h):
            raise GridError("increment must be finite and nonzero")

    def nodes(self, u: ScalarField) -> int:
        """Signed node offset of this increment on ``u``'s grid."""
        if not 0 <= self.axis < u.dim:
            raise DimensionError(f"axis {self.axis} outside 0..{u.dim - 1}")
        return grid_offset(self.h, u.spacing[self.axis])


def grid_offset(h: float, dx: float) -> int:
    ratio = h / dx
    m = int(round(ratio))
    if m == 0 or abs(ratio - m) > 1e-9 * max(1.0, abs(ratio)):
        raise GridError(f"increment {h} is not a nonzero multiple of spacing {dx}")
    return m


def interior_margin(u: ScalarField, h: float) -> tuple:
    """Per-axis node margin of the region at distance >= |h| from the boundary."""
    return tuple(int(math.ceil(abs(h) / d - 1e-9)) for d in u.spacing)


def _resolve_margin(u: ScalarField, h: float, margin, need: int, axis: int) -> tuple:
    margin = interior_margin(u, h) if margin is None else _margin_tuple(margin, u.dim)
    if margin[axis] < need:
        raise GridError(f"region margin {margin[axis]} on axis {axis} is below |h| = {need} nodes")
    return margin


def shifted(u: ScalarField, axis: int, m: int, margin) -> np.ndarray:
    """Values of ``u(x + m dx e_axis)`` at the nodes of the margin-cropped grid."""
    return u.values[_window(u.shape, margin, axis, m)]


def fdq(u: ScalarField, inc: Increment, margin=None) -> ScalarField:
    """First difference quotient (u(x + h e_l) - u(x)) / h on the interior grid."""
    m = inc.nodes(u)
    margin = _resolve_margin(u, inc.h, margin, abs(m), inc.axis)
    h = m * u.spacing[inc.axis]
    vals = (shifted(u, inc.axis, m, margin) - shifted(u, inc.axis, 0, margin)) / h
    return ScalarField(_sub_box(u, margin), vals)


def sdq(u: ScalarField, inc: Increment, margin=None) -> ScalarField:
    """Second difference quotient (u(x+h) - 2u(x) + u(x-h)) / h^2 on the interior grid."""
    m = inc.nodes(u)
    margin = _resolve_margin(u, inc.h, margin, abs(m), inc.axis)
    h = m * u.spacing[inc.axis]
    vals = (
        shifted(u, inc.axis, m, margin) - 2.0 * shifted(u, inc.axis, 0, margin) + shifted(u, inc.axis, -m, margin)
    ) / (h * h)
    return ScalarField(_sub_box(u, margin), vals)


def v_h(u: ScalarField, h: float, margin=None) -> ScalarField:
    """Sum over all axes of the second difference quotients with increment h."""
    if margin is None:
        margin = interior_margin(u, h)
    total = None
    for axis in range(u.dim):
        q = sdq(u, Increment(axis, h), margin).values
        total = q if total is None else total + q
    return ScalarField(_sub_box(u, _margin_tuple(margin, u.dim)), total)


def dq_product_rule_check(u: ScalarField, w: ScalarField, inc: Increment, margin=None) -> float:
    """max |grad^h(uw) - u(x+h) grad^h w - w grad^h u| over the interior grid."""
    if not u.same_grid(w):
        raise GridError("fields live on different grids")
    m = inc.nodes(u)
    margin = _resolve_margin(u, inc.h, margin, abs(m), inc.axis)
    uw = u.with_values(u.values * w.values)
    lhs = fdq(uw, inc, margin).values
    u_shift = shifted(u, inc.axis, m, margin)
    w0 = shifted(w, inc.axis, 0, margin)
    rhs = u_shift * fdq(w, inc, margin).values + w0 * fdq(u, inc, margin).values
    return float(np.max(np.abs(lhs - rhs)))


# ------------------------------------------------------------------ stencils


def gradient(u: ScalarField) -> np.ndarray:
    """Second-order gradient, shape ``(*shape, n)``: central inside, one-sided at edges."""
    _need_points(u)
    g = np.gradient(u.values, *u.spacing, edge_order=2)
    if u.dim == 1:
        g = [g]
    return np.stack(g, axis=-1)


def _second_along(v: np.ndarray, axis: int, dx: float) -> np.ndarray:
    out = np.empty_like(v)
    mv = np.moveaxis(v, axis, 0)
    mo = np.moveaxis(out, axis, 0)
    mo[1:-1] = (mv[2:] - 2.0 * mv[1:-1] + mv[:-2]) / dx**2
    mo[0] = (2.0 * mv[0] - 5.0 * mv[1] + 4.0 * mv[2] - mv[3]) / dx**2
    mo[-1] = (2.0 * mv[-1] - 5.0 * mv[-2] + 4.0 * mv[-3] - mv[-4]) / dx**2
    return out


def hessian(u: ScalarField) -> np.ndarray:
    """Second-order Hessian, shape ``(*shape, n, n)``, symmetric by construction.

    Pure second derivatives use the compact [1, -2, 1] stencil (one-sided
    four-point at edges); mixed ones nest the central first-derivative stencil.
    """
    _need_points(u)
    n = u.dim
    dx = u.spacing
    Hs = np.empty(u.shape + (n, n))
    first = [np.gradient(u.values, dx[a], axis=a, edge_order=2) for a in range(n)]
    for a in range(n):
        Hs[..., a, a] = _second_along(u.values, a, dx[a])
        for b in range(a + 1, n):
            dab = np.gradient(first[a], dx[b], axis=b, edge_order=2)
            dba = np.gradient(first[b], dx[a], axis=a, edge_order=2)
            Hs[..., a, b] = Hs[..., b, a] = 0.5 * (dab + dba)
    return Hs


def divergence(vec: np.ndarray, u: ScalarField) -> np.ndarray:
    """Divergence of a vector field sampled on ``u``'s grid, same stencils as ``gradient``."""
    _need_points(u)
    out = np.zeros(u.shape)
    for a in range(u.dim):
        out += np.gradient(vec[..., a], u.spacing[a], axis=a, edge_order=2)
    return out


def _need_points(u: ScalarField):
    if any(s < MIN_POINTS for s in u.shape):
        raise GridError(f"stencils need at least {MIN_POINTS} points per axis")


# ---------------------------------------------------------------- quadrature


def trapezoid_weights(u: ScalarField) -> np.ndarray:
    w = np.ones(())
    for s, d in zip(u.shape, u.spacing):
        w1 = np.full(s, d)
        w1[0] = w1[-1] = 0.5 * d
        w = np.multiply.outer(w, w1)
    return w


def ball_mask(u: ScalarField, center, radius: float) -> np.ndarray:
    """Nodes within ``radius`` of ``center``.

    The radius is snapped to the nearest half-cell (half the smallest
    spacing), and the comparison carries a 1e-9 relative slack, so nodes at
    the nominal radius are always included and masks are reproducible.
    """
    half = 0.5 * float(np.min(u.spacing))
    r = round(radius / half) * half
    d2 = np.sum((u.coords() - np.asarray(center, dtype=float)) ** 2, axis=-1)
    return d2 <= (r * r) * (1.0 + 1e-9) + 1e-300


def integrate(u: ScalarField, region=None) -> float:
    w = trapezoid_weights(u)
    if region is not None:
        w = np.where(region, w, 0.0)
    return float(np.sum(w * u.values))


def lp_norm(u: ScalarField, s: float, region=None) -> float:
    """Trapezoid L^s norm over the node mask ``region`` (all nodes when None)."""
    if not s >= 1.0:
        raise ValueError("L^s norms need s >= 1")
    a = np.abs(u.values)
    if math.isinf(s):
        return float(a[region].max() if region is not None else a.max())
    w = trapezoid_weights(u)
    if region is not None:
        w = np.where(region, w, 0.0)
    top = a.max()
    if top == 0.0:
        return 0.0
    # scale out the max so high powers cannot overflow
    return float(top * np.sum(w * (a / top) ** s) ** (1.0 / s))


def region_volume(u: ScalarField, region=None) -> float:
    return integrate(u.with_values(np.ones(u.shape)), region)


def quadrature_error(u: ScalarField, s: float = 1.0, region=None) -> float:
    """Richardson estimate of the trapezoid error in ``lp_norm(u, s, region)``.

    Compares against the rule on every second node; axes with an even node
    count fall back to dropping their last node for the coarse rule.
    """
    if math.isinf(s):
        return 0.0
    fine = lp_norm(u, s, region)
    sl = tuple(slice(0, (n - 1) // 2 * 2 + 1, 2) for n in u.shape)
    sub_box_hi = [
        lo + ((n - 1) // 2 * 2) * d for lo, n, d in zip(u.box.lo, u.shape, u.spacing)
    ]
    if any(((n - 1) // 2 + 1) < 2 for n in u.shape):
        return abs(fine)
    coarse_u = ScalarField(Box(u.box.lo, tuple(sub_box_hi)), u.values[sl])
    coarse_r = None if region is None else np.asarray(region)[sl]
    coarse = lp_norm(coarse_u, s, coarse_r)
    if any(n % 2 == 0 for n in u.shape):
        trimmed = tuple(slice(0, (n - 1) // 2 * 2 + 1) for n in u.shape)
        fine_t = lp_norm(
            ScalarField(Box(u.box.lo, tuple(sub_box_hi)), u.values[trimmed]),
            s,
            None if region is None else np.asarray(region)[trimmed],
        )
        return abs(fine_t - coarse) / 3.0
    return abs(fine - coarse) / 3.0


class DqNormBound(NamedTuple):
    lhs: float
    rhs: float
    tol: float


def dq_norm_bound_check(
    u: ScalarField,
    inc: Increment,
    s: float,
    grad: Callable | None = None,
    same_region: bool = False,
) -> DqNormBound:
    """Both sides of ||grad_l^h u||_{L^s(interior)} <= ||d_l u||_{L^s(box)}.

    ``grad`` is an analytic gradient ``x -> (..., n)``; the stencil gradient
    is used when omitted. With ``same_region`` the right side is taken over
    the interior region too. ``tol`` is five times the Richardson
    quadrature-error estimate of both norms.
    """
    q = fdq(u, inc)
    lhs = lp_norm(q, s)
    if grad is not None:
        dl = np.asarray(grad(u.coords()))[..., inc.axis]
    else:
        dl = gradient(u)[..., inc.axis]
    d = u.with_values(dl)
    if same_region:
        d = d.crop(interior_margin(u, inc.h))
    rhs = lp_norm(d, s)
    tol = 5.0 * (quadrature_error(q, s) + quadrature_error(d, s))
    return DqNormBound(lhs, rhs, tol)


@dataclass
class RateTable:
    steps: list
    errors: list
    bounds: list
    orders: list
    s: float

    def rows(self) -> list[dict]:
        out = []
        for i, (h, e) in enumerate(zip(self.steps, self.errors)):
            row = {"h": h, "error": e}
            if self.bounds:
                row["modulus_bound"] = self.bounds[i]
            row["order"] = self.orders[i - 1] if i > 0 else float("nan")
            out.append(row)
        return out


def vh_convergence(
    u: ScalarField,
    laplacian: Callable,
    multiples: Sequence[int],
    s: float = 2.0,
    hess_diag: Callable | None = None,
    n_t: int = 8,
    floor: float = 1e-13,
) -> RateTable:
    """||v_h - Lap u||_{L^s} for h = m * spacing, m in ``multiples`` (decreasing h).

    Errors are measured on one common interior region so the rows are
    comparable. With ``hess_diag`` (``x -> (..., n)`` diagonal of the
    Hessian) each row also carries the Taylor modulus bound
    sum_l sum_pm int_0^1 ||d_ll u(. pm t h e_l) - d_ll u||_{L^s} dt,
    with the t-integral done by Gauss-Legendre on ``n_t`` points.
    """
    dx = u.spacing
    if not np.allclose(dx, dx[0], rtol=1e-12):
        raise GridError("vh_convergence needs equal spacing on every axis")
    steps = [float(m) * dx[0] for m in multiples]
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise GridError("h-sequence must be decreasing")
    margin = interior_margin(u, max(abs(h) for h in steps))
    region = u.crop(margin)
    X = region.coords()
    ref = np.asarray(laplacian(X), dtype=float)
    errors, bounds = [], []
    if hess_diag is not None:
        tn, tw = np.polynomial.legendre.leggauss(n_t)
        tn, tw = 0.5 * (tn + 1.0), 0.5 * tw
        base = np.asarray(hess_diag(X))
    for h in steps:
        vh = v_h(u, h, margin).values
        errors.append(lp_norm(region.with_values(vh - ref), s))
        if hess_diag is not None:
            total = 0.0
            for l in range(u.dim):
                for sign in (1.0, -1.0):
                    acc = 0.0
                    for t, w in zip(tn, tw):
                        Y = X.copy()
                        Y[..., l] += sign * t * h
                        diff = np.asarray(hess_diag(Y))[..., l] - base[..., l]
                        acc += w * lp_norm(region.with_values(diff), s)
                    total += acc
            bounds.append(total)
    return RateTable(steps, errors, bounds, observed_orders(steps, errors, floor), s)


# ---------------------------------------------------------------------- I/O


def write_field(u: ScalarField, path: str | Path, provenance: str = "") -> tuple[Path, Path]:
    """Write ``path`` (CSV) and ``path`` with a ``.json`` suffix (metadata)."""
    path = Path(path)
    header = [str(s) for s in u.shape]
    for a, b in zip(u.box.lo, u.box.hi):
        header += [repr(a), repr(b)]
    lines = [",".join(header)]
    lines += [repr(float(v)) for v in u.values.ravel(order="C")]
    path.write_text("\n".join(lines) + "\n")
    meta = {
        "dim": u.dim,
        "sizes": list(u.shape),
        "lo": list(u.box.lo),
        "hi": list(u.box.hi),
        "spacing": [float(d) for d in u.spacing],
        "provenance": provenance,
    }
    side = path.with_suffix(".json")
    side.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return path, side


def read_field(path: str | Path) -> ScalarField:
    path = Path(path)
    lines = path.read_text().split()
    header = [float(v) for v in lines[0].split(",")]
    if len(header) % 3:
        raise GridError(f"{path}: malformed header")
    n = len(header) // 3
    shape = tuple(int(v) for v in header[:n])
    bounds = header[n:]
    box = Box(tuple(bounds[0::2]), tuple(bounds[1::2]))
    vals = np.array([float(v) for v in lines[1:]])
    if vals.size != int(np.prod(shape)):
        raise GridError(f"{path}: expected {int(np.prod(shape))} values, found {vals.size}")
    return ScalarField(box, vals.reshape(shape))
