"""Scalar functions of (x, z, xi) with first derivatives and the xi-Hessian.

User expressions are arithmetic strings over ``x1..xn``, ``z`` and
``xi1..xin``. Grammar (checked on the Python AST before sympy sees it):

* numbers, ``+ - * / **`` and unary ``+ -``, parentheses
* names ``z``, ``x1``..``xn``, ``xi1``..``xin``, ``pi``
* one-argument calls to ``exp log sin cos tan sqrt tanh abs``

Derivatives of expressions are exact (sympy). Plain callables get central
finite differences with step ``1e-5 * max(1, |arg|)`` unless derivative
callables are supplied.
"""

from __future__ import annotations

import ast
from typing import Callable

import numpy as np
import sympy as sp

from .errors import ConfigError

FUNCTIONS = {
    "exp": sp.exp,
    "log": sp.log,
    "sin": sp.sin,
    "cos": sp.cos,
    "tan": sp.tan,
    "sqrt": sp.sqrt,
    "tanh": sp.tanh,
    "abs": sp.Abs,
}
_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_UNARY = (ast.UAdd, ast.USub)


def _validate(text: str, names: set[str]) -> None:
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {text!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Load)) or isinstance(node, _BINOPS + _UNARY):
            continue
        if isinstance(node, ast.BinOp):
            if not isinstance(node.op, _BINOPS):
                raise ConfigError(f"operator {type(node.op).__name__} not allowed in {text!r}")
            continue
        if isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, _UNARY):
                raise ConfigError(f"operator {type(node.op).__name__} not allowed in {text!r}")
            continue
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ConfigError(f"constant {node.value!r} not allowed in {text!r}")
            continue
        if isinstance(node, ast.Name):
            if node.id not in names and node.id not in FUNCTIONS:
                raise ConfigError(f"unknown name {node.id!r} in {text!r}")
            continue
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                raise ConfigError(f"call not allowed in {text!r}")
            if len(node.args) != 1 or node.keywords:
                raise ConfigError(f"{node.func.id} takes exactly one argument in {text!r}")
            continue
        raise ConfigError(f"syntax element {type(node).__name__} not allowed in {text!r}")


class ScalarFunction:
    """Interface: value and derivatives, all vectorised over leading axes.

    ``x`` and ``p`` have shape ``(..., n)``, ``z`` has shape ``(...)``.
    """

    n: int

    def value(self, x, z, p) -> np.ndarray:
        raise NotImplementedError

    def d_x(self, x, z, p) -> np.ndarray:
        raise NotImplementedError

    def d_z(self, x, z, p) -> np.ndarray:
        raise NotImplementedError

    def d_p(self, x, z, p) -> np.ndarray:
        raise NotImplementedError

    def d2_pp(self, x, z, p) -> np.ndarray:
        raise NotImplementedError

    depends_on_p: bool = True

    def to_dict(self) -> dict:
        raise ConfigError(f"{type(self).__name__} is not serialisable")


def _lead(x, z, p):
    return np.broadcast_shapes(np.shape(x)[:-1], np.shape(z), np.shape(p)[:-1])


class ExprFunction(ScalarFunction):
    """A scalar function given by an expression string (see module grammar)."""

    def __init__(self, text: str, n: int):
        self.text = str(text)
        self.n = int(n)
        xs = sp.symbols(f"x1:{n + 1}", real=True)
        ps = sp.symbols(f"xi1:{n + 1}", real=True)
        zs = sp.Symbol("z", real=True)
        names = {str(s) for s in xs} | {str(s) for s in ps} | {"z", "pi"}
        _validate(self.text, names)
        local = {str(s): s for s in (*xs, *ps, zs)}
        local.update(FUNCTIONS)
        local["pi"] = sp.pi
        self.expr = sp.parse_expr(self.text.replace("^", "**"), local_dict=local, evaluate=True)
        self._xs, self._ps, self._z = xs, ps, zs
        self._args = (*xs, zs, *ps)
        self.depends_on_p = any(s in self.expr.free_symbols for s in ps)
        self._cache: dict = {}

    def _fn(self, key, builder):
        if key not in self._cache:
            self._cache[key] = sp.lambdify(self._args, builder(), modules="numpy")
        return self._cache[key]

    def _call(self, fn, x, z, p):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        z = np.asarray(z, dtype=float)
        shape = _lead(x, z, p)
        args = [x[..., i] for i in range(self.n)] + [z] + [p[..., i] for i in range(self.n)]
        return np.broadcast_to(np.asarray(fn(*args), dtype=float), shape)

    def value(self, x, z, p):
        return self._call(self._fn("v", lambda: self.expr), x, z, p).copy()

    def d_x(self, x, z, p):
        return np.stack(
            [self._call(self._fn(("x", i), lambda i=i: sp.diff(self.expr, self._xs[i])), x, z, p) for i in range(self.n)],
            axis=-1,
        )

    def d_z(self, x, z, p):
        return self._call(self._fn("z", lambda: sp.diff(self.expr, self._z)), x, z, p).copy()

    def d_p(self, x, z, p):
        return np.stack(
            [self._call(self._fn(("p", i), lambda i=i: sp.diff(self.expr, self._ps[i])), x, z, p) for i in range(self.n)],
            axis=-1,
        )

    def d2_pp(self, x, z, p):
        rows = []
        for i in range(self.n):
            row = []
            for j in range(self.n):
                a, b = min(i, j), max(i, j)
                fn = self._fn(("pp", a, b), lambda a=a, b=b: sp.diff(self.expr, self._ps[a], self._ps[b]))
                row.append(self._call(fn, x, z, p))
            rows.append(np.stack(row, axis=-1))
        return np.stack(rows, axis=-2)

    def to_dict(self) -> dict:
        return {"expression": self.text}

    def __repr__(self) -> str:
        return f"ExprFunction({self.text!r}, n={self.n})"


def _fd_step(v):
    return 1e-5 * np.maximum(1.0, np.abs(v))


class CallableFunction(ScalarFunction):
    """Wraps ``fn(x, z, p)``; missing derivatives use central differences."""

    def __init__(
        self,
        fn: Callable,
        n: int,
        d_x: Callable | None = None,
        d_z: Callable | None = None,
        d_p: Callable | None = None,
        d2_pp: Callable | None = None,
        depends_on_p: bool = True,
    ):
        self.fn = fn
        self.n = int(n)
        self._dx, self._dz, self._dp, self._dpp = d_x, d_z, d_p, d2_pp
        self.depends_on_p = depends_on_p

    def _v(self, x, z, p):
        return np.broadcast_to(np.asarray(self.fn(x, z, p), dtype=float), _lead(x, z, p))

    def value(self, x, z, p):
        return self._v(x, z, p).copy()

    def d_x(self, x, z, p):
        if self._dx is not None:
            return np.asarray(self._dx(x, z, p), dtype=float)
        x = np.asarray(x, dtype=float)
        out = []
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = 1.0
            h = _fd_step(x[..., i])[..., None]
            out.append((self._v(x + h * e, z, p) - self._v(x - h * e, z, p)) / (2.0 * h[..., 0]))
        return np.stack(out, axis=-1)

    def d_z(self, x, z, p):
        if self._dz is not None:
            return np.asarray(self._dz(x, z, p), dtype=float)
        z = np.asarray(z, dtype=float)
        h = _fd_step(z)
        return (self._v(x, z + h, p) - self._v(x, z - h, p)) / (2.0 * h)

    def d_p(self, x, z, p):
        if self._dp is not None:
            return np.asarray(self._dp(x, z, p), dtype=float)
        p = np.asarray(p, dtype=float)
        out = []
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = 1.0
            h = _fd_step(p[..., i])[..., None]
            out.append((self._v(x, z, p + h * e) - self._v(x, z, p - h * e)) / (2.0 * h[..., 0]))
        return np.stack(out, axis=-1)

    def d2_pp(self, x, z, p):
        if self._dpp is not None:
            return np.asarray(self._dpp(x, z, p), dtype=float)
        p = np.asarray(p, dtype=float)
        cols = []
        for j in range(self.n):
            e = np.zeros(self.n)
            e[j] = 1.0
            h = 1e2 * _fd_step(p[..., j])[..., None]
            cols.append((self.d_p(x, z, p + h * e) - self.d_p(x, z, p - h * e)) / (2.0 * h))
        H = np.stack(cols, axis=-1)
        return 0.5 * (H + np.swapaxes(H, -1, -2))


class Reflected(ScalarFunction):
    """g(x, z, p) = f(x, -z, -p). Reflecting twice returns the original object."""

    def __init__(self, inner: ScalarFunction):
        self.inner = inner
        self.n = inner.n
        self.depends_on_p = inner.depends_on_p

    @staticmethod
    def of(f: ScalarFunction) -> ScalarFunction:
        return f.inner if isinstance(f, Reflected) else Reflected(f)

    def value(self, x, z, p):
        return self.inner.value(x, -np.asarray(z), -np.asarray(p))

    def d_x(self, x, z, p):
        return self.inner.d_x(x, -np.asarray(z), -np.asarray(p))

    def d_z(self, x, z, p):
        return -self.inner.d_z(x, -np.asarray(z), -np.asarray(p))

    def d_p(self, x, z, p):
        return -self.inner.d_p(x, -np.asarray(z), -np.asarray(p))

    def d2_pp(self, x, z, p):
        return self.inner.d2_pp(x, -np.asarray(z), -np.asarray(p))

    def to_dict(self) -> dict:
        return {"reflected": self.inner.to_dict()}


def function_from_dict(d: dict, n: int) -> ScalarFunction:
    if "expression" in d:
        return ExprFunction(d["expression"], n)
    if "reflected" in d:
        return Reflected(function_from_dict(d["reflected"], n))
    if d.get("builtin") == "constant":
        return ExprFunction(repr(float(d.get("params", {}).get("value", 1.0))), n)
    raise ConfigError(f"unrecognised function description {d!r}")
