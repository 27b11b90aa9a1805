"""Named checks, suite configuration and run reports for the command line.

A suite config is one JSON document::

    {
      "problem": {"manufactured": "bubble-positive", "n": 3, "k": 2},
      "grid": 17,
      "checks": ["concavity_dq_check", {"name": "reverse_holder_probe", "q": 6}],
      "output": "out",
      "seed": 0
    }

``problem`` may instead hold ``"spec"`` (a ProblemSpec dictionary) or
``"spec_path"``, plus ``"field"`` (an expression in x1..xn) or
``"field_path"`` (a gridcalc CSV). Relative paths resolve against the config
file's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, _kernels, symfun
from .augmented import AnalyticField, ProblemSpec, admissibility_map
from .divstruct import bilinear_bound_check, rotation_field, verify_div_f, weak_identity_check
from .errors import ConfigError, SigmakError
from .estimates import (
    EstimateConfig,
    bochner_identity_check,
    cancellation_identity_checks,
    cancellation_residuals,
    concavity_dq_check,
    default_case,
    estimate_probe_I123,
    f_xi_extension_check,
    i1_pointwise_bound,
    moser_schedule,
    p_threshold,
    reverse_holder_probe,
    sup_norm_chain,
)
from .expr import ExprFunction
from .gridcalc import Box, ScalarField, read_field, vh_convergence
from .reports import CheckReport, observed_orders
from .solver import ManufacturedSolution, manufactured, mms_convergence

DEFAULT_CHECKS = (
    "admissibility",
    "cancellation_identity_checks",
    "concavity_dq_check",
    "i1_pointwise_bound",
    "bochner_identity_check",
    "verify_div_f",
    "vh_convergence",
    "reverse_holder_probe",
)


@dataclass
class Context:
    spec: ProblemSpec
    grid: int
    seed: int = 0
    ms: ManufacturedSolution | None = None
    analytic: AnalyticField | None = None
    stored: ScalarField | None = None

    @property
    def u(self) -> ScalarField:
        if self.stored is not None:
            return self.stored
        if self.analytic is None:
            raise ConfigError("no solution field configured")
        return self.analytic.sample(self.spec.box, self.grid)

    def need_analytic(self, name: str) -> AnalyticField:
        if self.analytic is None:
            raise ConfigError(f"{name} needs an analytic field (manufactured problem or 'field' expression)")
        return self.analytic

    def with_grid(self, grid: int) -> "Context":
        if self.stored is not None:
            raise ConfigError("cannot change the grid of a stored field")
        return replace(self, grid=int(grid))


# ------------------------------------------------------------------ config


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg["_base"] = str(path.resolve().parent)
    return cfg


def build_context(cfg: dict) -> Context:
    base = Path(cfg.get("_base", "."))
    prob = cfg.get("problem")
    if not isinstance(prob, dict):
        raise ConfigError("config needs a 'problem' object")
    grid = int(cfg.get("grid", 17))
    seed = int(cfg.get("seed", 0))
    ms = None
    if "manufactured" in prob:
        n, k = int(prob.get("n", 3)), int(prob.get("k", 2))
        box = _box(prob.get("box"))
        ms = manufactured(prob["manufactured"], n, k, box)
        spec, analytic = ms.spec, ms.field
    elif "spec" in prob or "spec_path" in prob:
        if "spec" in prob:
            spec = ProblemSpec.from_dict(prob["spec"])
        else:
            spec = ProblemSpec.load(_resolve(base, prob["spec_path"]))
        analytic = None
    else:
        raise ConfigError("problem needs 'manufactured', 'spec' or 'spec_path'")
    stored = None
    if "field" in prob:
        analytic = AnalyticField.from_expression(str(prob["field"]), spec.n)
    if "field_path" in prob:
        p = _resolve(base, prob["field_path"])
        if not p.exists():
            raise ConfigError(f"field file {p} not found")
        stored = read_field(p)
        if stored.box != spec.box:
            raise ConfigError("stored field lives on a different box than the problem")
    return Context(spec, grid, seed, ms, analytic, stored)


def _box(d) -> Box | None:
    if d is None:
        return None
    try:
        return Box(tuple(d["lo"]), tuple(d["hi"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"box needs 'lo' and 'hi' lists: {exc}") from None


def check_entries(cfg: dict) -> list[tuple[str, dict]]:
    raw = cfg.get("checks", list(DEFAULT_CHECKS))
    if not isinstance(raw, list):
        raise ConfigError("'checks' must be a list")
    out = []
    for item in raw:
        if isinstance(item, str):
            name, opts = item, {}
        elif isinstance(item, dict) and "name" in item:
            name = item["name"]
            opts = {k: v for k, v in item.items() if k != "name"}
        else:
            raise ConfigError(f"malformed check entry {item!r}")
        if name not in RUNNERS:
            raise ConfigError(f"unknown check {name!r}")
        out.append((name, opts))
    return out


# ------------------------------------------------------------------ runners


def estimate_config(ctx: Context, opts: dict) -> EstimateConfig:
    box = ctx.spec.box
    half = 0.5 * float(min(np.array(box.hi) - np.array(box.lo)))
    R = float(opts.get("R", 0.45 * half))
    rho = float(opts.get("rho", R / 3))
    dx = float((np.array(box.hi) - np.array(box.lo)).max() / (ctx.u.shape[0] - 1))
    h = float(opts.get("h", dx))
    return EstimateConfig(R=R, rho=rho, q=float(opts.get("q", 4.0)), h=h, delta=float(opts.get("delta", 0.0)))


def _with_metric(rep: CheckReport, value) -> CheckReport:
    rep.details["metric"] = value
    return rep


def run_admissibility(ctx: Context, opts: dict) -> CheckReport:
    u = ctx.u
    adm = admissibility_map(u, ctx.spec)
    inner = tuple(slice(1, s - 1) for s in u.shape)
    a = adm.admissible[inner]
    m = float(np.min(adm.margin[inner]))
    bad = int(a.size - a.sum())
    rep = CheckReport(
        name="admissibility",
        paper_ref="admissibility of the augmented Hessian",
        levels=[{"nodes": int(a.size), "inadmissible": bad, "min_margin": m}],
        passed=bad == 0,
        details={"inadmissible_nodes": bad, "min_margin": m},
    )
    return _with_metric(rep, m)


def _random_gamma(ctx: Context, opts: dict):
    rng = np.random.default_rng(ctx.seed)
    samples = int(opts.get("samples", 2000))
    n_max = int(opts.get("n_max", 6))
    for n in range(2, n_max + 1):
        for k in range(2, n + 1):
            yield n, k, symfun.sample_gamma(rng, n, k, samples)


def run_algebraic(ctx: Context, opts: dict) -> CheckReport:
    rows, worst = [], 0.0
    for n, k, A in _random_gamma(ctx, opts):
        scale = symfun.identity_scale(k, A)
        tr = symfun.trace_identity_residual(k - 1, A) / symfun.identity_scale(k - 1, A)
        eu = symfun.euler_identity_residual(k, A) / scale
        r = cancellation_residuals(k, A, symfun.sigma_root(k, A))
        row = {
            "n": n,
            "k": k,
            "trace": float(np.max(tr)),
            "euler": float(np.max(eu)),
            "complement": float(np.max(r["complement"])),
            "cancellation": float(np.max(r["model_f"])),
        }
        rows.append(row)
        worst = max(worst, row["trace"], row["euler"], row["complement"], row["cancellation"])
    tol = float(opts.get("rtol", 1e-10))
    rep = CheckReport(
        name="algebraic_identities",
        paper_ref="trace, Euler, complement and cancellation identities",
        levels=rows,
        passed=worst <= tol,
        details={"max_relative_residual": worst, "rtol": tol},
    )
    return _with_metric(rep, worst)


def gradient_fd_error(k: int, A: np.ndarray, root: bool, step: float = 1e-5, richardson: bool = True) -> np.ndarray:
    """Relative max error of the analytic gradient against central differences
    along the symmetric unit directions.

    With ``richardson`` the steps ``step`` and ``step / 2`` are combined to
    cancel the O(step^2) truncation term, which dominates near the cone
    boundary where sigma_k is small against |A|^k.
    """
    n = A.shape[-1]
    fn = (lambda M: symfun.sigma_root(k, M)) if root else (lambda M: symfun.sigma(k, M))
    G = symfun.grad_sigma_k1k(k, A) if root else symfun.grad_sigma(k, A)

    def central(S, t):
        return (fn(A + t * S) - fn(A - t * S)) / (2 * t)

    err = np.zeros(A.shape[0])
    for i in range(n):
        for j in range(i, n):
            S = np.zeros((n, n))
            S[i, j] = S[j, i] = 1.0
            fd = central(S, step)
            if richardson:
                fd = (4.0 * central(S, step / 2) - fd) / 3.0
            exact = G[:, i, j] * (1.0 if i == j else 2.0)
            err = np.maximum(err, np.abs(fd - exact))
    return err / np.abs(G).max(axis=(-2, -1))


def run_gradient_oracle(ctx: Context, opts: dict) -> CheckReport:
    rows, worst = [], 0.0
    tol = float(opts.get("rtol", 1e-6))
    for n, k, A in _random_gamma(ctx, {"samples": opts.get("samples", 1000), "n_max": opts.get("n_max", 6)}):
        row = {"n": n, "k": k}
        for label, root in (("grad_sigma", False), ("grad_sigma_k1k", True)):
            e = gradient_fd_error(k, A, root)
            plain = gradient_fd_error(k, A, root, richardson=False)
            row[label] = float(e.max())
            row[label + "_plain"] = float(plain.max())
            row[label + "_plain_over_tol"] = int((plain > tol).sum())
            worst = max(worst, row[label])
        rows.append(row)
    rep = CheckReport(
        name="gradient_oracle",
        paper_ref="gradient of sigma_k and of sigma_k^(1/k)",
        levels=rows,
        passed=worst <= tol,
        details={"max_relative_error": worst, "rtol": tol, "step": 1e-5},
    )
    return _with_metric(rep, worst)


def run_quotient_chain(ctx: Context, opts: dict) -> CheckReport:
    rng = np.random.default_rng(ctx.seed + 1)
    rows, worst = [], math.inf
    for n, k, A in _random_gamma(ctx, opts):
        B = symfun.sample_gamma(rng, n, k, A.shape[0])
        t = rng.uniform(0, 1, A.shape[0])
        qc = float(np.min(symfun.quotient_chain_gap(k, A)))
        cp = min(float(symfun.concavity_probe(k, A[i], B[i], float(t[i]))) for i in range(min(200, len(A))))
        rows.append({"n": n, "k": k, "quotient_chain_min": qc, "concavity_min": cp})
        worst = min(worst, qc, cp)
    rep = CheckReport(
        name="quotient_chain",
        paper_ref="quotient chain and concavity of sigma_k^(1/k)",
        levels=rows,
        passed=worst >= -1e-10,
        details={"min_value": worst},
    )
    return _with_metric(rep, worst)


def run_vh(ctx: Context, opts: dict) -> CheckReport:
    fld = ctx.need_analytic("vh_convergence")
    s = float(opts.get("s", 2.0))
    mult = [int(m) for m in opts.get("multiples", [4, 2, 1])]
    u = ctx.u
    hd = lambda X: np.diagonal(fld.hess(X), axis1=-2, axis2=-1)  # noqa: E731
    t = vh_convergence(u, fld.lap, mult, s=s, hess_diag=hd)
    min_order = float(opts.get("min_order", 1.8))
    ok_order = all(o >= min_order for o in t.orders)
    ok_bound = all(e <= b * (1 + 1e-9) + 1e-13 for e, b in zip(t.errors, t.bounds))
    rep = CheckReport(
        name="vh_convergence",
        paper_ref="convergence of the summed second difference quotients to the Laplacian",
        levels=t.rows(),
        # a single multiple (one sweep point) has no order pair
        observed_order=min(t.orders) if t.orders else None,
        passed=ok_order and ok_bound,
        details={"orders": t.orders, "s": s, "below_modulus_bound": ok_bound},
    )
    return _with_metric(rep, t.errors[-1])


def run_div(ctx: Context, opts: dict) -> CheckReport:
    fld = ctx.need_analytic("verify_div_f")
    levels = tuple(int(m) for m in opts.get("levels", (9, 17, 33)))
    rep = verify_div_f(fld, ctx.spec, levels=levels, min_order=float(opts.get("min_order", 1.8)))
    return _with_metric(rep, rep.levels[-1]["residual"])


def run_weak(ctx: Context, opts: dict) -> CheckReport:
    fld = ctx.need_analytic("weak_identity_check")
    levels = tuple(int(m) for m in opts.get("levels", (9, 17, 33)))
    rep = weak_identity_check(fld, ctx.spec, levels=levels, min_order=float(opts.get("min_order", 1.8)))
    return _with_metric(rep, rep.levels[-1]["residual"])


def run_bilinear(ctx: Context, opts: dict) -> CheckReport:
    u = ctx.u
    B = rotation_field(u, tuple(opts.get("plane", (0, 1))))
    X = u.coords()
    hf = u.with_values(np.cos(X[..., 0]) * np.exp(0.5 * X[..., -1]))
    rep = bilinear_bound_check(B, u, hf)
    return _with_metric(rep, rep.details["bilinear"])


def run_concavity(ctx: Context, opts: dict) -> CheckReport:
    rep = concavity_dq_check(ctx.u, ctx.spec, estimate_config(ctx, opts))
    return _with_metric(rep, rep.details["min_margin"])


def run_i1(ctx: Context, opts: dict) -> CheckReport:
    rep = i1_pointwise_bound(ctx.u, ctx.spec, estimate_config(ctx, opts))
    return _with_metric(rep, rep.details["min_margin"])


def run_bochner(ctx: Context, opts: dict) -> CheckReport:
    u = ctx.u
    H1 = ExprFunction(str(opts.get("H1", "1 + z**2")), ctx.spec.n)
    axis = int(opts.get("axis", 0))
    h = float(opts.get("h", u.spacing[axis]))
    rep = bochner_identity_check(u, H1, axis, h)
    return _with_metric(rep, rep.details["relative_residual"])


def run_cancellation(ctx: Context, opts: dict) -> CheckReport:
    rep = cancellation_identity_checks(ctx.u, ctx.spec, float(opts.get("rtol", 1e-10)))
    return _with_metric(rep, rep.details.get("euler_max"))


def run_i123(ctx: Context, opts: dict) -> CheckReport:
    rep = estimate_probe_I123(ctx.u, ctx.spec, estimate_config(ctx, opts), opts.get("case"))
    return _with_metric(rep, rep.implied_constant)


def run_reverse_holder(ctx: Context, opts: dict) -> CheckReport:
    rep = reverse_holder_probe(ctx.u, ctx.spec, estimate_config(ctx, opts), opts.get("case"))
    return _with_metric(rep, rep.implied_constant)


def run_sup_chain(ctx: Context, opts: dict) -> CheckReport:
    case = opts.get("case") or default_case(ctx.spec)
    if case not in ("case1", "case2", "k2-general", "k>=3-general"):
        raise ConfigError(f"no schedule for case {case!r}")
    n, k = ctx.spec.n, ctx.spec.k
    p = opts.get("p", str(p_threshold(case, k, n) + 1))
    sched = moser_schedule(k, n, p, case)
    cfg = estimate_config(ctx, opts)
    rep = sup_norm_chain(ctx.u, ctx.spec, sched, R=cfg.R, J=int(opts.get("J", 8)))
    return _with_metric(rep, rep.details["final_ratio"])


def run_f_xi(ctx: Context, opts: dict) -> CheckReport:
    rep = f_xi_extension_check(ctx.u, ctx.spec, estimate_config(ctx, opts))
    return _with_metric(rep, rep.details["slack_constant"])


def run_mms(ctx: Context, opts: dict) -> CheckReport:
    if ctx.ms is None:
        raise ConfigError("mms_convergence needs a manufactured problem")
    levels = tuple(int(m) for m in opts.get("levels", (9, 17, 33)))
    solver = str(opts.get("linear_solver", "auto"))
    rep = mms_convergence(ctx.ms.name, ctx.spec.n, ctx.spec.k, levels, ctx.spec.box, linear_solver=solver)
    return _with_metric(rep, rep.levels[-1]["error_sup"])


RUNNERS: dict[str, Callable[[Context, dict], CheckReport]] = {
    "admissibility": run_admissibility,
    "algebraic_identities": run_algebraic,
    "gradient_oracle": run_gradient_oracle,
    "quotient_chain": run_quotient_chain,
    "vh_convergence": run_vh,
    "verify_div_f": run_div,
    "weak_identity_check": run_weak,
    "bilinear_bound_check": run_bilinear,
    "concavity_dq_check": run_concavity,
    "i1_pointwise_bound": run_i1,
    "bochner_identity_check": run_bochner,
    "cancellation_identity_checks": run_cancellation,
    "estimate_probe_I123": run_i123,
    "reverse_holder_probe": run_reverse_holder,
    "sup_norm_chain": run_sup_chain,
    "f_xi_extension_check": run_f_xi,
    "mms_convergence": run_mms,
}


# ------------------------------------------------------------------ running


def run_check(ctx: Context, name: str, opts: dict) -> CheckReport:
    """Run one named check. Library errors on the input (a field leaving the
    cone, a domain violation) become a failed report rather than an abort;
    configuration and threshold errors propagate."""
    from .errors import ThresholdError

    try:
        return RUNNERS[name](ctx, opts)
    except (ConfigError, ThresholdError):
        raise
    except SigmakError as exc:
        return CheckReport(
            name=name,
            paper_ref="",
            passed=False,
            details={"error": type(exc).__name__, "message": str(exc)},
        )


@dataclass
class RunReport:
    command: str
    reports: list = field(default_factory=list)
    environment: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports if r.kind != "probe")

    def summary(self) -> dict:
        checks = [r for r in self.reports if r.kind != "probe"]
        return {
            "checks": len(checks),
            "probes": len(self.reports) - len(checks),
            "failed": [r.name for r in checks if not r.passed],
            "pass": self.passed,
        }

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "summary": self.summary(),
            "environment": self.environment,
            "checks": [r.to_dict() for r in self.reports],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def environment(ctx: Context, cfg: dict) -> dict:
    u_shape = list(ctx.stored.shape) if ctx.stored is not None else [ctx.grid] * ctx.spec.n
    return {
        "version": __version__,
        "backend": _kernels.backend(),
        "grid": u_shape,
        "seed": ctx.seed,
        "n": ctx.spec.n,
        "k": ctx.spec.k,
        "problem": {k: v for k, v in cfg.get("problem", {}).items()},
    }


def sweep_rows(ctx: Context, name: str, opts: dict, axis: str, values) -> tuple[list[dict], dict]:
    """Run ``name`` at each axis value; rows carry the value and the check's metric."""
    if axis not in ("h", "q", "grid"):
        raise ConfigError(f"sweep axis must be h, q or grid, got {axis!r}")
    rows = []
    for v in values:
        if axis == "grid":
            c, o = ctx.with_grid(int(v)), dict(opts)
        else:
            c, o = ctx, dict(opts, **{axis: float(v)})
            if axis == "h" and name == "vh_convergence":
                o = dict(opts, multiples=[int(v)])
        rep = run_check(c, name, o)
        rows.append(
            {
                "axis": axis,
                "value": v,
                "metric": rep.details.get("metric"),
                "implied_constant": rep.implied_constant,
                "pass": rep.passed,
            }
        )
    summary = {"check": name, "axis": axis}
    metrics = [r["metric"] for r in rows]
    if axis in ("h", "grid") and all(isinstance(m, (int, float)) for m in metrics) and len(rows) > 1:
        if axis == "grid":
            hs = [1.0 / (int(v) - 1) for v in values]
        else:
            hs = [float(v) for v in values]
        summary["orders"] = observed_orders(hs, [abs(m) for m in metrics])
    if axis == "q":
        ic = [r["implied_constant"] for r in rows if r["implied_constant"] is not None]
        if ic and min(ic) > 0:
            summary["stability"] = max(ic) / min(ic) - 1.0
    return rows, summary
