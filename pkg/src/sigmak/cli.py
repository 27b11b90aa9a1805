"""Command line entry point: ``sigmak verify|solve|moser|sweep``.

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or configuration
error, 3 an exponent gate (threshold) was not met.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import suite
from .errors import ConfigError, SigmakError, SolverError, ThresholdError
from .estimates import CASES, moser_schedule
from .gridcalc import read_field, write_field
from .reports import _clean

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_THRESHOLD = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"sigmak: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _output_dir(cfg: dict, arg: str | None) -> Path:
    out = arg or os.environ.get("SIGMAK_OUTPUT_DIR") or cfg.get("output") or "sigmak-out"
    p = Path(out)
    if not p.is_absolute() and arg is None and "output" in cfg and "SIGMAK_OUTPUT_DIR" not in os.environ:
        p = Path(cfg.get("_base", ".")) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n")


def _print_line(rep) -> None:
    tag = "probe" if rep.kind == "probe" else ("PASS" if rep.passed else "FAIL")
    metric = rep.details.get("metric")
    extra = f"  metric={metric:.4g}" if isinstance(metric, (int, float)) else ""
    if "error" in rep.details:
        extra += f"  {rep.details['error']}: {rep.details['message']}"
    print(f"{tag:5s} {rep.name}{extra}")


def cmd_verify(args) -> int:
    cfg = suite.load_config(args.config)
    ctx = suite.build_context(cfg)
    entries = suite.check_entries(cfg)
    if args.check:
        unknown = [c for c in args.check if c not in suite.RUNNERS]
        if unknown:
            raise ConfigError(f"unknown check {unknown[0]!r}")
        entries = [(c, dict(next((o for n, o in entries if n == c), {}))) for c in args.check]
    out = _output_dir(cfg, args.output)
    run = suite.RunReport("verify", environment=suite.environment(ctx, cfg))
    for name, opts in entries:
        rep = suite.run_check(ctx, name, opts)
        run.reports.append(rep)
        (out / f"{name}.csv").write_text(rep.to_csv())
        _print_line(rep)
    (out / "run.json").write_text(run.to_json() + "\n")
    print(f"{'PASS' if run.passed else 'FAIL'}: {len(run.summary()['failed'])} failed, report in {out / 'run.json'}")
    return EXIT_PASS if run.passed else EXIT_FAIL


def _load_boundary(ctx, spec_arg: str, base: Path, grid: int):
    if spec_arg == "exact":
        return ctx.need_analytic("boundary 'exact'").sample(ctx.spec.box, grid)
    p = Path(spec_arg)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ConfigError(f"boundary file {p} not found")
    return read_field(p)


def cmd_solve(args) -> int:
    from .solver import default_init, mms_convergence, newton_solve

    cfg = suite.load_config(args.config)
    ctx = suite.build_context(cfg)
    base = Path(cfg.get("_base", "."))
    solve_cfg = cfg.get("solve", {})
    grid = int(solve_cfg.get("grid", ctx.grid))
    boundary = _load_boundary(ctx, str(solve_cfg.get("boundary", "exact")), base, grid)
    init_arg = str(solve_cfg.get("init", "default"))
    if init_arg == "default":
        if ctx.ms is None:
            raise ConfigError("init 'default' needs a manufactured problem")
        init = default_init(ctx.ms, boundary.shape[0])
    else:
        init = _load_boundary(ctx, init_arg, base, grid)
    out = _output_dir(cfg, args.output)
    run = suite.RunReport("solve", environment=suite.environment(ctx, cfg))
    try:
        res = newton_solve(
            ctx.spec,
            boundary,
            init,
            rtol=float(solve_cfg.get("rtol", 1e-9)),
            max_iter=int(solve_cfg.get("max_iter", 50)),
            linear_solver=str(solve_cfg.get("linear_solver", "auto")),
        )
    except SolverError as exc:
        _dump(out / "solve.json", {"converged": False, "error": type(exc).__name__, "message": str(exc)})
        print(f"FAIL solve: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    write_field(res.field, out / "solution.csv", provenance=f"newton_solve {ctx.spec.k=} {ctx.spec.n=}")
    _dump(out / "solve.json", res.to_dict())
    print(f"{'PASS' if res.converged else 'FAIL'} solve: {res.iterations} iterations, residual {res.residuals[-1]:.3e}")
    ok = res.converged
    if "mms" in solve_cfg:
        if ctx.ms is None:
            raise ConfigError("'mms' needs a manufactured problem")
        levels = tuple(int(m) for m in solve_cfg["mms"])
        rep = mms_convergence(
            ctx.ms.name, ctx.spec.n, ctx.spec.k, levels, ctx.spec.box, linear_solver=str(solve_cfg.get("linear_solver", "auto"))
        )
        run.reports.append(rep)
        (out / "mms_convergence.csv").write_text(rep.to_csv())
        _print_line(rep)
        ok = ok and rep.passed
    (out / "run.json").write_text(run.to_json() + "\n")
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_moser(args) -> int:
    sched = moser_schedule(args.k, args.n, args.p, args.case)
    print(f"case={sched.case} k={args.k} n={args.n} p={args.p} beta={sched.beta} q0={sched.q0}")
    print(f"{'j':>4} {'q_j':>16} {'beta*q_j':>16} {'radius':>14}")
    for row in sched.rows()[: args.rows]:
        print(f"{row['j']:>4} {row['q_j']:>16.8g} {row['beta_q_j']:>16.8g} {row['radius_factor']:>14.6e}")
    print(f"limit of q_j / beta^j: {sched.limit} ({float(sched.limit):.10g})")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "moser.json", sched.to_dict())
    return EXIT_PASS if sched.limit > 0 else EXIT_FAIL


def cmd_sweep(args) -> int:
    cfg = suite.load_config(args.config)
    ctx = suite.build_context(cfg)
    sw = cfg.get("sweep")
    if not isinstance(sw, dict) or "check" not in sw or "values" not in sw:
        raise ConfigError("config needs a 'sweep' object with 'check' and 'values'")
    axis = args.axis or sw.get("axis")
    name = sw["check"]
    if name not in suite.RUNNERS:
        raise ConfigError(f"unknown check {name!r}")
    opts = {k: v for k, v in sw.items() if k not in ("check", "values", "axis")}
    rows, summary = suite.sweep_rows(ctx, name, opts, axis, sw["values"])
    out = _output_dir(cfg, args.output)
    with open(out / f"sweep_{name}_{axis}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(_clean(r))
    _dump(out / "sweep.json", {"summary": summary, "rows": rows, "environment": suite.environment(ctx, cfg)})
    for r in rows:
        print(f"{axis}={r['value']}  metric={r['metric']}  pass={r['pass']}")
    for key in ("orders", "stability"):
        if key in summary:
            print(f"{key}: {summary[key]}")
    return EXIT_PASS if all(r["pass"] for r in rows) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sigmak", description="Discrete checks for augmented sigma_k Hessian equations.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="run the configured checks")
    v.add_argument("config")
    v.add_argument("--check", action="append", help="run only this check (repeatable)")
    v.add_argument("--output")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("solve", help="Newton solve of the Dirichlet problem")
    s.add_argument("config")
    s.add_argument("--output")
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("moser", help="print the exponent schedule of the iteration")
    m.add_argument("--k", type=int, required=True)
    m.add_argument("--n", type=int, required=True)
    m.add_argument("--p", required=True, help="starting exponent, e.g. 4 or 7/2")
    m.add_argument("--case", choices=sorted(CASES), required=True)
    m.add_argument("--rows", type=int, default=12)
    m.add_argument("--output")
    m.set_defaults(func=cmd_moser)

    w = sub.add_parser("sweep", help="repeat one check along h, q or grid")
    w.add_argument("config")
    w.add_argument("--axis", choices=("h", "q", "grid"))
    w.add_argument("--output")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ThresholdError as exc:
        print(f"sigmak: threshold not met: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except ConfigError as exc:
        print(f"sigmak: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SigmakError as exc:
        print(f"sigmak: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
