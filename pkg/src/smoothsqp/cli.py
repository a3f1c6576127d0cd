"""Command-line front end: ``smoothsqp solve | list | audit``.

Exit codes: 0 converged, 2 iteration cap, 3 line-search failure, 4 QP
failure, 5 configuration error, 6 evaluation failure. ``audit`` returns 0
when every self-check passes and 1 otherwise.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from smoothsqp import driver
from smoothsqp.bilevel import BilevelProblem, QuadratureConfig, build_combined_program, check_interiority
from smoothsqp.cq import FEAS_TOL, check_bilevel_wnnamcq, collect_clusters, run_all
from smoothsqp.problem import MeritParams, evaluate, fd_gradient_check, merit_directional_derivative, merit_value
from smoothsqp.qp import QpData, kkt_residuals, solve_penalized_qp, trivial_feasible
from smoothsqp.registry import RegistryError, list_problems, registry_lookup

logger = logging.getLogger("smoothsqp")

CONFIG_SCHEMA_VERSION = 1
EXIT_CODES = {
    driver.CONVERGED: 0,
    driver.MAX_ITER: 2,
    driver.LINE_SEARCH_FAILURE: 3,
    driver.QP_FAILURE: 4,
    driver.EVALUATION_FAILURE: 6,
}
EXIT_CONFIG = 5
TRACE_COLUMNS_TAIL = ["rho", "r", "xi", "alpha", "d_norm", "merit", "stationarity_residual", "rho_updated"]
FD_TOL = 1e-4
AUDIT_RHOS = (1e2, 1e4, 1e6)


class ConfigError(ValueError):
    pass


def seed_from_env(default: int = 0) -> int:
    raw = os.environ.get("SMOOTHSQP_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"SMOOTHSQP_SEED must be an integer, got {raw!r}") from None


@dataclass
class RunConfig:
    problem: str
    x0: Optional[List[float]] = None
    solver: dict = field(default_factory=dict)
    quadrature: dict = field(default_factory=dict)
    trace_path: Optional[str] = None
    report_path: Optional[str] = None
    plot_path: Optional[str] = None
    fd_check: bool = False
    cq_check: bool = False
    interiority_check: bool = True

    @classmethod
    def from_json(cls, data: dict, problem: Optional[str] = None) -> "RunConfig":
        """Parse a ``{"spec": 1, ...}`` document; ``problem`` from the command line wins if both are set."""
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        if data.get("spec") != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f'config must carry "spec": {CONFIG_SCHEMA_VERSION}')
        allowed = {"spec", "problem", "x0", "solver", "quadrature", "outputs", "checks"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        name = problem or data.get("problem")
        if data.get("problem") and problem and data["problem"] != problem:
            raise ConfigError(f"config names problem {data['problem']!r} but {problem!r} was requested")
        if not name:
            raise ConfigError("no problem given")
        outputs = data.get("outputs", {}) or {}
        checks = data.get("checks", {}) or {}
        bad_out = set(outputs) - {"trace", "report", "plot"}
        bad_chk = set(checks) - {"fd_check", "cq_check", "interiority_check"}
        if bad_out or bad_chk:
            raise ConfigError(f"unknown output/check keys: {sorted(bad_out | bad_chk)}")
        return cls(
            problem=name,
            x0=data.get("x0"),
            solver=dict(data.get("solver", {}) or {}),
            quadrature=dict(data.get("quadrature", {}) or {}),
            trace_path=outputs.get("trace"),
            report_path=outputs.get("report"),
            plot_path=outputs.get("plot"),
            fd_check=bool(checks.get("fd_check", False)),
            cq_check=bool(checks.get("cq_check", False)),
            interiority_check=bool(checks.get("interiority_check", True)),
        )


@dataclass
class RunReport:
    problem: str
    status: str
    exit_code: int
    final_point: Optional[list] = None
    final_merit: Optional[float] = None
    final_rho: Optional[float] = None
    final_r: Optional[float] = None
    upper_objective: Optional[float] = None
    iterations: int = 0
    stationarity_residual: Optional[float] = None
    message: str = ""
    wall_time: float = 0.0
    cq_verdicts: Optional[list] = None
    bilevel_wnnamcq: Optional[bool] = None
    fd_check: Optional[dict] = None
    interiority: Optional[bool] = None
    distance_to_reference: Optional[float] = None

    def to_dict(self) -> dict:
        out = asdict(self)
        # the distance field is present iff the registry carries a reference
        if out["distance_to_reference"] is None:
            out.pop("distance_to_reference")
        return out


# -- building ------------------------------------------------------------------


def build_problem(name: str, quadrature: Optional[dict] = None):
    """Return ``(entry, ProblemInstance, BilevelProblem or None)``."""
    entry = registry_lookup(name)
    obj = entry.build()
    if isinstance(obj, BilevelProblem):
        try:
            qc = QuadratureConfig(**(quadrature or {}))
        except TypeError as exc:
            raise ConfigError(f"bad quadrature settings: {exc}") from None
        return entry, build_combined_program(obj, qc), obj
    if quadrature:
        raise ConfigError(f"problem {name!r} takes no quadrature settings")
    return entry, obj, None


def solver_config(entry, overrides: dict) -> driver.SolverConfig:
    try:
        return driver.SolverConfig.from_dict({**entry.solver_defaults, **(overrides or {})})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_vector(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse vector {text!r}") from None


# -- outputs -------------------------------------------------------------------


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_trace(path: str, result: driver.SolveResult, n: int):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k"] + [f"x[{i}]" for i in range(n)] + TRACE_COLUMNS_TAIL)
        for rec in result.trace:
            w.writerow(
                [rec.k] + [_fmt(v) for v in rec.x]
                + [_fmt(rec.rho), _fmt(rec.r), _fmt(rec.xi), _fmt(rec.alpha), _fmt(rec.d_norm),
                   _fmt(rec.merit_before), _fmt(np.linalg.norm(rec.W @ rec.d)), int(rec.rho_updated)]
            )


def write_plot_data(path: str, result: driver.SolveResult):
    with open(path, "w") as fh:
        fh.write("k\tmerit\td_norm\trho\n")
        for rec in result.trace:
            fh.write(f"{rec.k}\t{_fmt(rec.merit_before)}\t{_fmt(rec.d_norm)}\t{_fmt(rec.rho)}\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def write_report(path: str, report: RunReport):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, default=_json_default)
        fh.write("\n")


# -- checks --------------------------------------------------------------------


def fd_step(rho: float) -> float:
    """Central-difference step that resolves features of width ``1/rho``."""
    return min(1e-6, 1e-2 / rho)


def fd_audit(prob, x, rhos) -> dict:
    out = {}
    families = [prob.objective, *prob.inequalities, *prob.equalities]
    for rho in rhos:
        for fn in families:
            rep = fd_gradient_check(fn, x, rho, fd_step(rho))
            key = f"{fn.name}@rho={rho:g}"
            out[key] = {"max_abs_error": rep.max_abs_error, "ok": rep.ok(FD_TOL)}
    return out


def cq_verdicts(prob, result: driver.SolveResult, cfg: driver.SolverConfig, bp=None):
    feas_tol = max(FEAS_TOL, cfg.eps1)
    verdicts = []
    for c in collect_clusters(result.trace, prob=prob, feas_tol=feas_tol):
        entry = {"anchor": c.anchor.tolist(), "members": len(c.members), "settled": c.settled,
                 "grad_change": c.grad_change, "verdicts": []}
        if c.settled:
            entry["verdicts"] = [v.to_dict() for v in run_all(c)]
        verdicts.append(entry)
    bilevel_ok = None
    if bp is not None and bp.m == 1 and result.trace:
        last = result.trace[-1]
        bilevel_ok = check_bilevel_wnnamcq(last.grad_ineq[0], last.grad_eq[0])
    return verdicts, bilevel_ok


def run(cfg: RunConfig) -> RunReport:
    """Build, solve, check and write outputs. Configuration problems become exit code 5."""
    t0 = time.perf_counter()
    try:
        entry, prob, bp = build_problem(cfg.problem, cfg.quadrature)
        scfg = solver_config(entry, cfg.solver)
        x0 = np.asarray(entry.x0 if cfg.x0 is None else cfg.x0, dtype=float)
        if x0.shape != (prob.n,):
            raise ConfigError(f"x0 has length {x0.size}, problem {cfg.problem!r} has dimension {prob.n}")
    except (ConfigError, RegistryError) as exc:
        msg = exc.args[0] if isinstance(exc, RegistryError) else str(exc)
        report = RunReport(problem=cfg.problem, status="config_error", exit_code=EXIT_CONFIG, message=msg)
        if cfg.report_path:
            write_report(cfg.report_path, report)
        return report

    interior = None
    if bp is not None and cfg.interiority_check:
        interior = check_interiority(bp, x0[:bp.n], grid_per_dim=20_001)
        if not interior:
            logger.warning("lower-level solution at the initial upper point is not interior to Y")

    result = driver.run_solver(prob, x0, scfg)
    final_merit = merit_value(prob, result.final_x, MeritParams(result.final_rho, result.final_r))
    report = RunReport(
        problem=cfg.problem,
        status=result.status,
        exit_code=EXIT_CODES[result.status],
        final_point=result.final_x.tolist(),
        final_merit=final_merit,
        final_rho=result.final_rho,
        final_r=result.final_r,
        upper_objective=prob.objective.base_value(result.final_x),
        iterations=result.iterations,
        stationarity_residual=result.stationarity_residual,
        message=result.message,
        interiority=interior,
    )
    if entry.reference is not None:
        report.distance_to_reference = float(np.linalg.norm(result.final_x - np.asarray(entry.reference)))
    if cfg.cq_check:
        report.cq_verdicts, report.bilevel_wnnamcq = cq_verdicts(prob, result, scfg, bp)
    if cfg.fd_check:
        rho = min(result.final_rho, AUDIT_RHOS[-1])
        report.fd_check = fd_audit(prob, result.final_x, [rho])
    report.wall_time = time.perf_counter() - t0

    if cfg.trace_path:
        write_trace(cfg.trace_path, result, prob.n)
    if cfg.plot_path:
        write_plot_data(cfg.plot_path, result)
    if cfg.report_path:
        write_report(cfg.report_path, report)
    return report


def audit(name: str, seed: int = 0) -> dict:
    """Self-checks at the registry initial point, without solving."""
    entry, prob, bp = build_problem(name)
    cfg = solver_config(entry, {})
    x0 = np.asarray(entry.x0, dtype=float)
    checks = {}
    fd = fd_audit(prob, x0, AUDIT_RHOS)
    checks["fd_gradients"] = {"ok": all(v["ok"] for v in fd.values()), "detail": fd}
    diagnostics = {}
    if bp is not None:
        # an assumption of the theory, reported but not enforced
        diagnostics["interiority"] = bool(check_interiority(bp, x0[:bp.n], grid_per_dim=20_001))

    rng = np.random.default_rng(seed)
    ev = evaluate(prob, x0, cfg.rho0)
    A = rng.standard_normal((prob.n, prob.n))
    W = np.eye(prob.n) + 0.1 * A @ A.T
    qp = QpData.from_evaluation(ev, W, cfg.r0)
    sol = solve_penalized_qp(qp)
    checks["qp"] = {"ok": bool(trivial_feasible(qp) and trivial_feasible(qp, sol) and kkt_residuals(qp, sol).max()
                               <= 1e-8 * max(1.0, cfg.r0)), "kkt_residual": sol.kkt_residual}

    mp = MeritParams(cfg.rho0, cfg.r0)
    dd = merit_directional_derivative(prob, x0, sol.d, mp)
    checks["descent"] = {"ok": bool(dd <= -float(sol.d @ W @ sol.d) + 1e-8), "directional_derivative": dd}
    return {"problem": name, "seed": seed, "ok": all(c["ok"] for c in checks.values()), "checks": checks,
            "diagnostics": diagnostics}


# -- argparse ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smoothsqp", description="Smoothing SQP solver for nonsmooth programs")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve a registry problem")
    s.add_argument("problem")
    s.add_argument("--config", help='JSON run configuration with "spec": 1')
    s.add_argument("--x0", help="comma-separated initial point")
    s.add_argument("--out-trace", help="per-iteration CSV trace")
    s.add_argument("--out-report", help="JSON run report")
    s.add_argument("--check-cq", action="store_true", help="evaluate the weak constraint qualifications")
    s.add_argument("--fd-check", action="store_true", help="finite-difference audit at the final point")
    s.add_argument("--emit-plot-data", nargs="?", const="", default=None, metavar="PATH",
                   help="write (k, merit, d_norm, rho) TSV; default path derives from the trace path")

    sub.add_parser("list", help="list registry problems")
    a = sub.add_parser("audit", help="run self-checks without solving")
    a.add_argument("problem")
    return parser


def _config_from_args(args) -> RunConfig:
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config!r}: {exc}") from None
        cfg = RunConfig.from_json(data, args.problem)
    else:
        cfg = RunConfig(problem=args.problem)
    if args.x0:
        cfg.x0 = parse_vector(args.x0)
    cfg.trace_path = args.out_trace or cfg.trace_path
    cfg.report_path = args.out_report or cfg.report_path
    cfg.cq_check = cfg.cq_check or args.check_cq
    cfg.fd_check = cfg.fd_check or args.fd_check
    if args.emit_plot_data is not None:
        if args.emit_plot_data:
            cfg.plot_path = args.emit_plot_data
        else:
            base = cfg.trace_path or f"{cfg.problem}_trace.csv"
            cfg.plot_path = os.path.splitext(base)[0] + ".plot.tsv"
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "list":
        for name in list_problems():
            print(f"{name:15s} {registry_lookup(name).description}")
        return 0

    if args.command == "audit":
        try:
            result = audit(args.problem, seed_from_env())
        except (ConfigError, RegistryError) as exc:
            print(f"error: {exc.args[0]}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps(result, indent=2, default=_json_default))
        return 0 if result["ok"] else 1

    try:
        cfg = _config_from_args(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.out_report:
            write_report(args.out_report, RunReport(args.problem, "config_error", EXIT_CONFIG, message=str(exc)))
        return EXIT_CONFIG
    report = run(cfg)
    summary = {k: report.to_dict().get(k) for k in
               ("problem", "status", "final_point", "final_merit", "iterations", "distance_to_reference",
                "bilevel_wnnamcq", "message")}
    print(json.dumps(summary, default=_json_default))
    if report.exit_code == EXIT_CONFIG:
        print(f"error: {report.message}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
