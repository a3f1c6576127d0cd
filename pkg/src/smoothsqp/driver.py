"""The smoothing SQP outer loop.

Each iteration solves the elastic QP at ``(x_k, rho_k, r_k, W_k)``, raises
the penalty when the elastic variable is nonzero, backtracks on the merit
function ``f_rho + r max{0, g_i, |h_j|}``, raises the smoothing parameter
when the step is short relative to ``1/rho``, and updates ``W`` with Powell's
damped BFGS formula (reset to the identity when its norm leaves bounds).
"""

import logging
from dataclasses import dataclass, field, fields
from typing import Callable, List, Optional

import numpy as np

from smoothsqp.problem import EvaluationError, Evaluation, MeritParams, ProblemInstance, evaluate, merit_value
from smoothsqp.qp import KKT_TOL, QpData, QpMatrixError, QpSolution, QpSolverError, solve_penalized_qp

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max_iter"
LINE_SEARCH_FAILURE = "line_search_failure"
QP_FAILURE = "qp_failure"
EVALUATION_FAILURE = "evaluation_failure"


class LineSearchError(RuntimeError):
    def __init__(self, backtracks: int, ratio: float):
        super().__init__(f"no Armijo step after {backtracks} backtracks (last decrease ratio {ratio:.3e})")
        self.backtracks = backtracks
        self.ratio = ratio


@dataclass
class SolverConfig:
    beta: float = 0.8
    sigma1: float = 1e-6
    sigma2: float = 1e-6  # listed with the algorithm constants, never used
    sigma: float = 10.0
    sigma_prime: float = 10.0
    eta_hat: float = 5e5
    rho0: float = 100.0
    r0: float = 100.0
    eps: float = 7e-5
    eps_prime: float = 1e-8
    eps1: float = 1e-6
    w_norm_min: float = 1e-5
    w_norm_max: float = 1e5
    max_iter: int = 100
    qp_tol: float = KKT_TOL
    max_backtracks: int = 60
    armijo_tol: float = 1e-12  # relative roundoff slack in the Armijo test

    def __post_init__(self):
        checks = {
            "beta in (0,1)": 0 < self.beta < 1,
            "sigma1 in (0,1)": 0 < self.sigma1 < 1,
            "sigma2 in (0,1)": 0 < self.sigma2 < 1,
            "sigma1 <= sigma2": self.sigma1 <= self.sigma2,
            "sigma > 1": self.sigma > 1,
            "sigma_prime > 1": self.sigma_prime > 1,
            "eta_hat > 1": self.eta_hat > 1,
            "rho0 > 0": self.rho0 > 0,
            "r0 > 0": self.r0 > 0,
            "eps > 0": self.eps > 0,
            "eps_prime > 0": self.eps_prime > 0,
            "eps1 > 0": self.eps1 > 0,
            "0 < w_norm_min < w_norm_max": 0 < self.w_norm_min < self.w_norm_max,
            "max_iter >= 1": self.max_iter >= 1,
            "qp_tol > 0": self.qp_tol > 0,
            "max_backtracks >= 1": self.max_backtracks >= 1,
            "armijo_tol >= 0": self.armijo_tol >= 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError("invalid solver configuration: " + ", ".join(bad))

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class IterationRecord:
    k: int
    x: np.ndarray
    rho: float
    r: float
    d: np.ndarray
    xi: float
    alpha: float
    multipliers: QpSolution
    merit_before: float
    merit_after: float
    d_norm: float
    rho_updated: bool
    r_next: float
    rho_next: float
    W: np.ndarray
    grad_f: np.ndarray
    grad_ineq: np.ndarray
    grad_eq: np.ndarray
    ineq_values: np.ndarray
    eq_values: np.ndarray
    w_reset: bool = False

    @property
    def dWd(self) -> float:
        return float(self.d @ self.W @ self.d)

    @property
    def step_norm(self) -> float:
        return self.alpha * self.d_norm


@dataclass
class SolveResult:
    status: str
    final_x: np.ndarray
    trace: List[IterationRecord]
    stationarity_residual: float
    d_small_set: List[int]
    final_rho: float
    final_r: float
    final_W: np.ndarray
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    @property
    def iterations(self) -> int:
        return len(self.trace)


def line_search(prob: ProblemInstance, x, d, W, mp: MeritParams, beta: float, sigma1: float,
                max_backtracks: int = 60, merit0: Optional[float] = None, armijo_tol: float = 0.0):
    """Armijo backtracking: ``alpha = beta^l`` for the smallest admissible ``l``.

    ``armijo_tol`` adds ``armijo_tol * max(1, |theta(x)|)`` to the right-hand
    side so that a direction of roundoff size at a solution is not rejected
    on merit noise alone.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    theta0 = merit_value(prob, x, mp) if merit0 is None else merit0
    dWd = float(d @ W @ d)
    slack = armijo_tol * max(1.0, abs(theta0))
    alpha = 1.0
    ratio = np.nan
    for _ in range(max_backtracks + 1):
        theta = merit_value(prob, x + alpha * d, mp)
        if theta - theta0 <= -sigma1 * alpha * dWd + slack:
            return alpha, theta
        ratio = (theta - theta0) / (alpha * dWd) if dWd > 0 else np.inf
        alpha *= beta
    raise LineSearchError(max_backtracks, ratio)


def update_penalty(r: float, xi: float, sigma_prime: float, eps_prime: float) -> float:
    return r if xi < eps_prime else sigma_prime * r


def update_smoothing(rho: float, d_norm: float, sigma: float, eta_hat: float, eps: float):
    if d_norm <= max(eta_hat / rho, eps):
        return sigma * rho, True
    return rho, False


def powell_bfgs_update(W, s, y_raw, w_norm_min: float = 1e-5, w_norm_max: float = 1e5):
    """Powell-damped BFGS update; returns ``(W_next, reset)``.

    ``y_raw`` is replaced by ``theta y + (1 - theta) W s`` when
    ``s'y < 0.2 s'Ws``. The identity is returned when the 2-norm of the
    update leaves ``[w_norm_min, w_norm_max]`` or the update is not SPD.
    """
    W = np.asarray(W, dtype=float)
    s = np.asarray(s, dtype=float)
    y = np.asarray(y_raw, dtype=float)
    if not np.any(s):
        return W.copy(), False
    Ws = W @ s
    sWs = float(s @ Ws)
    sy = float(s @ y)
    if sy >= 0.2 * sWs:
        ybar = y
    else:
        theta = 0.8 * sWs / (sWs - sy)
        ybar = theta * y + (1.0 - theta) * Ws
    W_next = W - np.outer(Ws, Ws) / sWs + np.outer(ybar, ybar) / float(s @ ybar)
    W_next = 0.5 * (W_next + W_next.T)
    norm = np.linalg.norm(W_next, 2) if np.all(np.isfinite(W_next)) else np.inf
    if not (w_norm_min <= norm <= w_norm_max):
        return np.eye(len(s)), True
    try:
        np.linalg.cholesky(W_next)
    except np.linalg.LinAlgError:
        return np.eye(len(s)), True
    return W_next, False


def lagrangian_gradient_change(ev0: Evaluation, ev1: Evaluation, sol: QpSolution) -> np.ndarray:
    """``y_k`` for the BFGS update, with all gradients taken at ``rho_k``.

    Uses the gradient of the Lagrangian ``f + lam_g'g + (lam+ - lam-)'h``,
    the same sign convention as the QP stationarity condition, so that ``W``
    models the Lagrangian curvature (including that of the constraints).
    """
    y = ev1.grad_f - ev0.grad_f
    if len(ev0.g):
        y = y + sol.lam_g @ (ev1.grad_g - ev0.grad_g)
    if len(ev0.h):
        y = y + (sol.lam_plus - sol.lam_minus) @ (ev1.grad_h - ev0.grad_h)
    return y


def stationarity_residual(record: IterationRecord, W=None) -> float:
    """``|grad_f + sum lam_g grad_g + sum (lam+ - lam-) grad_h|`` at ``x_k``.

    At a QP solution this equals ``|W_k d_k|``.
    """
    sol = record.multipliers
    v = record.grad_f.copy()
    if len(record.ineq_values):
        v += sol.lam_g @ record.grad_ineq
    if len(record.eq_values):
        v += (sol.lam_plus - sol.lam_minus) @ record.grad_eq
    return float(np.linalg.norm(v))


def run_solver(prob: ProblemInstance, x0, cfg: Optional[SolverConfig] = None,
               observer: Optional[Callable[[IterationRecord], None]] = None) -> SolveResult:
    cfg = cfg or SolverConfig()
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (prob.n,) or not np.all(np.isfinite(x)):
        raise ValueError(f"x0 must be a finite vector of length {prob.n}")
    rho, r = float(cfg.rho0), float(cfg.r0)
    W = np.eye(prob.n)
    trace: List[IterationRecord] = []
    status, message = MAX_ITER, f"iteration cap {cfg.max_iter} reached"

    for k in range(cfg.max_iter):
        try:
            ev = evaluate(prob, x, rho)
            qp = QpData.from_evaluation(ev, W, r)
            try:
                sol = solve_penalized_qp(qp, cfg.qp_tol)
            except (QpSolverError, QpMatrixError) as exc:
                status, message = QP_FAILURE, str(exc)
                break
            d = sol.d
            xi = sol.xi if prob.has_constraints else 0.0
            r_next = update_penalty(r, xi, cfg.sigma_prime, cfg.eps_prime) if prob.has_constraints else r

            mp = MeritParams(rho, r)
            merit0 = ev.f + (r * ev.phi if prob.has_constraints else 0.0)
            try:
                alpha, merit1 = line_search(prob, x, d, W, mp, cfg.beta, cfg.sigma1, cfg.max_backtracks, merit0,
                                            cfg.armijo_tol)
            except LineSearchError as exc:
                status, message = LINE_SEARCH_FAILURE, str(exc)
                break
            x_next = x + alpha * d
            d_norm = float(np.linalg.norm(d))
            rho_next, rho_updated = update_smoothing(rho, d_norm, cfg.sigma, cfg.eta_hat, cfg.eps)

            step = x_next - x
            ev_next = evaluate(prob, x_next, rho)
            y = lagrangian_gradient_change(ev, ev_next, sol)
            W_next, reset = powell_bfgs_update(W, step, y, cfg.w_norm_min, cfg.w_norm_max)
        except EvaluationError as exc:
            status, message = EVALUATION_FAILURE, str(exc)
            break
        except ArithmeticError as exc:  # quadrature failures inside smoothing families
            status, message = EVALUATION_FAILURE, f"{type(exc).__name__}: {exc}"
            break

        rec = IterationRecord(
            k=k, x=x.copy(), rho=rho, r=r, d=d.copy(), xi=xi, alpha=alpha, multipliers=sol,
            merit_before=merit0, merit_after=merit1, d_norm=d_norm, rho_updated=rho_updated,
            r_next=r_next, rho_next=rho_next, W=W.copy(), grad_f=ev.grad_f.copy(),
            grad_ineq=ev.grad_g.copy(), grad_eq=ev.grad_h.copy(),
            ineq_values=ev.g.copy(), eq_values=ev.h.copy(), w_reset=reset,
        )
        trace.append(rec)
        if observer is not None:
            observer(rec)
        logger.debug("k=%d x=%s rho=%g r=%g |d|=%.3e xi=%.3e alpha=%g", k, x_next, rho, r, d_norm, xi, alpha)

        x, rho, r, W = x_next, rho_next, r_next, W_next
        if np.linalg.norm(step) < cfg.eps1:
            status, message = CONVERGED, f"step {np.linalg.norm(step):.3e} below eps1"
            break

    last = trace[-1] if trace else None
    return SolveResult(
        status=status,
        final_x=x,
        trace=trace,
        stationarity_residual=float(np.linalg.norm(last.W @ last.d)) if last else np.nan,
        d_small_set=[rec.k for rec in trace if rec.rho_updated],
        final_rho=rho,
        final_r=r,
        final_W=W,
        message=message,
    )


def final_merit(prob: ProblemInstance, result: SolveResult) -> float:
    return merit_value(prob, result.final_x, MeritParams(result.final_rho, result.final_r))
