"""The penalized (elastic) QP subproblem.

    min_{d, xi}  grad_f'd + 1/2 d'Wd + r xi
    s.t.         g_i + grad_g_i'd <= xi
                 h_j + grad_h_j'd <= xi
                -h_j - grad_h_j'd <= xi
                 xi >= 0

``(d, xi) = (0, max{0, g, |h|})`` is always feasible, so no phase one is
needed. The QP is solved in ``(d, xi)`` by a primal-dual interior-point
method started from that point, then polished on the identified active set.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from smoothsqp.kernels import ipm_core
from smoothsqp.problem import Evaluation, ProblemInstance, evaluate

KKT_TOL = 1e-10
MAX_ITER = 200
XI_REG = 1e-12


class QpMatrixError(np.linalg.LinAlgError):
    """W is not symmetric positive definite."""


class QpSolverError(RuntimeError):
    """The interior-point iteration did not reach the KKT tolerance."""

    def __init__(self, message, best=None, residual=np.inf):
        super().__init__(message)
        self.best = best
        self.residual = residual


@dataclass
class QpData:
    n: int
    W: np.ndarray
    grad_f: np.ndarray
    g: np.ndarray
    grad_g: np.ndarray
    h: np.ndarray
    grad_h: np.ndarray
    r: float

    @classmethod
    def from_evaluation(cls, ev: Evaluation, W, r: float) -> "QpData":
        return cls(len(ev.x), np.asarray(W, dtype=float), ev.grad_f, ev.g, ev.grad_g, ev.h, ev.grad_h, float(r))

    @property
    def ineq_rows(self):
        return list(zip(self.g.tolist(), self.grad_g))

    @property
    def eq_rows(self):
        return list(zip(self.h.tolist(), self.grad_h))

    @property
    def p(self) -> int:
        return len(self.g)

    @property
    def n_eq(self) -> int:
        return len(self.h)

    def trivial_point(self):
        """The always-feasible point ``(0, max{0, g, |h|})``."""
        xi = max(0.0, np.max(self.g, initial=0.0), np.max(np.abs(self.h), initial=0.0))
        return np.zeros(self.n), xi

    def objective(self, d, xi) -> float:
        return float(self.grad_f @ d + 0.5 * d @ self.W @ d + self.r * xi)

    def constraint_matrix(self):
        """Rows ``A z <= b`` over ``z = (d, xi)``: g, h+, h-, then xi >= 0."""
        n, p, ne = self.n, self.p, self.n_eq
        A = np.zeros((p + 2 * ne + 1, n + 1))
        A[:p, :n] = self.grad_g
        A[p:p + ne, :n] = self.grad_h
        A[p + ne:p + 2 * ne, :n] = -self.grad_h
        A[:, n] = -1.0
        b = np.concatenate([-self.g, -self.h, self.h, [0.0]])
        return A, b


@dataclass
class QpSolution:
    d: np.ndarray
    xi: float
    lam_g: np.ndarray
    lam_plus: np.ndarray
    lam_minus: np.ndarray
    lam_xi: float
    kkt_residual: float
    objective: float = np.nan
    iterations: int = 0
    polished: bool = False

    @property
    def multipliers(self) -> np.ndarray:
        return np.concatenate([self.lam_g, self.lam_plus, self.lam_minus, [self.lam_xi]])


@dataclass
class KktResiduals:
    stationarity: float
    balance: float
    ineq: float
    eq_plus: float
    eq_minus: float
    xi: float

    def max(self) -> float:
        return max(self.stationarity, self.balance, self.ineq, self.eq_plus, self.eq_minus, self.xi)

    def as_dict(self):
        return dict(self.__dict__)


def assemble_qp(prob: ProblemInstance, x, rho: float, W, r: float) -> QpData:
    if not (rho > 0 and r > 0):
        raise ValueError("rho and r must be positive")
    return QpData.from_evaluation(evaluate(prob, x, rho), W, r)


def _complementarity(lam, slack) -> float:
    # slack is the constraint value, feasible when <= 0
    if lam.size == 0:
        return 0.0
    comp = np.abs(np.minimum(lam, -slack))
    return float(np.max(np.maximum.reduce([comp, np.maximum(slack, 0.0), np.maximum(-lam, 0.0)])))


def kkt_residuals(qp: QpData, sol: QpSolution) -> KktResiduals:
    d, xi = sol.d, sol.xi
    stat = qp.grad_f + qp.W @ d
    if qp.p:
        stat = stat + qp.grad_g.T @ sol.lam_g
    if qp.n_eq:
        stat = stat + qp.grad_h.T @ (sol.lam_plus - sol.lam_minus)
    balance = qp.r - (sol.lam_g.sum() + sol.lam_plus.sum() + sol.lam_minus.sum() + sol.lam_xi)
    lin_h = qp.h + (qp.grad_h @ d if qp.n_eq else 0.0)
    return KktResiduals(
        stationarity=float(np.max(np.abs(stat), initial=0.0)),
        balance=abs(float(balance)),
        ineq=_complementarity(sol.lam_g, qp.g + (qp.grad_g @ d if qp.p else 0.0) - xi),
        eq_plus=_complementarity(sol.lam_plus, lin_h - xi),
        eq_minus=_complementarity(sol.lam_minus, -lin_h - xi),
        xi=_complementarity(np.array([sol.lam_xi]), np.array([-xi])),
    )


def _check_spd(W):
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise QpMatrixError(f"W must be square, got shape {W.shape}")
    if np.max(np.abs(W - W.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(W))):
        raise QpMatrixError("W is not symmetric")
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError as exc:
        raise QpMatrixError("W is not positive definite") from exc


def _unpack(qp: QpData, z, lam, iterations=0, polished=False) -> QpSolution:
    n, p, ne = qp.n, qp.p, qp.n_eq
    lam = np.maximum(lam, 0.0)
    sol = QpSolution(
        d=z[:n].copy(),
        xi=max(float(z[n]), 0.0),
        lam_g=lam[:p].copy(),
        lam_plus=lam[p:p + ne].copy(),
        lam_minus=lam[p + ne:p + 2 * ne].copy(),
        lam_xi=float(lam[-1]),
        kkt_residual=np.inf,
        iterations=iterations,
        polished=polished,
    )
    sol.kkt_residual = kkt_residuals(qp, sol).max()
    sol.objective = qp.objective(sol.d, sol.xi)
    return sol


def _polish(qp: QpData, H, c, A, b, active):
    """Solve the equality-constrained KKT system on ``active`` exactly."""
    N = H.shape[0]
    active = np.array(active, dtype=bool)
    for _ in range(4):
        Aa = A[active]
        k = Aa.shape[0]
        K = np.zeros((N + k, N + k))
        K[:N, :N] = H
        K[:N, N:] = Aa.T
        K[N:, :N] = Aa
        rhs = np.concatenate([-c, b[active]])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        z, lam_a = sol[:N], sol[N:]
        neg = lam_a < 0
        if not neg.any():
            lam = np.zeros(A.shape[0])
            lam[active] = lam_a
            return z, lam
        idx = np.flatnonzero(active)
        active[idx[neg]] = False
    return None


def solve_penalized_qp(qp: QpData, tol: float = KKT_TOL, max_iter: int = MAX_ITER) -> QpSolution:
    """Minimize the elastic QP and return primal-dual values.

    The reported ``kkt_residual`` is absolute; acceptance compares it with
    ``tol`` times the data scale ``max(1, r, |grad_f|, |g|, |h|)`` because
    multipliers grow with the penalty parameter.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check_spd(qp.W)
    n = qp.n
    A, b = qp.constraint_matrix()
    d0, xi0 = qp.trivial_point()
    z0 = np.append(d0, xi0 + 1.0)
    assert np.all(A @ np.append(d0, xi0) <= b + 1e-12 * (1 + np.abs(b))), "trivial point infeasible"

    H = np.zeros((n + 1, n + 1))
    H[:n, :n] = qp.W
    c = np.append(qp.grad_f, qp.r)
    H_reg = H.copy()
    H_reg[n, n] = XI_REG

    scale = max(1.0, qp.r, np.max(np.abs(qp.grad_f), initial=0.0),
                np.max(np.abs(qp.g), initial=0.0), np.max(np.abs(qp.h), initial=0.0))
    z, lam, s, iters, _ = ipm_core(H_reg, c, A, b, z0, 1e-13, max_iter)
    best = _unpack(qp, z, lam, iters)

    polished = _polish(qp, H, c, A, b, s <= lam)
    if polished is not None:
        cand = _unpack(qp, polished[0], polished[1], iters, polished=True)
        if cand.kkt_residual <= best.kkt_residual:
            best = cand

    if not np.isfinite(best.kkt_residual) or best.kkt_residual > tol * scale:
        raise QpSolverError(
            f"QP not solved to tolerance: residual {best.kkt_residual:.3e} after {iters} iterations",
            best=best,
            residual=best.kkt_residual,
        )
    return best


def solve_from_problem(prob: ProblemInstance, x, rho, W, r, tol: float = KKT_TOL) -> QpSolution:
    return solve_penalized_qp(assemble_qp(prob, x, rho, W, r), tol)


def trivial_feasible(qp: QpData, sol: Optional[QpSolution] = None) -> bool:
    """Check that ``(0, max{0, g, |h|})`` (or ``sol``) satisfies every row."""
    A, b = qp.constraint_matrix()
    if sol is None:
        d, xi = qp.trivial_point()
    else:
        d, xi = sol.d, sol.xi
    return bool(np.all(A @ np.append(d, xi) <= b + 1e-12 * (1 + np.abs(b))))
