"""Nonsmooth programs, smoothing families and the exact-penalty merit function.

The program is

    min f(x)  s.t.  g_i(x) <= 0 (i < p),  h_j(x) = 0 (j < q - p)

where every function is handed to the solver as a smoothing family
``{g_rho : rho > 0}`` with closed-form value and gradient in ``(x, rho)``.
A smooth function is its own (rho-independent) family.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

ACT_TOL = 1e-12


class EvaluationError(ArithmeticError):
    """A smoothing family returned a non-finite value or gradient."""

    def __init__(self, name: str, x, rho: float):
        self.name = name
        self.x = np.array(x, dtype=float)
        self.rho = rho
        super().__init__(f"non-finite evaluation of {name!r} at x={self.x.tolist()}, rho={rho:g}")


@dataclass(frozen=True)
class SmoothedFunction:
    """A family ``g_rho`` of continuously differentiable approximations.

    ``value_at(x, rho)`` and ``gradient_at(x, rho)`` must be reentrant.
    ``base_value_at(x)`` evaluates the underlying nonsmooth function when
    that is possible (exactly or through a trusted surrogate).
    """

    dimension: int
    value_at: Callable[[np.ndarray, float], float]
    gradient_at: Callable[[np.ndarray, float], np.ndarray]
    base_value_at: Optional[Callable[[np.ndarray], float]] = None
    name: str = "fn"

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")

    @classmethod
    def smooth(cls, value, gradient, dimension: int, name: str = "fn") -> "SmoothedFunction":
        """Wrap an already smooth function as a rho-independent family."""
        return cls(
            dimension=dimension,
            value_at=lambda x, rho: value(x),
            gradient_at=lambda x, rho: gradient(x),
            base_value_at=value,
            name=name,
        )

    def value(self, x, rho: float) -> float:
        v = float(self.value_at(x, rho))
        if not np.isfinite(v):
            raise EvaluationError(self.name, x, rho)
        return v

    def gradient(self, x, rho: float) -> np.ndarray:
        g = np.asarray(self.gradient_at(x, rho), dtype=float).reshape(self.dimension)
        if not np.all(np.isfinite(g)):
            raise EvaluationError(self.name, x, rho)
        return g

    def base_value(self, x, rho_fallback: Optional[float] = None) -> float:
        """Exact value if available, else the smoothed value at ``rho_fallback``."""
        if self.base_value_at is not None:
            return float(self.base_value_at(x))
        if rho_fallback is None:
            raise ValueError(f"{self.name!r} has no base value")
        return self.value(x, rho_fallback)


@dataclass
class ProblemInstance:
    n: int
    objective: SmoothedFunction
    inequalities: Sequence[SmoothedFunction] = field(default_factory=list)
    equalities: Sequence[SmoothedFunction] = field(default_factory=list)
    name: str = "problem"

    def __post_init__(self):
        self.inequalities = list(self.inequalities)
        self.equalities = list(self.equalities)
        for fn in [self.objective, *self.inequalities, *self.equalities]:
            if fn.dimension != self.n:
                raise ValueError(
                    f"family {fn.name!r} has dimension {fn.dimension}, problem has {self.n}"
                )

    @property
    def p(self) -> int:
        return len(self.inequalities)

    @property
    def n_eq(self) -> int:
        return len(self.equalities)

    @property
    def has_constraints(self) -> bool:
        return bool(self.inequalities or self.equalities)


@dataclass(frozen=True)
class MeritParams:
    rho: float
    r: float

    def __post_init__(self):
        if not (self.rho > 0 and self.r > 0):
            raise ValueError(f"merit parameters must be positive, got rho={self.rho}, r={self.r}")


@dataclass
class Evaluation:
    """All smoothed values and gradients of a problem at one ``(x, rho)``."""

    x: np.ndarray
    rho: float
    f: float
    grad_f: np.ndarray
    g: np.ndarray
    grad_g: np.ndarray  # (p, n)
    h: np.ndarray
    grad_h: np.ndarray  # (q - p, n)

    @property
    def phi(self) -> float:
        return constraint_violation(self.g, self.h)


def evaluate(prob: ProblemInstance, x, rho: float, gradients: bool = True) -> Evaluation:
    x = np.asarray(x, dtype=float)
    n = prob.n
    g = np.array([fn.value(x, rho) for fn in prob.inequalities], dtype=float)
    h = np.array([fn.value(x, rho) for fn in prob.equalities], dtype=float)
    if gradients:
        grad_f = prob.objective.gradient(x, rho)
        grad_g = np.array([fn.gradient(x, rho) for fn in prob.inequalities]).reshape(-1, n)
        grad_h = np.array([fn.gradient(x, rho) for fn in prob.equalities]).reshape(-1, n)
    else:
        grad_f = np.full(n, np.nan)
        grad_g = np.full((prob.p, n), np.nan)
        grad_h = np.full((prob.n_eq, n), np.nan)
    return Evaluation(x, rho, prob.objective.value(x, rho), grad_f, g, grad_g, h, grad_h)


def constraint_violation(g, h) -> float:
    """``max{0, g_i, |h_j|}``."""
    return float(max(0.0, np.max(g, initial=0.0), np.max(np.abs(h), initial=0.0)))


def merit_value(prob: ProblemInstance, x, mp: MeritParams) -> float:
    ev = evaluate(prob, x, mp.rho, gradients=False)
    if not prob.has_constraints:
        return ev.f
    return ev.f + mp.r * ev.phi


def _violation_derivative(g, grad_g, h, grad_h, d, act_tol=ACT_TOL) -> float:
    phi = constraint_violation(g, h)
    tol = act_tol * max(1.0, phi)
    gd = grad_g @ d if len(g) else np.zeros(0)
    hd = grad_h @ d if len(h) else np.zeros(0)
    if phi <= tol:
        active_g = g >= -tol
        active_h = np.abs(h) <= tol
        if not (active_g.any() or active_h.any()):
            return 0.0
        return float(max(0.0, np.max(gd[active_g], initial=0.0), np.max(np.abs(hd[active_h]), initial=0.0)))
    terms = [gd[np.abs(g - phi) <= tol], hd[np.abs(h - phi) <= tol], -hd[np.abs(-h - phi) <= tol]]
    return float(np.max(np.concatenate(terms)))


def merit_directional_derivative(prob: ProblemInstance, x, d, mp: MeritParams, act_tol: float = ACT_TOL) -> float:
    """One-sided derivative of the merit function at ``x`` along ``d``.

    Uses the active-set formula for ``max{0, g_i, |h_j|}``: zero when no
    constraint is active at a feasible point, ``max{0, g_i'd, |h_j'd|}`` over
    the active indices when feasible, and the max of the active directional
    derivatives (``-h_j'd`` for ``h_j = -phi``) when infeasible.
    """
    d = np.asarray(d, dtype=float)
    ev = evaluate(prob, x, mp.rho)
    out = float(ev.grad_f @ d)
    if prob.has_constraints:
        out += mp.r * _violation_derivative(ev.g, ev.grad_g, ev.h, ev.grad_h, d, act_tol)
    return out


@dataclass
class GradientCheckReport:
    max_abs_error: float
    per_coordinate: np.ndarray
    gradient: np.ndarray
    fd_gradient: np.ndarray

    def ok(self, tol: float) -> bool:
        return self.max_abs_error <= tol * max(1.0, float(np.linalg.norm(self.gradient)))


def fd_gradient_check(fn: SmoothedFunction, x, rho: float, step: float = 1e-6) -> GradientCheckReport:
    """Compare ``fn.gradient_at`` with central differences of ``fn.value_at`` at fixed rho."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    grad = fn.gradient(x, rho)
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        fd[i] = (fn.value(x + e, rho) - fn.value(x - e, rho)) / (2 * step)
    err = np.abs(grad - fd)
    return GradientCheckReport(float(err.max(initial=0.0)), err, grad, fd)
