"""Named test problems with default solver settings and known solutions."""

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.optimize import brentq

from smoothsqp.bilevel import BilevelProblem
from smoothsqp.problem import ProblemInstance, SmoothedFunction


class RegistryError(KeyError):
    pass


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    build: Callable[[], Union[ProblemInstance, BilevelProblem]]
    x0: tuple
    solver_defaults: dict = field(default_factory=dict)
    reference: Optional[tuple] = None
    reference_objective: Optional[float] = None
    description: str = ""


# -- bilevel examples ------------------------------------------------------


def _mirrlees() -> BilevelProblem:
    def f(x, ys):
        y = ys[:, 0]
        return -x[0] * np.exp(-(y + 1) ** 2) - np.exp(-(y - 1) ** 2)

    def grad_x_f(x, ys):
        return -np.exp(-(ys[:, :1] + 1) ** 2)

    def grad_y_f(x, y):
        y = y[0]
        return np.array([2 * x[0] * (y + 1) * np.exp(-(y + 1) ** 2) + 2 * (y - 1) * np.exp(-(y - 1) ** 2)])

    def jac_grad_y_f(x, y):
        y = y[0]
        a, b = np.exp(-(y + 1) ** 2), np.exp(-(y - 1) ** 2)
        return np.array([[2 * (y + 1) * a, 2 * x[0] * a * (1 - 2 * (y + 1) ** 2) + 2 * b * (1 - 2 * (y - 1) ** 2)]])

    return BilevelProblem(
        n=1, m=1, lower=(-2.0,), upper=(2.0,),
        F=lambda x, y: (x[0] - 2) ** 2 + (y[0] - 1) ** 2,
        grad_F=lambda x, y: np.array([2 * (x[0] - 2), 2 * (y[0] - 1)]),
        f=f, grad_x_f=grad_x_f, grad_y_f=grad_y_f, jac_grad_y_f=jac_grad_y_f,
        name="mirrlees",
    )


def mirrlees_y() -> float:
    """Positive root of ``(1 + y) = (1 - y) exp(4y)``."""
    return brentq(lambda y: (1 + y) - (1 - y) * np.exp(4 * y), 0.5, 0.999, xtol=1e-15)


def _ex3_14() -> BilevelProblem:
    return BilevelProblem(
        n=1, m=1, lower=(-1.0,), upper=(1.0,),
        F=lambda x, y: (x[0] - 0.25) ** 2 + y[0] ** 2,
        grad_F=lambda x, y: np.array([2 * (x[0] - 0.25), 2 * y[0]]),
        f=lambda x, ys: ys[:, 0] ** 3 / 3 - x[0] * ys[:, 0],
        grad_x_f=lambda x, ys: -ys[:, :1],
        grad_y_f=lambda x, y: np.array([y[0] ** 2 - x[0]]),
        jac_grad_y_f=lambda x, y: np.array([[-1.0, 2 * y[0]]]),
        name="ex3_14",
    )


def _ex3_20() -> BilevelProblem:
    return BilevelProblem(
        n=1, m=1, lower=(-1.0,), upper=(1.0,),
        F=lambda x, y: (x[0] - 0.25) ** 2 + y[0] ** 2,
        grad_F=lambda x, y: np.array([2 * (x[0] - 0.25), 2 * y[0]]),
        f=lambda x, ys: ys[:, 0] ** 3 / 3 - x[0] ** 2 * ys[:, 0],
        grad_x_f=lambda x, ys: -2 * x[0] * ys[:, :1],
        grad_y_f=lambda x, y: np.array([y[0] ** 2 - x[0] ** 2]),
        jac_grad_y_f=lambda x, y: np.array([[-2 * x[0], 2 * y[0]]]),
        name="ex3_20",
    )


# -- synthetic problems ----------------------------------------------------


def _halfline() -> ProblemInstance:
    """min (x - 1)^2  s.t.  x <= 0."""
    return ProblemInstance(
        1,
        SmoothedFunction.smooth(lambda x: (x[0] - 1) ** 2, lambda x: np.array([2 * (x[0] - 1)]), 1, "obj"),
        [SmoothedFunction.smooth(lambda x: x[0], lambda x: np.array([1.0]), 1, "x<=0")],
        name="halfline",
    )


def _unconstrained() -> ProblemInstance:
    return ProblemInstance(
        2, SmoothedFunction.smooth(lambda x: float(x @ x), lambda x: 2 * x, 2, "sumsq"), name="unconstrained"
    )


def _l1_ball() -> ProblemInstance:
    """min (x1 - 2)^2 + (x2 - 1)^2  s.t.  |x1| + |x2| <= 1, smoothed by sqrt(t^2 + rho^-2)."""

    def value(x, rho):
        return float(np.sum(np.sqrt(x**2 + rho**-2)) - 1.0)

    def grad(x, rho):
        return x / np.sqrt(x**2 + rho**-2)

    ball = SmoothedFunction(2, value, grad, base_value_at=lambda x: float(np.abs(x).sum() - 1.0), name="|x|_1<=1")
    obj = SmoothedFunction.smooth(
        lambda x: (x[0] - 2) ** 2 + (x[1] - 1) ** 2, lambda x: np.array([2 * (x[0] - 2), 2 * (x[1] - 1)]), 2, "obj"
    )
    return ProblemInstance(2, obj, [ball], name="l1_ball")


def _abs_circle() -> ProblemInstance:
    """min x1 + x2  s.t.  x1^2 + x2^2 = 1 and |x1 - x2| <= 0.5 (smoothed)."""

    def value(x, rho):
        t = x[0] - x[1]
        return float(np.sqrt(t * t + rho**-2) - 0.5)

    def grad(x, rho):
        t = x[0] - x[1]
        s = t / np.sqrt(t * t + rho**-2)
        return np.array([s, -s])

    band = SmoothedFunction(2, value, grad, base_value_at=lambda x: abs(x[0] - x[1]) - 0.5, name="|x1-x2|<=.5")
    circle = SmoothedFunction.smooth(lambda x: float(x @ x - 1.0), lambda x: 2 * x, 2, "circle")
    obj = SmoothedFunction.smooth(lambda x: float(x[0] + x[1]), lambda x: np.ones(2), 2, "sum")
    return ProblemInstance(2, obj, [band], [circle], name="abs_circle")


_SYNTHETIC_DEFAULTS = dict(
    beta=0.8, sigma1=1e-6, rho0=10.0, r0=10.0, eta_hat=50.0, sigma=10.0, sigma_prime=10.0,
    eps=1e-6, eps_prime=1e-8, eps1=1e-9,
)

REGISTRY = {
    e.name: e
    for e in [
        RegistryEntry(
            "mirrlees", _mirrlees, (0.5, 0.3),
            dict(beta=0.8, sigma1=1e-6, sigma2=1e-6, rho0=100.0, r0=100.0, eta_hat=5e5, sigma=10.0,
                 sigma_prime=10.0, eps=7e-5, eps_prime=1e-8, eps1=1e-6),
            reference=None,  # filled below from the root of (1+y) = (1-y)e^{4y}
            description="Mirrlees principal-agent problem, Y = [-2, 2]",
        ),
        RegistryEntry(
            "ex3_14", _ex3_14, (0.3, 0.3),
            dict(beta=0.9, sigma1=1e-6, sigma2=1e-6, rho0=100.0, r0=100.0, eta_hat=5000.0, sigma=10.0,
                 sigma_prime=10.0, eps=5e-6, eps_prime=1e-8, eps1=5e-6),
            reference=(0.25, 0.5), reference_objective=0.25,
            description="F = (x-1/4)^2 + y^2, f = y^3/3 - xy, Y = [-1, 1]",
        ),
        RegistryEntry(
            "ex3_20", _ex3_20, (0.3, 0.3),
            dict(beta=0.9, sigma1=1e-6, sigma2=1e-6, rho0=100.0, r0=100.0, eta_hat=500.0, sigma=10.0,
                 sigma_prime=10.0, eps=1e-6, eps_prime=1e-8, eps1=1e-6),
            reference=(0.5, 0.5), reference_objective=5 / 16,
            description="F = (x-1/4)^2 + y^2, f = y^3/3 - x^2 y, Y = [-1, 1]",
        ),
        RegistryEntry("halfline", _halfline, (1.0,), _SYNTHETIC_DEFAULTS, reference=(0.0,),
                      reference_objective=1.0, description="min (x-1)^2 s.t. x <= 0"),
        RegistryEntry("unconstrained", _unconstrained, (5.0, 5.0), _SYNTHETIC_DEFAULTS, reference=(0.0, 0.0),
                      reference_objective=0.0, description="min |x|^2"),
        RegistryEntry("l1_ball", _l1_ball, (0.0, 0.0), _SYNTHETIC_DEFAULTS, reference=(1.0, 0.0),
                      reference_objective=2.0, description="projection of (2, 1) on the l1 unit ball"),
        RegistryEntry("abs_circle", _abs_circle, (-0.5, -0.9), _SYNTHETIC_DEFAULTS,
                      reference=(-np.sqrt(0.5), -np.sqrt(0.5)), reference_objective=-np.sqrt(2.0),
                      description="min x1 + x2 on the unit circle with |x1 - x2| <= 1/2"),
    ]
}

_my = mirrlees_y()
REGISTRY["mirrlees"] = RegistryEntry(
    **{**REGISTRY["mirrlees"].__dict__, "reference": (1.0, _my),
       "reference_objective": (1.0 - 2) ** 2 + (_my - 1) ** 2}
)

BILEVEL = ("mirrlees", "ex3_14", "ex3_20")


def registry_lookup(name: str) -> RegistryEntry:
    try:
        return REGISTRY[name]
    except KeyError:
        raise RegistryError(f"unknown problem {name!r}; available: {', '.join(sorted(REGISTRY))}") from None


def list_problems():
    return sorted(REGISTRY)
