"""Simple bilevel programs through the combined value-function program.

For ``min F(x, y)  s.t.  y in argmin_{y' in Y} f(x, y')`` with a box ``Y``,
the solver works on

    min F(x, y)  s.t.  f(x, y) - V(x) <= 0,  grad_y f(x, y) = 0

where ``V(x) = min_Y f(x, .)`` is replaced by its integral entropy smoothing

    gamma_rho(x) = -1/rho * log( int_Y exp(-rho f(x, y)) dy ),
    grad gamma_rho(x) = E_rho[grad_x f(x, Y)]  (Boltzmann average over Y).

The integrals are sharply peaked for large ``rho``. They are evaluated on
tensor Gauss-Legendre cells, seeded with geometric breakpoints around every
near-optimal lower-level minimizer and refined by adaptive bisection, after
shifting the exponent by the smallest sampled value of ``f``.
"""

import functools
import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize
from scipy.ndimage import minimum_filter

from smoothsqp.kernels import boltzmann_sums
from smoothsqp.problem import ProblemInstance, SmoothedFunction

logger = logging.getLogger(__name__)

RHO_CAP = 1e12
# peaks whose minimum lies more than this many units of 1/rho above the
# global one carry relative weight below exp(-60) and are ignored
PEAK_WINDOW = 60.0
EPS = np.finfo(float).eps
NOISE_FACTOR = 32.0


class QuadratureError(ArithmeticError):
    def __init__(self, message, estimate=np.nan, error_bound=np.inf):
        super().__init__(message)
        self.estimate = estimate
        self.error_bound = error_bound


class RhoCapError(QuadratureError):
    pass


@dataclass(frozen=True)
class BilevelProblem:
    """Upper objective ``F`` and lower objective ``f`` over ``R^n x Y``.

    ``f`` and ``grad_x_f`` are vectorized over lower-level points: they take
    ``x`` of shape (n,) and ``ys`` of shape (N, m) and return (N,) and (N, n).
    ``grad_y_f(x, y)`` returns (m,) and ``jac_grad_y_f(x, y)`` the (m, n+m)
    Jacobian of ``grad_y f`` with respect to ``(x, y)``.
    """

    n: int
    m: int
    lower: tuple
    upper: tuple
    F: Callable
    grad_F: Callable
    f: Callable
    grad_x_f: Callable
    grad_y_f: Callable
    jac_grad_y_f: Callable
    name: str = "bilevel"

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != (self.m,) or hi.shape != (self.m,):
            raise ValueError("box bounds must have length m")
        if not np.all(lo < hi):
            raise ValueError("box must satisfy lower < upper in every coordinate")

    @property
    def box(self):
        return np.asarray(self.lower, float), np.asarray(self.upper, float)

    def split(self, z):
        z = np.asarray(z, dtype=float)
        return z[: self.n], z[self.n:]

    def f_at(self, x, y) -> float:
        return float(self.f(np.asarray(x, float), np.asarray(y, float).reshape(1, self.m))[0])


@dataclass(frozen=True)
class QuadratureConfig:
    base_nodes_per_dim: int = 200
    refinement: int = 12
    quad_tol: float = 1e-10
    rule_points: int = 16
    # geometric ratio between successive breakpoints around a peak
    peak_ratio: float = 2.0

    def __post_init__(self):
        if min(self.base_nodes_per_dim, self.refinement, self.rule_points) < 1 or self.quad_tol <= 0:
            raise ValueError("quadrature settings must be positive")


def _grid(bp: BilevelProblem, per_dim: int):
    lo, hi = bp.box
    axes = [np.linspace(lo[d], hi[d], per_dim) for d in range(bp.m)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return axes, np.stack([g.ravel() for g in mesh], axis=1)


def _polish(bp: BilevelProblem, x, y0, radius):
    """Local minimization of ``f(x, .)`` in ``Y`` near ``y0``."""
    lo, hi = bp.box
    a = np.maximum(y0 - radius, lo)
    b = np.minimum(y0 + radius, hi)
    if bp.m == 1:
        res = optimize.minimize_scalar(
            lambda t: bp.f_at(x, [t]), bounds=(a[0], b[0]), method="bounded",
            options={"xatol": 1e-13 * max(1.0, abs(y0[0]))},
        )
        y = np.array([res.x])
    else:
        res = optimize.minimize(
            lambda t: bp.f_at(x, t), y0, jac=lambda t: bp.grad_y_f(x, t),
            method="L-BFGS-B", bounds=list(zip(a, b)), options={"ftol": 1e-15, "gtol": 1e-12},
        )
        y = np.clip(res.x, lo, hi)
    # bounded Brent never evaluates the endpoints
    cands = [y0, y, a.copy(), b.copy()]
    vals = [bp.f_at(x, c) for c in cands]
    k = int(np.argmin(vals))
    return cands[k], vals[k]


def value_function_oracle(bp: BilevelProblem, x, grid_per_dim: int = 100_001):
    """Brute-force ``V(x) = min_Y f(x, .)`` by a dense grid plus local polish.

    Returns ``(V, argmin)``.
    """
    if grid_per_dim < 2:
        raise ValueError("grid_per_dim must be at least 2")
    x = np.asarray(x, dtype=float)
    lo, hi = bp.box
    per_dim = grid_per_dim if bp.m == 1 else min(grid_per_dim, 2001)
    _, pts = _grid(bp, per_dim)
    vals = bp.f(x, pts)
    k = int(np.argmin(vals))
    h = (hi - lo) / (per_dim - 1)
    y, v = _polish(bp, x, pts[k], h)
    return float(v), y


def check_interiority(bp: BilevelProblem, x, margin: float = 0.1, grid_per_dim: int = 100_001) -> bool:
    """Whether the lower-level minimizer at ``x`` sits ``margin`` inside ``Y``."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    _, y = value_function_oracle(bp, x, grid_per_dim)
    lo, hi = bp.box
    return bool(np.min(np.minimum(y - lo, hi - y)) >= margin)


@functools.lru_cache(maxsize=8)
def _gauss_legendre(points: int, m: int):
    t, w = np.polynomial.legendre.leggauss(points)
    nodes = np.array(list(itertools.product(t, repeat=m)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=m))), axis=1)
    return nodes, weights


@dataclass
class EntropyResult:
    gamma: float
    grad: np.ndarray
    shift: float
    log_integral: float  # log of the shifted integral
    error_bound: float
    n_cells: int
    peaks: list = field(default_factory=list)


class EntropySmoothing:
    """Evaluates ``gamma_rho`` and its gradient for one bilevel problem.

    Results are memoized per ``(x, rho)`` because value and gradient are
    requested together, repeatedly, along line searches.
    """

    def __init__(self, bp: BilevelProblem, qc: Optional[QuadratureConfig] = None, cache_size: int = 512):
        self.bp = bp
        self.qc = qc or QuadratureConfig(base_nodes_per_dim=200 if bp.m == 1 else 40)
        self._lock = threading.Lock()
        self._cache = {}
        self._cache_size = cache_size

    def evaluate(self, x, rho: float) -> EntropyResult:
        x = np.ascontiguousarray(x, dtype=float).reshape(self.bp.n)
        key = (x.tobytes(), float(rho))
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        res = self._integrate(x, float(rho))
        with self._lock:
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = res
        return res

    def value(self, x, rho: float) -> float:
        return self.evaluate(x, rho).gamma

    def gradient(self, x, rho: float) -> np.ndarray:
        return self.evaluate(x, rho).grad.copy()

    # -- internals ---------------------------------------------------------

    def _locate_minima(self, x, rho):
        bp, qc = self.bp, self.qc
        lo, hi = bp.box
        axes, pts = _grid(bp, qc.base_nodes_per_dim)
        vals = bp.f(x, pts)
        shape = (qc.base_nodes_per_dim,) * bp.m
        grid_vals = vals.reshape(shape)
        is_min = grid_vals == minimum_filter(grid_vals, size=3, mode="nearest")
        h = (hi - lo) / (qc.base_nodes_per_dim - 1)
        cands = pts[is_min.ravel()]
        cand_vals = vals[is_min.ravel()]
        # only candidates that can come within the window after polishing
        order = np.argsort(cand_vals)[:32]
        polished = [_polish(bp, x, cands[i], h) for i in order]
        best = min(v for _, v in polished)
        peaks = []
        for y, v in polished:
            if v <= best + PEAK_WINDOW / rho and not any(np.allclose(y, q, rtol=0, atol=1e-12) for q, _ in peaks):
                peaks.append((y, v))
        return peaks, min(best, float(vals.min()))

    def _peak_widths(self, x, y, rho):
        bp = self.bp
        lo, hi = bp.box
        span = hi - lo
        widths = np.empty(bp.m)
        f0 = bp.f_at(x, y)
        for d in range(bp.m):
            e = np.zeros(bp.m)
            step = 1e-4 * span[d]
            e[d] = step
            up, dn = y + e, y - e
            if up[d] > hi[d]:
                up, dn = y - e, y - 2 * e
                slope = (f0 - bp.f_at(x, up)) / step
                curv = (f0 - 2 * bp.f_at(x, up) + bp.f_at(x, dn)) / step**2
            elif dn[d] < lo[d]:
                up, dn = y + e, y + 2 * e
                slope = (bp.f_at(x, up) - f0) / step
                curv = (f0 - 2 * bp.f_at(x, up) + bp.f_at(x, dn)) / step**2
            else:
                fu, fd = bp.f_at(x, up), bp.f_at(x, dn)
                slope = (fu - fd) / (2 * step)
                curv = (fu - 2 * f0 + fd) / step**2
            w = 1.0 / np.sqrt(rho * max(curv, 1e-12))
            if abs(slope) > 0:
                w = min(w, 1.0 / (rho * abs(slope)))
            widths[d] = max(w, 1e-13 * span[d])
        return widths

    def _breakpoints(self, x, peaks, rho):
        bp, qc = self.bp, self.qc
        lo, hi = bp.box
        n_base = max(1, int(np.ceil(qc.base_nodes_per_dim / qc.rule_points)))
        ratio = qc.peak_ratio if bp.m == 1 else max(qc.peak_ratio, 4.0)
        per_dim = []
        for d in range(bp.m):
            pts = list(np.linspace(lo[d], hi[d], n_base + 1))
            per_dim.append(pts)
        for y, _ in peaks:
            widths = self._peak_widths(x, y, rho)
            for d in range(bp.m):
                span = hi[d] - lo[d]
                s = span / ratio
                floor = 0.1 * widths[d]
                per_dim[d].append(y[d])
                while s >= floor:
                    per_dim[d].extend([y[d] - s, y[d] + s])
                    s /= ratio
        out = []
        for d in range(bp.m):
            b = np.clip(np.array(per_dim[d]), lo[d], hi[d])
            b = np.unique(b)
            keep = np.concatenate([[True], np.diff(b) > 1e-14 * (hi[d] - lo[d])])
            b = b[keep]
            b[-1] = hi[d]
            out.append(b)
        return out

    def _cells_from_breakpoints(self, bps):
        lows = np.array(list(itertools.product(*[b[:-1] for b in bps])))
        highs = np.array(list(itertools.product(*[b[1:] for b in bps])))
        return lows, highs

    def _children(self, lo, hi):
        m = self.bp.m
        mid = 0.5 * (lo + hi)
        corners = np.array(list(itertools.product((0, 1), repeat=m)))  # (2^m, m)
        clo = np.where(corners[None] == 0, lo[:, None, :], mid[:, None, :])
        chi = np.where(corners[None] == 0, mid[:, None, :], hi[:, None, :])
        return clo.reshape(-1, m), chi.reshape(-1, m)

    def _eval_cells(self, x, lo, hi):
        """Node values of f, grad_x f and weights for each cell."""
        nodes, weights = _gauss_legendre(self.qc.rule_points, self.bp.m)
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        pts = mid[:, None, :] + half[:, None, :] * nodes[None]  # (C, K, m)
        C, K, m = pts.shape
        flat = pts.reshape(C * K, m)
        fv = np.asarray(self.bp.f(x, flat), dtype=float).reshape(C, K)
        gx = np.asarray(self.bp.grad_x_f(x, flat), dtype=float).reshape(C, K, self.bp.n)
        w = weights[None, :] * np.prod(half, axis=1)[:, None]
        return fv, gx, w

    def _integrate(self, x, rho) -> EntropyResult:
        if not rho > 0:
            raise ValueError("rho must be positive")
        if rho > RHO_CAP:
            raise RhoCapError(f"rho={rho:g} exceeds the quadrature cap {RHO_CAP:g}")
        bp, qc = self.bp, self.qc
        n, m = bp.n, bp.m
        nchild = 2**m
        peaks, shift = self._locate_minima(x, rho)
        lo, hi = self._cells_from_breakpoints(self._breakpoints(x, peaks, rho))
        depth = 0

        acc_I, acc_G, acc_err = 0.0, np.zeros(n), 0.0
        n_cells = 0
        while True:
            fp, gp, wp = self._eval_cells(x, lo, hi)
            clo, chi = self._children(lo, hi)
            fc, gc, wc = self._eval_cells(x, clo, chi)
            new_min = min(fp.min(), fc.min())
            if new_min < shift:
                # rescale everything accumulated so far to the lower shift
                factor = np.exp(-rho * (shift - new_min))
                acc_I *= factor
                acc_G = acc_G * factor
                acc_err *= factor
                shift = new_min
            Ip, Gp = boltzmann_sums(fp, gp, wp, shift, rho)
            Ic, Gc = boltzmann_sums(fc, gc, wc, shift, rho)
            Ic = Ic.reshape(-1, nchild).sum(axis=1)
            Gc = Gc.reshape(-1, nchild, n).sum(axis=1)
            err = np.abs(Ip - Ic) + np.linalg.norm(Gp - Gc, axis=1)
            # f is known to eps*|f| only, which exp(-rho f) amplifies by rho
            fscale = np.maximum(np.abs(fc).reshape(len(Ic), -1).max(axis=1), abs(shift))
            noise = 1e-14 + NOISE_FACTOR * rho * EPS * fscale
            err = np.where(err <= noise * (np.abs(Ic) + np.linalg.norm(Gc, axis=1)), 0.0, err)
            tol = max(qc.quad_tol, NOISE_FACTOR * rho * EPS * abs(shift))

            total_I = acc_I + Ic.sum()
            total_G = acc_G + Gc.sum(axis=0)
            scale = max(total_I, float(np.linalg.norm(total_G)))
            budget = tol * scale
            total_err = acc_err + err.sum()
            if total_err <= budget:
                acc_I, acc_G, acc_err = total_I, total_G, total_err
                n_cells += len(Ic)
                break
            if depth >= qc.refinement:
                raise QuadratureError(
                    f"adaptive quadrature did not reach tol {tol:g} within {qc.refinement} bisections",
                    estimate=float(shift - np.log(total_I) / rho),
                    error_bound=float(total_err / max(total_I, 1e-300)),
                )
            # split the largest-error cells until the rest fit in half the budget
            order = np.argsort(-err, kind="stable")
            tail = np.cumsum(err[order][::-1])[::-1]  # error left if we stop splitting at i
            remaining_budget = 0.5 * budget - acc_err
            n_split = int(np.argmax(np.append(tail, 0.0) <= max(remaining_budget, 0.0)))
            if n_split == 0:
                n_split = 1
            split = np.zeros(len(err), dtype=bool)
            split[order[:n_split]] = True
            keep = ~split
            acc_I += Ic[keep].sum()
            acc_G = acc_G + Gc[keep].sum(axis=0)
            acc_err += err[keep].sum()
            n_cells += int(keep.sum())
            lo, hi = clo.reshape(-1, nchild, m)[split].reshape(-1, m), chi.reshape(-1, nchild, m)[split].reshape(-1, m)
            depth += 1

        if not (acc_I > 0 and np.isfinite(acc_I)):
            raise QuadratureError("entropy integral underflowed", estimate=np.nan)
        log_i = float(np.log(acc_I))
        return EntropyResult(
            gamma=float(shift - log_i / rho),
            grad=acc_G / acc_I,
            shift=float(shift),
            log_integral=log_i,
            error_bound=float(acc_err / acc_I),
            n_cells=n_cells,
            peaks=[(y.copy(), v) for y, v in peaks],
        )


def gamma(bp: BilevelProblem, x, rho: float, qc: Optional[QuadratureConfig] = None) -> float:
    """Entropy smoothing of the lower-level value function at ``x``."""
    return EntropySmoothing(bp, qc).value(x, rho)


def grad_gamma(bp: BilevelProblem, x, rho: float, qc: Optional[QuadratureConfig] = None) -> np.ndarray:
    return EntropySmoothing(bp, qc).gradient(x, rho)


def build_combined_program(
    bp: BilevelProblem,
    qc: Optional[QuadratureConfig] = None,
    oracle_grid: int = 20_001,
) -> ProblemInstance:
    """Combined program over ``z = (x, y)``.

    One inequality family ``f(x, y) - gamma_rho(x)`` and ``m`` rho-independent
    equality families ``(grad_y f)_j``. The inequality's base value uses the
    grid oracle for ``V``.
    """
    n, m = bp.n, bp.m
    dim = n + m
    smoothing = EntropySmoothing(bp, qc)

    def ineq_value(z, rho):
        x, y = bp.split(z)
        return bp.f_at(x, y) - smoothing.value(x, rho)

    def ineq_grad(z, rho):
        x, y = bp.split(z)
        gx = bp.grad_x_f(x, y.reshape(1, m))[0]
        return np.concatenate([gx - smoothing.gradient(x, rho), bp.grad_y_f(x, y)])

    def ineq_base(z):
        x, y = bp.split(z)
        return bp.f_at(x, y) - value_function_oracle(bp, x, oracle_grid)[0]

    inequality = SmoothedFunction(dim, ineq_value, ineq_grad, ineq_base, name="f-V")

    equalities = []
    for j in range(m):
        def h_val(z, j=j):
            x, y = bp.split(z)
            return float(bp.grad_y_f(x, y)[j])

        def h_grad(z, j=j):
            x, y = bp.split(z)
            return np.asarray(bp.jac_grad_y_f(x, y), dtype=float)[j]

        equalities.append(SmoothedFunction.smooth(h_val, h_grad, dim, name=f"grad_y f[{j}]"))

    objective = SmoothedFunction.smooth(
        lambda z: float(bp.F(*bp.split(z))),
        lambda z: np.asarray(bp.grad_F(*bp.split(z)), dtype=float),
        dim,
        name="F",
    )
    prob = ProblemInstance(dim, objective, [inequality], equalities, name=bp.name)
    prob.smoothing = smoothing
    prob.bilevel = bp
    return prob
