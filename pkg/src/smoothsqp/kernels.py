"""Numeric inner loops.

Two kernels dominate runtime:

* ``boltzmann_sums`` reduces the quadrature nodes of each cell, weighted by
  ``exp(-rho (f - c))``, into the cell integral and the cell integral of
  the x-gradient (entropy smoothing of a value function).
* ``ipm_core`` runs a Mehrotra predictor-corrector interior-point method on
  a small dense convex QP ``min 1/2 z'Hz + c'z  s.t.  Az <= b``.

Both exist as a numba-compiled version and a pure numpy version; which one
is exported is decided once at import time by :mod:`smoothsqp._accel`.
"""

import numpy as np

from smoothsqp._accel import USE_NUMBA, maybe_njit


def _boltzmann_sums_numpy(fvals, gradx, weights, shift, rho):
    e = weights * np.exp(-rho * (fvals - shift))
    return e.sum(axis=1), np.einsum("ck,ckn->cn", e, gradx)


def _boltzmann_sums_loop(fvals, gradx, weights, shift, rho):
    n_cells, n_nodes = fvals.shape
    n = gradx.shape[2]
    total = np.zeros(n_cells)
    grad = np.zeros((n_cells, n))
    for c in range(n_cells):
        for k in range(n_nodes):
            e = weights[c, k] * np.exp(-rho * (fvals[c, k] - shift))
            total[c] += e
            for i in range(n):
                grad[c, i] += e * gradx[c, k, i]
    return total, grad


def _max_step(v, dv):
    # largest a in (0, 1] with v + a dv >= 0
    a = 1.0
    for i in range(v.shape[0]):
        if dv[i] < 0.0:
            cand = -v[i] / dv[i]
            if cand < a:
                a = cand
    return a


def _ipm_core(H, c, A, b, z0, tol, max_iter):
    """Mehrotra predictor-corrector for ``min 1/2 z'Hz + c'z, Az <= b``.

    ``z0`` must be strictly feasible. Returns ``(z, lam, s, iters, mu)``.
    """
    m = A.shape[0]
    z = z0.copy()
    s = b - A @ z
    for i in range(m):
        if s[i] < 1.0:
            s[i] = 1.0
    lam = np.full(m, max(c[c.shape[0] - 1], 1.0) / m)
    scale_d = 1.0 + np.max(np.abs(c))
    scale_p = 1.0 + np.max(np.abs(b))
    mu = (s @ lam) / m
    it = 0
    for it in range(1, max_iter + 1):
        rd = H @ z + c + A.T @ lam
        rp = A @ z + s - b
        mu = (s @ lam) / m
        if (
            np.max(np.abs(rd)) <= tol * scale_d
            and np.max(np.abs(rp)) <= tol * scale_p
            and mu <= tol * scale_d
        ) or mu <= 1e-6 * tol * tol * scale_d:
            break
        d = lam / s
        M = H + A.T @ (d.reshape(-1, 1) * A)

        # predictor
        rc = -lam * s
        rhs = -rd - A.T @ ((rc + lam * rp) / s)
        try:
            dz = np.linalg.solve(M, rhs)
        except Exception:
            # Newton matrix singular at machine precision; the caller polishes
            break
        ds = -rp - A @ dz
        dlam = (rc - lam * ds) / s
        a_aff = min(_max_step(s, ds), _max_step(lam, dlam))
        mu_aff = ((s + a_aff * ds) @ (lam + a_aff * dlam)) / m
        sigma = (mu_aff / mu) ** 3

        # corrector
        rc = -lam * s - ds * dlam + sigma * mu
        rhs = -rd - A.T @ ((rc + lam * rp) / s)
        try:
            dz = np.linalg.solve(M, rhs)
        except Exception:
            break
        ds = -rp - A @ dz
        dlam = (rc - lam * ds) / s
        a = 0.995 * min(_max_step(s, ds), _max_step(lam, dlam))
        if a > 1.0:
            a = 1.0
        if ((s + a * ds) @ (lam + a * dlam)) / m > (1.0 - 0.01 * a) * mu:
            # corrector overshoots (cycling); take a plain centred step
            rc = -lam * s + 0.5 * mu
            rhs = -rd - A.T @ ((rc + lam * rp) / s)
            dz = np.linalg.solve(M, rhs)
            ds = -rp - A @ dz
            dlam = (rc - lam * ds) / s
            a = 0.995 * min(_max_step(s, ds), _max_step(lam, dlam))
            if a > 1.0:
                a = 1.0
        z = z + a * dz
        s = s + a * ds
        lam = lam + a * dlam
        for i in range(m):
            if s[i] < 1e-300:
                s[i] = 1e-300
            if lam[i] < 1e-300:
                lam[i] = 1e-300
    return z, lam, s, it, mu


if USE_NUMBA:
    boltzmann_sums = maybe_njit(_boltzmann_sums_loop)
    _max_step = maybe_njit(_max_step)
    ipm_core = maybe_njit(_ipm_core)
else:
    boltzmann_sums = _boltzmann_sums_numpy
    ipm_core = _ipm_core
