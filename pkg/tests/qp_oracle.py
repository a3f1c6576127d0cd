"""Brute-force active-set enumeration for the elastic QP, independent of the solver."""

import itertools

import numpy as np

from smoothsqp.qp import QpData


def rows(n, G, g, Hq, h):
    # z = (d, xi); every linearized constraint reads a'd - xi <= -value
    A, b = [], []
    for gi, gv in zip(G, g):
        A.append(np.append(gi, -1.0)); b.append(-gv)
    for hi, hv in zip(Hq, h):
        A.append(np.append(hi, -1.0)); b.append(-hv)
        A.append(np.append(-hi, -1.0)); b.append(hv)
    A.append(np.append(np.zeros(n), -1.0)); b.append(0.0)
    return np.array(A), np.array(b)


def brute_force(W, grad_f, G, g, Hq, h, r, tol=1e-9):
    """Minimum objective over all KKT points of every active subset."""
    n = len(grad_f)
    A, b = rows(n, G, g, Hq, h)
    N = n + 1
    H = np.zeros((N, N))
    H[:n, :n] = W
    c = np.append(grad_f, r)
    best, arg = np.inf, None
    m = A.shape[0]
    for k in range(1, m + 1):
        for S in itertools.combinations(range(m), k):
            Aa = A[list(S)]
            K = np.block([[H, Aa.T], [Aa, np.zeros((k, k))]])
            if np.linalg.matrix_rank(K) < N + k:
                continue
            sol = np.linalg.solve(K, np.concatenate([-c, b[list(S)]]))
            z, lam = sol[:N], sol[N:]
            if np.all(lam >= -tol) and np.all(A @ z <= b + tol):
                val = 0.5 * z @ H @ z + c @ z
                if val < best:
                    best, arg = val, z
    return best, arg


def random_qp(rng, n_max=3, rows_max=3):
    n = int(rng.integers(1, n_max + 1))
    p = int(rng.integers(0, rows_max + 1))
    ne = int(rng.integers(0, rows_max - p + 1))
    M = rng.uniform(-1, 1, (n, n))
    W = M @ M.T + 0.1 * np.eye(n)
    return QpData(n, W, rng.uniform(-1, 1, n), rng.uniform(-1, 1, p), rng.uniform(-1, 1, (p, n)),
                  rng.uniform(-1, 1, ne), rng.uniform(-1, 1, (ne, n)), float(rng.uniform(0.1, 10)))


def brute_force_qp(qp: QpData):
    return brute_force(qp.W, qp.grad_f, qp.grad_g, qp.g, qp.grad_h, qp.h, qp.r)
