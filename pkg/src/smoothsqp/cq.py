"""Weak constraint qualifications evaluated on a recorded gradient trajectory.

The qualifications are stated over limits ``v_i`` of smoothed constraint
gradients along the iterates. Those limits are not computable, so they are
approximated by the gradients at the largest-rho iterate of a cluster of tail
iterates, and a cluster whose gradients are still moving is reported as
unsettled instead of being judged.

All four checks reduce to two linear programs:

* an abnormal multiplier: ``V_I lam_I + V_J lam_J = 0`` with ``lam_I >= 0``,
  ``lam != 0`` and ``g'lam_I + h'lam_J >= 0``;
* a strictly feasible linearization: ``g + V_I'd < 0``, ``h + V_J'd = 0``.

A nonzero multiplier either has ``lam_I = 0`` (then ``V_J`` is rank
deficient) or can be scaled to ``sum(lam_I) = 1``, which removes the trivial
``lam+ = lam-`` solution that a plain l1 normalization admits.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

WNNAMCQ = "WNNAMCQ"
WGMFCQ = "WGMFCQ"
EWNNAMCQ = "EWNNAMCQ"
EWGMFCQ = "EWGMFCQ"

FEAS_TOL = 1e-6
GRAD_SETTLE_TOL = 1e-4
CERT_TOL = 1e-7
RANK_TOL = 1e-9
LP_TOL = 1e-9
D_BOX = 1e6


class CqInconclusiveError(RuntimeError):
    """The cluster does not support a verdict (unsettled or infeasible anchor)."""


@dataclass
class ClusterMember:
    k: int
    x: np.ndarray
    rho: float
    grads_ineq: np.ndarray  # (p, n)
    grads_eq: np.ndarray  # (q - p, n)


@dataclass
class GradientCluster:
    anchor: np.ndarray
    members: List[ClusterMember]
    ineq_limits: np.ndarray  # (p, n)
    eq_limits: np.ndarray  # (q - p, n)
    ineq_values: np.ndarray  # g_i at the anchor (base or surrogate values)
    eq_values: np.ndarray
    settled: bool
    grad_change: float = np.nan
    feas_tol: float = FEAS_TOL

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(np.abs(self.ineq_values) <= self.feas_tol)

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.ineq_values <= self.feas_tol) and np.all(np.abs(self.eq_values) <= self.feas_tol))

    @classmethod
    def from_limits(cls, ineq_limits, eq_limits, ineq_values=None, eq_values=None, anchor=None,
                    feas_tol: float = FEAS_TOL) -> "GradientCluster":
        """A settled cluster built directly from limit vectors and anchor values."""
        vi = np.atleast_2d(np.asarray(ineq_limits, dtype=float)) if len(ineq_limits) else None
        vj = np.atleast_2d(np.asarray(eq_limits, dtype=float)) if len(eq_limits) else None
        n = (vi if vi is not None else vj).shape[1] if (vi is not None or vj is not None) else (
            len(anchor) if anchor is not None else 1)
        vi = vi if vi is not None else np.zeros((0, n))
        vj = vj if vj is not None else np.zeros((0, n))
        gi = np.zeros(len(vi)) if ineq_values is None else np.asarray(ineq_values, dtype=float).reshape(len(vi))
        hj = np.zeros(len(vj)) if eq_values is None else np.asarray(eq_values, dtype=float).reshape(len(vj))
        anchor = np.zeros(n) if anchor is None else np.asarray(anchor, dtype=float)
        return cls(anchor, [], vi, vj, gi, hj, settled=True, grad_change=0.0, feas_tol=feas_tol)


@dataclass
class CqVerdict:
    kind: str
    holds: bool
    certificate: Optional[dict] = None
    limit_vectors_used: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            return v

        return {
            "kind": self.kind,
            "holds": bool(self.holds),
            "certificate": conv(self.certificate),
            "limit_vectors_used": conv(self.limit_vectors_used),
        }


# -- cluster collection ------------------------------------------------------


def _anchor_values(prob, anchor, rho):
    g = np.array([fn.base_value(anchor, rho) for fn in prob.inequalities], dtype=float)
    h = np.array([fn.base_value(anchor, rho) for fn in prob.equalities], dtype=float)
    return g, h


def collect_clusters(trace: Sequence, cluster_radius: float = 1e-3, tail_fraction: float = 0.5, prob=None,
                     grad_settle_tol: float = GRAD_SETTLE_TOL, feas_tol: float = FEAS_TOL) -> List[GradientCluster]:
    """Group tail iterates into clusters around candidate accumulation points.

    Anchors are taken greedily from the end of the tail. Constraint values at
    an anchor come from ``prob``'s base values when ``prob`` is given (falling
    back to the smoothed value at the largest rho), else from the smoothed
    values recorded at the largest-rho member.
    """
    if len(trace) < 2:
        return []
    if not (0 < tail_fraction <= 1) or cluster_radius <= 0:
        raise ValueError("need 0 < tail_fraction <= 1 and cluster_radius > 0")
    start = min(int(np.floor((1 - tail_fraction) * len(trace))), len(trace) - 2)
    tail = list(trace[start:])
    assigned = [False] * len(tail)
    clusters = []
    for a in range(len(tail) - 1, -1, -1):
        if assigned[a]:
            continue
        anchor = np.asarray(tail[a].x, dtype=float)
        idx = [i for i, rec in enumerate(tail)
               if not assigned[i] and np.linalg.norm(rec.x - anchor) <= cluster_radius]
        for i in idx:
            assigned[i] = True
        members = [ClusterMember(tail[i].k, tail[i].x.copy(), tail[i].rho,
                                 np.asarray(tail[i].grad_ineq, dtype=float).copy(),
                                 np.asarray(tail[i].grad_eq, dtype=float).copy()) for i in sorted(idx)]
        last = members[-1]
        if len(members) >= 2:
            prev = members[-2]
            change = max(np.max(np.abs(last.grads_ineq - prev.grads_ineq), initial=0.0),
                         np.max(np.abs(last.grads_eq - prev.grads_eq), initial=0.0))
        else:
            change = np.inf
        if prob is not None:
            g, h = _anchor_values(prob, anchor, last.rho)
        else:
            rec = tail[max(idx)]
            g, h = np.asarray(rec.ineq_values, dtype=float), np.asarray(rec.eq_values, dtype=float)
        clusters.append(GradientCluster(
            anchor=anchor, members=members, ineq_limits=last.grads_ineq, eq_limits=last.grads_eq,
            ineq_values=g, eq_values=h, settled=bool(change <= grad_settle_tol), grad_change=float(change),
            feas_tol=feas_tol,
        ))
    return clusters


# -- linear-algebra building blocks -------------------------------------------


def _rank(V, rank_tol: float = RANK_TOL) -> int:
    if V.size == 0:
        return 0
    sv = np.linalg.svd(V, compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rank_tol * sv[0]))


def _null_vector(VJ):
    """Unit-l1 vector in the null space of the columns ``VJ.T`` (rows of VJ)."""
    _, _, vt = np.linalg.svd(VJ.T)
    lam = vt[-1]
    return lam / np.abs(lam).sum()


def _find_abnormal_multiplier(VI, VJ, g, h, rank_tol=RANK_TOL):
    """Return ``(lam_I, lam_J)`` with ``sum|lam| = 1`` solving the multiplier system, or None.

    ``VI`` is ``(p, n)``, ``VJ`` is ``(q, n)``; ``g`` and ``h`` weight the sign
    condition (pass zeros to drop it).
    """
    p, q = len(VI), len(VJ)
    if q and _rank(VJ, rank_tol) < q:
        lam_J = _null_vector(VJ)
        if h @ lam_J < 0:
            lam_J = -lam_J
        return np.zeros(p), lam_J
    if p == 0:
        return None
    n = VI.shape[1]
    # variables: lam_I (p), lam_plus (q), lam_minus (q); all >= 0
    A_eq = np.zeros((n + 1, p + 2 * q))
    A_eq[:n, :p] = VI.T
    A_eq[:n, p:p + q] = VJ.T
    A_eq[:n, p + q:] = -VJ.T
    A_eq[n, :p] = 1.0
    b_eq = np.zeros(n + 1)
    b_eq[n] = 1.0
    A_ub = -np.concatenate([g, h, -h])[None, :]
    res = linprog(np.zeros(p + 2 * q), A_ub=A_ub, b_ub=[0.0], A_eq=A_eq, b_eq=b_eq,
                  bounds=[(0, None)] * (p + 2 * q), method="highs",
                  options={"primal_feasibility_tolerance": LP_TOL, "dual_feasibility_tolerance": LP_TOL})
    if res.status != 0:
        return None
    z = res.x
    lam_I, lam_J = z[:p], z[p:p + q] - z[p + q:]
    total = np.abs(lam_I).sum() + np.abs(lam_J).sum()
    return lam_I / total, lam_J / total


def _strict_direction(VI, VJ, g, h, d_box=D_BOX):
    """Solve ``max s`` s.t. ``g + VI d <= -s``, ``h + VJ d = 0``, ``s <= 1``, ``|d| <= d_box``.

    Returns ``(s, d)``; ``s = -inf`` when the equalities are inconsistent.
    """
    p, q = len(VI), len(VJ)
    n = VI.shape[1] if p else VJ.shape[1]
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([VI, np.ones((p, 1))]) if p else None
    b_ub = -g if p else None
    A_eq = np.hstack([VJ, np.zeros((q, 1))]) if q else None
    b_eq = -h if q else None
    bounds = [(-d_box, d_box)] * n + [(None, 1.0)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs",
                  options={"primal_feasibility_tolerance": LP_TOL, "dual_feasibility_tolerance": LP_TOL})
    if res.status != 0:
        return -np.inf, None
    return float(res.x[-1]), res.x[:-1]


def _require_settled(cluster: GradientCluster, kind: str):
    if not cluster.settled:
        raise CqInconclusiveError(
            f"{kind}: cluster at {cluster.anchor.tolist()} is unsettled "
            f"(last gradient change {cluster.grad_change:.3e}); no verdict"
        )


def _require_feasible(cluster: GradientCluster, kind: str):
    if not cluster.feasible:
        raise CqInconclusiveError(f"{kind}: anchor {cluster.anchor.tolist()} is not feasible within {cluster.feas_tol:g}")


def _multiplier_verdict(kind, VI, VJ, g, h, used, rank_tol, cert_tol):
    found = _find_abnormal_multiplier(VI, VJ, g, h, rank_tol)
    if found is None:
        return CqVerdict(kind, True, {"evidence": "multiplier system infeasible", "rank_eq": _rank(VJ, rank_tol)},
                         used)
    lam_I, lam_J = found
    residual = float(np.max(np.abs(VI.T @ lam_I + VJ.T @ lam_J), initial=0.0))
    sign_value = float(g @ lam_I + h @ lam_J)
    if residual > cert_tol:
        # the LP accepted a point only within its own tolerance; treat as a non-certificate
        return CqVerdict(kind, True, {"evidence": "no multiplier within cert_tol", "lp_residual": residual}, used)
    return CqVerdict(kind, False, {"lam_ineq": lam_I, "lam_eq": lam_J, "residual": residual,
                                   "sign_value": sign_value}, used)


def _direction_verdict(kind, VI, VJ, g, h, used, rank_tol, d_box):
    q = len(VJ)
    rank = _rank(VJ, rank_tol)
    if q and rank < q:
        return CqVerdict(kind, False, {"evidence": "equality limit vectors are linearly dependent",
                                       "rank_eq": rank, "lam_eq": _null_vector(VJ)}, used)
    if len(VI) == 0 and q == 0:
        return CqVerdict(kind, True, {"evidence": "no constraints"}, used)
    s, d = _strict_direction(VI, VJ, g, h, d_box)
    if s > LP_TOL:
        return CqVerdict(kind, True, {"s": s, "d": d, "rank_eq": rank}, used)
    cert = {"s": s, "rank_eq": rank}
    found = _find_abnormal_multiplier(VI, VJ, g, h, rank_tol)
    if found is not None:
        cert.update(lam_ineq=found[0], lam_eq=found[1])
    return CqVerdict(kind, False, cert, used)


# -- the four qualifications ---------------------------------------------------


def check_wnnamcq(cluster: GradientCluster, rank_tol: float = RANK_TOL, cert_tol: float = CERT_TOL) -> CqVerdict:
    _require_settled(cluster, WNNAMCQ)
    _require_feasible(cluster, WNNAMCQ)
    act = cluster.active_set
    VI, VJ = cluster.ineq_limits[act], cluster.eq_limits
    used = {"ineq": VI, "eq": VJ, "active_set": act}
    return _multiplier_verdict(WNNAMCQ, VI, VJ, np.zeros(len(act)), np.zeros(len(VJ)), used, rank_tol, cert_tol)


def check_ewnnamcq(cluster: GradientCluster, rank_tol: float = RANK_TOL, cert_tol: float = CERT_TOL) -> CqVerdict:
    _require_settled(cluster, EWNNAMCQ)
    VI, VJ = cluster.ineq_limits, cluster.eq_limits
    used = {"ineq": VI, "eq": VJ}
    return _multiplier_verdict(EWNNAMCQ, VI, VJ, cluster.ineq_values, cluster.eq_values, used, rank_tol, cert_tol)


def check_wgmfcq(cluster: GradientCluster, rank_tol: float = RANK_TOL, d_box: float = D_BOX) -> CqVerdict:
    _require_settled(cluster, WGMFCQ)
    _require_feasible(cluster, WGMFCQ)
    act = cluster.active_set
    VI, VJ = cluster.ineq_limits[act], cluster.eq_limits
    used = {"ineq": VI, "eq": VJ, "active_set": act}
    # homogeneous system, so the unit box loses nothing
    return _direction_verdict(WGMFCQ, VI, VJ, np.zeros(len(act)), np.zeros(len(VJ)), used, rank_tol, 1.0)


def check_ewgmfcq(cluster: GradientCluster, rank_tol: float = RANK_TOL, d_box: float = D_BOX) -> CqVerdict:
    _require_settled(cluster, EWGMFCQ)
    VI, VJ = cluster.ineq_limits, cluster.eq_limits
    used = {"ineq": VI, "eq": VJ}
    return _direction_verdict(EWGMFCQ, VI, VJ, cluster.ineq_values, cluster.eq_values, used, rank_tol, d_box)


def check_bilevel_wnnamcq(grad_f_diff, grad_eq, rank_tol: float = RANK_TOL) -> bool:
    """Linear independence of ``grad f - (grad gamma, 0)`` and ``grad (grad_y f)``.

    Rows are normalized first so the verdict does not depend on their scales.
    """
    M = np.vstack([np.asarray(grad_f_diff, dtype=float), np.asarray(grad_eq, dtype=float)])
    if not np.all(np.isfinite(M)):
        raise ValueError("vectors must be finite")
    norms = np.linalg.norm(M, axis=1)
    if np.any(norms == 0.0):
        return False
    sv = np.linalg.svd(M / norms[:, None], compute_uv=False)
    return bool(sv[0] > 0 and sv[-1] > rank_tol * sv[0])


def run_all(cluster: GradientCluster) -> List[CqVerdict]:
    """Every applicable verdict for one cluster; inconclusive checks are skipped."""
    out = []
    for fn in (check_wnnamcq, check_wgmfcq, check_ewnnamcq, check_ewgmfcq):
        try:
            out.append(fn(cluster))
        except CqInconclusiveError:
            continue
    return out
