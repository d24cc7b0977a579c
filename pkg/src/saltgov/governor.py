"""Setpoint governors: the add-on supervisory layer.

Given the current measured state, the requested reference, and an
admissible set, a governor picks the setpoint actually handed to the inner
controllers.  Three modes:

* ``bypass`` passes the reference through untouched (operator override);
* ``srg`` moves all setpoints along the segment from the last admissible
  command toward the reference by a single scalar, computed in closed form
  per polytope row;
* ``cg`` solves a small strictly convex quadratic program, allowing each
  input to move independently under a positive-definite weighting.

The QP is solved by a dense primal active-set method implemented here; no
external optimizer is involved.  If contracting time-dependent bounds ever
leave even the frozen command inadmissible, the governor falls back to
minimizing the squared constraint violation and flags the step.
"""

from dataclasses import dataclass, replace
import math

import numpy as np

from saltgov import kernels

# Setpoint spans used to normalize the default objective weighting:
# one unit of secondary-flow movement trades against one unit of inlet
# temperature movement at these scales.
MV_SPANS = (80.0, 10.0)   # (kg/s, degC)

MODES = ("bypass", "srg", "cg")

QP_TOL = 1e-10
FEAS_TOL = 1e-9


class QpInfeasibleError(RuntimeError):
    """Raised when phase one cannot produce a feasible starting point."""


def default_q_weight(m=2):
    """Identity weighting in span-normalized input units."""
    spans = np.asarray(MV_SPANS[:m], dtype=float)
    return np.diag(1.0 / spans ** 2)


@dataclass(frozen=True)
class GovernorState:
    """Carry-over state of the supervisory layer."""

    mode: str
    v_prev: np.ndarray
    q_weight: np.ndarray

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        q = self.q_weight
        if q.shape[0] != q.shape[1] or np.max(np.abs(q - q.T)) > 1e-12:
            raise ValueError("q_weight must be symmetric")
        np.linalg.cholesky(q)  # positive definiteness


@dataclass(frozen=True)
class QpProblem:
    """min 1/2 v' hessian v + linear' v  s.t.  ineq_mat v <= ineq_rhs."""

    hessian: np.ndarray
    linear: np.ndarray
    ineq_mat: np.ndarray
    ineq_rhs: np.ndarray


@dataclass(frozen=True)
class GovernorRecord:
    """Per-step log entry of a governor decision."""

    r: np.ndarray
    v: np.ndarray
    kappa: float            # nan in cg / bypass modes
    margin: float           # worst-row margin at the applied command
    flag: int               # 1 when the fallback policy was engaged
    n_active: int           # active constraints at the cg solution (-1 otherwise)
    kkt_residual: float     # nan outside cg mode


def make_governor(mode, v0, q_weight=None):
    v0 = np.asarray(v0, dtype=float)
    if q_weight is None:
        q_weight = default_q_weight(len(v0))
    return GovernorState(mode=mode, v_prev=v0.copy(), q_weight=np.asarray(q_weight, dtype=float))


def least_violation(g_mat, rhs, v0, max_iter=200, tol=1e-12):
    """Minimize ||max(G v - rhs, 0)||^2 by damped Gauss-Newton.

    The fallback objective when the polytope (at the current state and
    bounds) admits no feasible command.  Rows with zero input coefficients
    cannot be repaired and simply stay in the residual.
    """
    v = np.asarray(v0, dtype=float).copy()

    def viol(vv):
        return np.maximum(g_mat @ vv - rhs, 0.0)

    f = viol(v)
    obj = float(f @ f)
    for _ in range(max_iter):
        grad = 2.0 * g_mat.T @ f
        if np.linalg.norm(grad) <= tol:
            break
        act = f > 0.0
        ga = g_mat[act]
        gn = ga.T @ ga + 1e-12 * np.eye(len(v))
        step = np.linalg.solve(gn, -0.5 * grad)
        # backtracking on the convex objective
        t = 1.0
        improved = False
        for _ in range(40):
            cand = v + t * step
            fc = viol(cand)
            oc = float(fc @ fc)
            if oc < obj - 1e-16:
                v, f, obj = cand, fc, oc
                improved = True
                break
            t *= 0.5
        if not improved:
            break
    return v, math.sqrt(obj)


def solve_qp(problem, start=None, max_iter_factor=100):
    """Dense primal active-set method for a strictly convex QP.

    Returns (v, active_row_indices, kkt_residual).  `start` must be
    feasible when given; otherwise a least-violation phase one runs first
    and QpInfeasibleError carries the certificate when it fails.

    Degeneracy guards: a blocking row that is linearly dependent on the
    working set replaces its dependent partner instead of being stacked,
    and a row dropped at a stalled point is barred from re-entry until a
    strictly positive step is taken.
    """
    hess = problem.hessian
    lin = problem.linear
    g_mat = problem.ineq_mat
    rhs = problem.ineq_rhs
    nrows = g_mat.shape[0]
    dim = hess.shape[0]
    max_iter = max(max_iter_factor * max(nrows, 1), 50)

    row_norm = np.linalg.norm(g_mat, axis=1)
    zero_rows = row_norm < 1e-14
    if np.any(rhs[zero_rows] < -FEAS_TOL):
        raise QpInfeasibleError(
            f"input-independent row infeasible by {float(-rhs[zero_rows].min()):.3e}"
        )

    if start is None:
        start = np.linalg.solve(hess, -lin)
    v = np.asarray(start, dtype=float).copy()
    if np.max(g_mat @ v - rhs, initial=-np.inf) > FEAS_TOL:
        v, resid = least_violation(g_mat, rhs, v)
        worst = np.max((g_mat @ v - rhs)[~zero_rows], initial=0.0)
        if worst > FEAS_TOL:
            raise QpInfeasibleError(f"phase one residual {resid:.3e}")

    working = []
    barred = set()
    for _ in range(max_iter):
        grad = hess @ v + lin
        if working:
            gw = g_mat[working]
            kkt = np.block([
                [hess, gw.T],
                [gw, np.zeros((len(working), len(working)))],
            ])
            rhs_kkt = np.concatenate([-grad, np.zeros(len(working))])
            try:
                sol = np.linalg.solve(kkt, rhs_kkt)
            except np.linalg.LinAlgError:
                working.pop()
                continue
            d = sol[:dim]
            lam = sol[dim:]
        else:
            d = np.linalg.solve(hess, -grad)
            lam = np.empty(0)

        if np.linalg.norm(d) <= QP_TOL * max(1.0, np.linalg.norm(v)):
            if lam.size == 0 or lam.min() >= -QP_TOL:
                active = sorted(working)
                return v, active, _kkt_residual(hess, lin, g_mat, rhs, v, working, lam)
            drop = int(np.argmin(lam))
            barred.add(working[drop])
            working.pop(drop)
            continue

        # longest feasible step along d; ties break to the lowest row index
        gd = g_mat @ d
        slack = np.maximum(rhs - g_mat @ v, 0.0)
        alpha = 1.0
        block = -1
        for i in range(nrows):
            if i in working or i in barred or gd[i] <= 1e-14 * row_norm[i]:
                continue
            a_i = slack[i] / gd[i]
            if a_i < alpha - 1e-15:
                alpha = a_i
                block = i
        v = v + alpha * d
        if alpha > 1e-12:
            barred.clear()
        if block >= 0 and alpha < 1.0:
            dependent = None
            if dim == 2:
                for j in working:
                    if abs(_det2(g_mat[j], g_mat[block])) \
                            < 1e-9 * row_norm[j] * row_norm[block]:
                        dependent = j
                        break
            if dependent is not None:
                working.remove(dependent)
            working.append(block)

    raise RuntimeError(f"active-set QP failed to converge in {max_iter} iterations")


def _det2(a, b):
    return a[0] * b[1] - a[1] * b[0]


_POOL_INIT = 24
_POOL_GROW = 12


def _pooled_qp(problem, start, margins_at_start):
    """Active-set solve over a lazily grown working pool of rows.

    Admissible-set polytopes carry thousands of rows, most of them far
    from binding; the QP is solved over the tightest few and the solution
    verified against every row, growing the pool until none is violated.
    Exact because each round's subproblem relaxes the full problem.
    """
    g_mat = problem.ineq_mat
    rhs = problem.ineq_rhs
    nrows = g_mat.shape[0]
    if nrows <= _POOL_INIT:
        return solve_qp(problem, start=start) + (None,)

    order = np.argsort(margins_at_start, kind="stable")
    pool = list(order[:_POOL_INIT])
    pool_set = set(pool)
    for _ in range(200):
        sub = QpProblem(problem.hessian, problem.linear,
                        g_mat[pool], rhs[pool])
        v, active_sub, kkt = solve_qp(sub, start=start)
        viol = g_mat @ v - rhs
        newcomers = [int(i) for i in np.argsort(-viol, kind="stable")[:_POOL_GROW]
                     if viol[i] > FEAS_TOL and int(i) not in pool_set]
        if not newcomers:
            active = sorted(pool[i] for i in active_sub)
            return v, active, kkt, viol
        pool.extend(newcomers)
        pool_set.update(newcomers)
    raise RuntimeError("constraint pool failed to stabilize")


def _kkt_residual(hess, lin, g_mat, rhs, v, working, lam):
    grad = hess @ v + lin
    if working:
        grad = grad + g_mat[list(working)].T @ lam
    stationarity = float(np.max(np.abs(grad)))
    violation = float(np.max(g_mat @ v - rhs, initial=0.0))
    comp = 0.0
    if working:
        comp = float(np.max(np.abs(lam * (g_mat[list(working)] @ v - rhs[list(working)]))))
    return max(stationarity, violation, comp)


def _input_rows(hv):
    """Mask of rows the command can influence at all.

    Rows with zero input coefficients state facts about the current state
    (e.g. the instantaneous output) that no admissible choice can change;
    they are reported in margins but never drive the fallback policy.
    """
    return np.linalg.norm(hv, axis=1) > 1e-14


def srg_step(gov, aset, x, r, kern=None):
    """Scalar governor: v = v_prev + kappa (r - v_prev), kappa in [0, 1].

    Each polytope row caps kappa in closed form; the applied kappa is the
    smallest cap clamped to [0, 1].
    """
    if kern is None:
        kern = kernels.get_kernels()
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    hx, hv, h = aset.matrices()
    rhs = h - hx @ x
    alpha = rhs - hv @ gov.v_prev
    steerable = _input_rows(hv)
    if alpha[steerable].min() < -FEAS_TOL:
        return _fallback(gov, hv, rhs, r, kappa=0.0, kern=kern)
    beta = hv @ (r - gov.v_prev)
    kappa = float(kern.srg_kappa(alpha, beta))
    v = gov.v_prev + kappa * (r - gov.v_prev)
    margin = float(np.min(rhs - hv @ v))
    rec = GovernorRecord(r=r.copy(), v=v.copy(), kappa=kappa, margin=margin,
                         flag=0, n_active=-1, kkt_residual=float("nan"))
    return replace(gov, v_prev=v), v, rec


def cg_step(gov, aset, x, r, kern=None):
    """Command governor: project the reference into the polytope.

    Solves min (v-r)' Q (v-r) over H_v v <= h - H_x x; when the reference
    is feasible it is passed through unchanged.
    """
    if kern is None:
        kern = kernels.get_kernels()
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    hx, hv, h = aset.matrices()
    rhs = h - hx @ x
    q = gov.q_weight
    steerable = _input_rows(hv)
    gv = hv[steerable]
    gc = rhs[steerable]
    problem = QpProblem(hessian=2.0 * q, linear=-2.0 * (q @ r),
                        ineq_mat=gv, ineq_rhs=gc)

    margins_r = gc - gv @ r
    if margins_r.min() >= 0.0:
        # reference admissible for every steerable row: pass it through
        margin = float(np.min(rhs - hv @ r))
        rec = GovernorRecord(r=r.copy(), v=r.copy(), kappa=float("nan"),
                             margin=margin, flag=0,
                             n_active=0, kkt_residual=0.0)
        return replace(gov, v_prev=r.copy()), r.copy(), rec

    start = gov.v_prev
    margins_start = gc - gv @ start
    if margins_start.min() < -FEAS_TOL:
        start, _resid = least_violation(gv, gc, start)
        margins_start = gc - gv @ start
        if -margins_start.min() > FEAS_TOL:
            return _fallback(gov, hv, rhs, r, kappa=float("nan"), kern=kern)
    try:
        v, active, kkt, _ = _pooled_qp(problem, start, margins_start)
    except QpInfeasibleError:
        return _fallback(gov, hv, rhs, r, kappa=float("nan"), kern=kern)
    margin = float(np.min(rhs - hv @ v))
    rec = GovernorRecord(r=r.copy(), v=v.copy(), kappa=float("nan"),
                         margin=margin, flag=0, n_active=len(active),
                         kkt_residual=kkt)
    return replace(gov, v_prev=v), v, rec


def _fallback(gov, hv, rhs, r, kappa, kern):
    """Least-violation recovery used when no admissible command exists."""
    v, _ = least_violation(hv, rhs, gov.v_prev)
    margin = float(np.min(rhs - hv @ v))
    rec = GovernorRecord(r=np.asarray(r, dtype=float).copy(), v=v.copy(),
                         kappa=kappa, margin=margin, flag=1, n_active=-1,
                         kkt_residual=float("nan"))
    return replace(gov, v_prev=v), v, rec


def govern(gov, aset, x, r, kern=None):
    """Per-step dispatcher over the governor modes.

    Returns (new governor state, applied setpoints, record).  In bypass
    mode the reference passes straight through; the record still carries
    the margin when an admissible set is supplied, so bypass runs can be
    audited against the constraints.
    """
    r = np.asarray(r, dtype=float)
    if gov.mode == "bypass":
        margin = float("nan")
        if aset is not None:
            hx, hv, h = aset.matrices()
            margin = float(np.min(h - hx @ np.asarray(x, dtype=float) - hv @ r))
        rec = GovernorRecord(r=r.copy(), v=r.copy(), kappa=float("nan"),
                             margin=margin, flag=0, n_active=-1,
                             kkt_residual=float("nan"))
        return replace(gov, v_prev=r.copy()), r.copy(), rec
    if gov.mode == "srg":
        return srg_step(gov, aset, x, r, kern=kern)
    if gov.mode == "cg":
        return cg_step(gov, aset, x, r, kern=kern)
    raise ValueError(f"unknown governor mode {gov.mode!r}")
