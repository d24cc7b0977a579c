"""Finite-horizon maximal output admissible sets.

For a stable model x+ = A x + B v, y = C x and linear output constraints
G y <= b, the set of (state, constant command) pairs whose predicted
outputs satisfy the constraints at every future step is approximated by a
polytope in (x, v):

    step rows     g C A^k x + g C S_k B v <= b_dev,   k = 0..T,
                  S_k = sum_{j<k} A^j  (S_0 = 0),
    steady rows   g C (I - A)^-1 B v <= b_dev - eps * |b_dev at build|,

all expressed in deviation coordinates (b_dev = b - g y_ref).  The
tightened steady rows make the truncation safe: once the transient term
A^k has decayed below the tightening, every row beyond the horizon is
implied.  Bounds enter only through the right-hand side, so time-dependent
constraint schedules are handled by refreshing h and reusing the matrices.

Optional redundancy pruning solves one small LP per row and never affects
classification (pruned rows are provably implied).
"""

from dataclasses import dataclass, replace
import hashlib
import json
import warnings

import numpy as np
from scipy.optimize import linprog

from saltgov import kernels


class InstabilityError(RuntimeError):
    """Raised when the model's spectral radius is not strictly below one."""


class ShapeChangeError(RuntimeError):
    """Raised when a bound refresh changes the constraint row structure."""


class EmptySliceError(RuntimeError):
    """Raised when no admissible input exists at the given state."""


class HorizonWarning(UserWarning):
    """Emitted when the last horizon step still contributes non-redundant rows."""


@dataclass(frozen=True)
class OutputConstraintSet:
    """Linear output constraints coeff . y <= bound in physical units."""

    coeffs: np.ndarray       # (r, p)
    bounds: np.ndarray       # (r,)
    labels: tuple

    def __post_init__(self):
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] == 0:
            raise ValueError("need at least one constraint row")
        if np.any(np.all(self.coeffs == 0.0, axis=1)):
            raise ValueError("zero-coefficient constraint row")
        if self.coeffs.shape[0] != len(self.bounds) or len(self.labels) != len(self.bounds):
            raise ValueError("row count mismatch")

    def with_bounds(self, bounds):
        return OutputConstraintSet(self.coeffs, np.asarray(bounds, dtype=float), self.labels)

    def content_hash(self):
        blob = json.dumps(
            {"coeffs": self.coeffs.tolist(), "bounds": self.bounds.tolist(),
             "labels": list(self.labels)},
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).hexdigest()


def output_limits(t_p_out_max, t_s_out_min, output_names=("T_p_out", "T_s_out", "P_p_out", "P_p_1")):
    """Constraint set for a max on T_p_out and a min on T_s_out."""
    p = len(output_names)
    row_max = np.zeros(p)
    row_max[output_names.index("T_p_out")] = 1.0
    row_min = np.zeros(p)
    row_min[output_names.index("T_s_out")] = -1.0
    return OutputConstraintSet(
        coeffs=np.vstack([row_max, row_min]),
        bounds=np.array([t_p_out_max, -t_s_out_min]),
        labels=("T_p_out_max", "T_s_out_min"),
    )


@dataclass(frozen=True)
class AdmissibleSet:
    """Polytope {(x, v): H_x x + H_v v <= h} in deviation coordinates."""

    h_x: np.ndarray            # (rows, n)
    h_v: np.ndarray            # (rows, m)
    h: np.ndarray              # (rows,)
    row_constraint: np.ndarray  # (rows,) index into the constraint set
    row_step: np.ndarray       # (rows,) horizon step, -1 for steady rows
    horizon: int
    epsilon: float
    tightening: np.ndarray     # (r,) eps * |b_dev| frozen at build time
    constraints: OutputConstraintSet
    ref_outputs: np.ndarray
    active: np.ndarray         # (rows,) bool mask, False = pruned
    provenance: dict           # model hash, constraint hash, build time index

    @property
    def n(self):
        return self.h_x.shape[1]

    @property
    def m(self):
        return self.h_v.shape[1]

    def matrices(self):
        """Active-row (H_x, H_v, h) triples used for membership and the QP."""
        if self.active.all():
            return self.h_x, self.h_v, self.h
        return self.h_x[self.active], self.h_v[self.active], self.h[self.active]


def _dev_bounds(constraints, ref_outputs):
    return constraints.bounds - constraints.coeffs @ ref_outputs


def build_moas(model, constraints, horizon=1500, epsilon=1e-3, *,
               prune=False, check_determinedness=True, time_index=0):
    """Construct the admissible polytope for a stable model.

    Emits HorizonWarning when the final horizon step still adds
    non-redundant rows (the set is then a strict outer recursion depth, not
    yet determined).  epsilon tightens the steady rows by epsilon * |b_dev|
    per constraint, frozen at build time.
    """
    if not 0.0 < epsilon <= 0.1:
        raise ValueError("epsilon must lie in (0, 0.1]")
    rho = model.spectral_radius()
    if rho >= 1.0:
        raise InstabilityError(f"spectral radius {rho:.6f} >= 1")
    if not np.all(model.d == 0.0):
        raise ValueError("feedthrough must be zero")

    g = constraints.coeffs
    if g.shape[1] != model.p:
        raise ValueError("constraint coefficients do not match model outputs")
    b_dev = _dev_bounds(constraints, model.ref_outputs)
    r = g.shape[0]
    n, m = model.n, model.m

    rows_x = np.empty(((horizon + 1) * r + r, n))
    rows_v = np.empty(((horizon + 1) * r + r, m))
    row_ci = np.empty((horizon + 1) * r + r, dtype=int)
    row_k = np.empty((horizon + 1) * r + r, dtype=int)

    gc = g @ model.c              # W_0
    w = gc.copy()
    vk = np.zeros((r, m))         # V_0 = 0
    for k in range(horizon + 1):
        sl = slice(k * r, (k + 1) * r)
        rows_x[sl] = w
        rows_v[sl] = vk
        row_ci[sl] = np.arange(r)
        row_k[sl] = k
        vk = vk + w @ model.b
        w = w @ model.a

    # steady rows, tightened
    t_gain = np.linalg.solve(np.eye(n) - model.a, model.b)
    sl = slice((horizon + 1) * r, (horizon + 2) * r)
    rows_x[sl] = 0.0
    rows_v[sl] = gc @ t_gain
    row_ci[sl] = np.arange(r)
    row_k[sl] = -1

    tightening = epsilon * np.abs(b_dev)
    h = b_dev[row_ci] - np.where(row_k < 0, tightening[row_ci], 0.0)

    aset = AdmissibleSet(
        h_x=rows_x, h_v=rows_v, h=h,
        row_constraint=row_ci, row_step=row_k,
        horizon=horizon, epsilon=epsilon, tightening=tightening,
        constraints=constraints, ref_outputs=model.ref_outputs.copy(),
        active=np.ones(len(h), dtype=bool),
        provenance={
            "model_hash": _safe_model_hash(model),
            "constraints_hash": constraints.content_hash(),
            "time_index": int(time_index),
        },
    )
    if check_determinedness:
        loose = _nonredundant_terminal_rows(aset)
        if loose:
            warnings.warn(
                f"horizon {horizon} too small: terminal rows {loose} are "
                "non-redundant (determinedness not reached)",
                HorizonWarning,
            )
    if prune:
        aset = _prune(aset)
    return aset


def _safe_model_hash(model):
    from saltgov.dmdc import model_hash

    return model_hash(model)


def _row_implied(aset, idx, tol=1e-9):
    """True when row idx is implied by the remaining active rows (LP check)."""
    hx, hv, h = aset.h_x, aset.h_v, aset.h
    keep = aset.active.copy()
    keep[idx] = False
    mat = np.hstack([hx[keep], hv[keep]])
    obj = np.concatenate([hx[idx], hv[idx]])
    res = linprog(-obj, A_ub=mat, b_ub=h[keep],
                  bounds=[(None, None)] * mat.shape[1], method="highs")
    if res.status == 3:      # unbounded: the row cuts the feasible set
        return False
    if not res.success:
        return False
    return -res.fun <= h[idx] + tol


def _nonredundant_terminal_rows(aset):
    loose = []
    for idx in np.flatnonzero(aset.row_step == aset.horizon):
        if not _row_implied(aset, idx):
            loose.append(int(aset.row_constraint[idx]))
    return loose


def _prune(aset):
    active = aset.active.copy()
    order = np.argsort(-aset.row_step)  # drop late-horizon rows first
    for idx in order:
        if aset.row_step[idx] < 0:
            continue  # keep steady rows unconditionally
        if not active[idx]:
            continue
        probe = replace(aset, active=active)
        if _row_implied(probe, idx):
            active[idx] = False
    return replace(aset, active=active)


def is_member(aset, x, v, kern=None):
    """Membership test; returns (bool, worst-row margin).

    The set is closed: points on the boundary (margin >= -1e-12) count as
    members.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.shape != (aset.n,) or v.shape != (aset.m,):
        raise ValueError(
            f"expected state of length {aset.n} and input of length {aset.m}"
        )
    if kern is None:
        kern = kernels.get_kernels()
    hx, hv, h = aset.matrices()
    margin = float(np.min(kern.margins(h, hx, hv, x, v)))
    return margin >= -1e-12, margin


def membership_margins(aset, xs, vs):
    """Vectorized worst-row margins for batches of (x, v) samples."""
    hx, hv, h = aset.matrices()
    vals = h[None, :] - xs @ hx.T - vs @ hv.T
    return vals.min(axis=1)


def rebuild_bounds(aset, constraints_at_t, *, time_index=None,
                   prune_refresh_threshold=1e-12):
    """Refresh the right-hand side for updated bounds.

    Coefficients must be unchanged; only h is recomputed (bounds enter
    linearly).  If rows were pruned and any bound moved by more than the
    threshold, pruning is re-evaluated from the full row set.
    """
    old = aset.constraints
    if (old.coeffs.shape != constraints_at_t.coeffs.shape
            or old.labels != constraints_at_t.labels
            or np.max(np.abs(old.coeffs - constraints_at_t.coeffs)) > 1e-12):
        raise ShapeChangeError("constraint coefficients changed; rebuild the set")

    b_dev = _dev_bounds(constraints_at_t, aset.ref_outputs)
    h = b_dev[aset.row_constraint] - np.where(
        aset.row_step < 0, aset.tightening[aset.row_constraint], 0.0
    )
    moved = np.max(np.abs(constraints_at_t.bounds - old.bounds))
    provenance = dict(aset.provenance)
    provenance["constraints_hash"] = constraints_at_t.content_hash()
    if time_index is not None:
        provenance["time_index"] = int(time_index)
    new = AdmissibleSet(
        h_x=aset.h_x, h_v=aset.h_v, h=h,
        row_constraint=aset.row_constraint, row_step=aset.row_step,
        horizon=aset.horizon, epsilon=aset.epsilon, tightening=aset.tightening,
        constraints=constraints_at_t, ref_outputs=aset.ref_outputs,
        active=aset.active, provenance=provenance,
    )
    if not aset.active.all() and moved > prune_refresh_threshold:
        new = replace(new, active=np.ones(len(h), dtype=bool))
        new = _prune(new)
    return new


DEFAULT_CLIP_BOX = ((-150.0, 150.0), (-30.0, 30.0))


def export_slice(aset, x, clip_box=DEFAULT_CLIP_BOX):
    """Fix the state and project to the 2-D input plane.

    Returns the polygon vertices counter-clockwise, clipped to clip_box
    (deviation units).  Raises EmptySliceError when no admissible input
    exists at x.
    """
    if aset.m != 2:
        raise ValueError("slice export requires a two-input model")
    x = np.asarray(x, dtype=float)
    hx, hv, h = aset.matrices()
    rhs = h - hx @ x

    (u_lo, u_hi), (w_lo, w_hi) = clip_box
    poly = [  # counter-clockwise box
        np.array([u_lo, w_lo]), np.array([u_hi, w_lo]),
        np.array([u_hi, w_hi]), np.array([u_lo, w_hi]),
    ]
    norms = np.linalg.norm(hv, axis=1)
    for a_row, c, nrm in zip(hv, rhs, norms):
        if nrm < 1e-14:
            if c < -1e-12:
                raise EmptySliceError("state-only row infeasible at this state")
            continue
        poly = _clip_halfplane(poly, a_row, c)
        if not poly:
            raise EmptySliceError("no admissible input at this state")
    verts = _dedupe(poly)
    if len(verts) < 3:
        raise EmptySliceError("slice degenerates below a polygon")
    return np.array(verts)


def _clip_halfplane(poly, a, c, tol=1e-12):
    """Sutherland-Hodgman clip of a convex polygon against a . v <= c."""
    out = []
    npts = len(poly)
    for i in range(npts):
        p = poly[i]
        q = poly[(i + 1) % npts]
        fp = a @ p - c
        fq = a @ q - c
        if fp <= tol:
            out.append(p)
            if fq > tol:
                t = fp / (fp - fq)
                out.append(p + t * (q - p))
        elif fq <= tol:
            t = fp / (fp - fq)
            out.append(p + t * (q - p))
    return out


def _dedupe(poly, tol=1e-9):
    verts = []
    for p in poly:
        if not verts or np.linalg.norm(p - verts[-1]) > tol:
            verts.append(p)
    if len(verts) > 1 and np.linalg.norm(verts[0] - verts[-1]) <= tol:
        verts.pop()
    return verts
